"""Label taxonomy, annotation-table parsing and the per-image index."""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, TextIO


@dataclass(frozen=True, order=True)
class ClassLabel:
    id: int
    name: str = field(compare=False)

    @property
    def is_lesion(self) -> bool:
        return self.name != NO_FINDING_NAME

    def __str__(self) -> str:
        return self.name


NO_FINDING_NAME = "No finding"

# ids follow the public training table layout
LABELS: tuple[ClassLabel, ...] = tuple(
    ClassLabel(i, name)
    for i, name in enumerate(
        [
            "Aortic enlargement",
            "Atelectasis",
            "Calcification",
            "Cardiomegaly",
            "Consolidation",
            "ILD",
            "Infiltration",
            "Lung Opacity",
            "Nodule/Mass",
            "Other lesion",
            "Pleural effusion",
            "Pleural thickening",
            "Pneumothorax",
            "Pulmonary fibrosis",
            NO_FINDING_NAME,
        ]
    )
)
LABELS_BY_NAME = {label.name: label for label in LABELS}
LABELS_BY_ID = {label.id: label for label in LABELS}
_ALIASES = {"Other lesions": LABELS_BY_NAME["Other lesion"]}
NO_FINDING = LABELS_BY_NAME[NO_FINDING_NAME]
LESION_LABELS: tuple[ClassLabel, ...] = tuple(l for l in LABELS if l.is_lesion)


class UnknownLabel(KeyError):
    pass


def get_label(name_or_label) -> ClassLabel:
    if isinstance(name_or_label, ClassLabel):
        return name_or_label
    label = LABELS_BY_NAME.get(name_or_label) or _ALIASES.get(name_or_label)
    if label is None:
        raise UnknownLabel(f"unknown class name {name_or_label!r}")
    return label


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


class AnnotationError(ValueError):
    """A problem in the annotation table, located by 1-based file line."""

    kind = "AnnotationError"

    def __init__(self, detail: str, row: Optional[int] = None):
        self.detail = detail
        self.row = row
        where = f" at row {row}" if row is not None else ""
        super().__init__(f"{self.kind}{where}: {detail}")


class UnknownClassName(AnnotationError):
    kind = "UnknownClassName"


class ClassIdMismatch(AnnotationError):
    kind = "ClassIdMismatch"


class InvalidBox(AnnotationError):
    kind = "InvalidBox"


class BoxOnNoFinding(AnnotationError):
    kind = "BoxOnNoFinding"


class MalformedRow(AnnotationError):
    kind = "MalformedRow"


class MixedNoFinding(AnnotationError):
    kind = "MixedNoFinding"


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) and c >= 0 for c in coords):
            raise InvalidBox(f"coordinates must be finite and >= 0, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBox(f"need x_min < x_max and y_min < y_max, got {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def intersection_area(self, other: "BBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def mirrored(self, width: float) -> "BBox":
        """Reflect horizontally inside an image ``width`` pixels wide."""
        return BBox(width - self.x_max, self.y_min, width - self.x_min, self.y_max)


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    rad_id: str
    label: ClassLabel
    bbox: Optional[BBox] = None

    def __post_init__(self):
        if self.label.is_lesion and self.bbox is None:
            raise InvalidBox(f"lesion {self.label.name!r} requires a bounding box")
        if not self.label.is_lesion and self.bbox is not None:
            raise BoxOnNoFinding("'No finding' must not carry a bounding box")


_NAT = re.compile(r"(\d+)")


def rad_sort_key(rad_id: str):
    """Natural ordering so R2 sorts before R10."""
    return [int(p) if p.isdigit() else p for p in _NAT.split(rad_id)]


@dataclass(frozen=True)
class ImageAnnotations:
    image_id: str
    annotators: tuple[str, ...]
    label_sets: Mapping[str, frozenset]
    boxes: Mapping[str, tuple[tuple[ClassLabel, BBox], ...]]
    record_counts: Mapping[str, int]

    def has_finding(self, rad_id: str) -> bool:
        return any(l.is_lesion for l in self.label_sets[rad_id])

    @property
    def any_finding(self) -> bool:
        return any(self.has_finding(r) for r in self.annotators)

    @property
    def labels(self) -> frozenset:
        """Union of every annotator's labels."""
        return frozenset().union(*self.label_sets.values())

    def boxes_of(self, rad_id: str, label: ClassLabel) -> list[BBox]:
        return [b for l, b in self.boxes[rad_id] if l == label]


ImageIndex = dict[str, ImageAnnotations]


@dataclass(frozen=True)
class Taxonomy:
    labels: tuple[ClassLabel, ...] = LABELS
    overlap_pairs: frozenset = frozenset()
    umbrella_map: Mapping[ClassLabel, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.labels)
        for pair in self.overlap_pairs:
            if len(pair) != 2 or not pair <= known or NO_FINDING in pair:
                raise ValueError(f"bad overlap pair {sorted(l.name for l in pair)}")
        for umbrella, covered in self.umbrella_map.items():
            if umbrella not in known or not covered <= known:
                raise ValueError(f"umbrella map references unknown labels under {umbrella}")
            if umbrella == NO_FINDING or NO_FINDING in covered:
                raise ValueError("'No finding' cannot take part in the umbrella map")

    @classmethod
    def from_names(cls, overlap_pairs: Iterable[Iterable[str]] = (),
                   umbrella_map: Optional[Mapping[str, Iterable[str]]] = None) -> "Taxonomy":
        pairs = frozenset(frozenset(get_label(n) for n in pair) for pair in overlap_pairs)
        umbrella = {
            get_label(k): frozenset(get_label(n) for n in v)
            for k, v in (umbrella_map or {}).items()
        }
        return cls(overlap_pairs=pairs, umbrella_map=umbrella)

    def sorted_pairs(self) -> list[tuple[ClassLabel, ClassLabel]]:
        return sorted(tuple(sorted(p)) for p in self.overlap_pairs)


DEFAULT_OVERLAP_PAIRS = (("ILD", "Pulmonary fibrosis"), ("Consolidation", "Infiltration"))


def default_taxonomy() -> Taxonomy:
    return Taxonomy.from_names(DEFAULT_OVERLAP_PAIRS)


ANNOTATION_COLUMNS = ("image_id", "class_name", "class_id", "rad_id",
                      "x_min", "y_min", "x_max", "y_max")
COORD_COLUMNS = ("x_min", "y_min", "x_max", "y_max")


def _is_blank(value: str) -> bool:
    v = value.strip()
    return v == "" or v.lower() == "nan"


def _parse_class_id(value: str) -> Optional[int]:
    v = value.strip()
    try:
        return int(v)
    except ValueError:
        pass
    try:
        f = float(v)
    except ValueError:
        return None
    return int(f) if f.is_integer() else None


def parse_coords(row: Mapping[str, str], line: int) -> Optional[BBox]:
    raw = [row[c] for c in COORD_COLUMNS]
    if all(_is_blank(v) for v in raw):
        return None
    if any(_is_blank(v) for v in raw):
        raise InvalidBox(f"incomplete coordinates {raw}", line)
    try:
        coords = [float(v) for v in raw]
    except ValueError:
        raise MalformedRow(f"non-numeric coordinate in {raw}", line) from None
    try:
        return BBox(*coords)
    except InvalidBox as exc:
        raise InvalidBox(exc.detail, line) from None


def check_header(fieldnames, required: Iterable[str]) -> None:
    missing = [c for c in required if c not in (fieldnames or [])]
    if missing:
        raise MalformedRow(f"header is missing columns {missing}", 1)


def iter_rows(stream: TextIO, required: tuple[str, ...]):
    """Yield (line, row) pairs, rejecting rows whose field count is wrong."""
    reader = csv.DictReader(stream)
    check_header(reader.fieldnames, required)
    for row in reader:
        line = reader.line_num
        if None in row or any(v is None for v in row.values()):
            raise MalformedRow(f"expected {len(reader.fieldnames)} fields", line)
        yield line, row


def parse_annotation_csv(stream: TextIO) -> list[AnnotationRecord]:
    """Parse the annotation table strictly; the first bad row aborts."""
    records = []
    for line, row in iter_rows(stream, ANNOTATION_COLUMNS):
        image_id, rad_id = row["image_id"].strip(), row["rad_id"].strip()
        if not image_id or not rad_id:
            raise MalformedRow("image_id and rad_id must be non-empty", line)
        name = row["class_name"].strip()
        try:
            label = get_label(name)
        except UnknownLabel:
            raise UnknownClassName(f"{name!r} is not in the taxonomy", line) from None
        class_id = _parse_class_id(row["class_id"])
        if class_id is not None and class_id != label.id:
            raise ClassIdMismatch(f"{name!r} has id {label.id}, row says {class_id}", line)
        bbox = parse_coords(row, line)
        if label.is_lesion and bbox is None:
            raise InvalidBox(f"lesion {name!r} has no coordinates", line)
        if not label.is_lesion and bbox is not None:
            raise BoxOnNoFinding("'No finding' row carries coordinates", line)
        records.append(AnnotationRecord(image_id, rad_id, label, bbox))
    return records


def format_float(value: float) -> str:
    return repr(float(value))


def serialize_annotation_csv(records: Iterable[AnnotationRecord], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(ANNOTATION_COLUMNS)
    for r in records:
        coords = [format_float(c) for c in r.bbox.as_tuple()] if r.bbox else ["", "", "", ""]
        writer.writerow([r.image_id, r.label.name, r.label.id, r.rad_id, *coords])


def _box_key(item):
    label, bbox = item
    return (label.id, bbox.as_tuple())


def build_image_index(records: Iterable[AnnotationRecord]) -> ImageIndex:
    """Group records by image and annotator.

    Box lists are put in a canonical order so the index does not depend on
    row order.
    """
    labels = defaultdict(lambda: defaultdict(set))
    boxes = defaultdict(lambda: defaultdict(list))
    counts = defaultdict(lambda: defaultdict(int))
    for r in records:
        labels[r.image_id][r.rad_id].add(r.label)
        counts[r.image_id][r.rad_id] += 1
        if r.bbox is not None:
            boxes[r.image_id][r.rad_id].append((r.label, r.bbox))

    index: ImageIndex = {}
    for image_id in sorted(labels):
        rads = tuple(sorted(labels[image_id], key=rad_sort_key))
        for rad in rads:
            label_set = labels[image_id][rad]
            if NO_FINDING in label_set and len(label_set) > 1:
                others = sorted(l.name for l in label_set if l.is_lesion)
                raise MixedNoFinding(
                    f"{rad} gave image {image_id!r} both 'No finding' and {others}"
                )
        index[image_id] = ImageAnnotations(
            image_id=image_id,
            annotators=rads,
            label_sets={r: frozenset(labels[image_id][r]) for r in rads},
            boxes={r: tuple(sorted(boxes[image_id][r], key=_box_key)) for r in rads},
            record_counts={r: counts[image_id][r] for r in rads},
        )
    return index


def all_annotators(index: ImageIndex) -> list[str]:
    return sorted({r for ann in index.values() for r in ann.annotators}, key=rad_sort_key)


def load_index(path) -> ImageIndex:
    with open(path, newline="", encoding="utf-8") as fp:
        return build_image_index(parse_annotation_csv(fp))
