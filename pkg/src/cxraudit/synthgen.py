"""Deterministic synthetic corpora with a manifest of planted statistics.

Every planted quantity uses exact counts (floor of rate * n, remainders
apportioned by largest remainder) so audits can be compared to the manifest
with equality. The manifest's expected values come from the generator's own
bookkeeping, never from the audit code.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .annotations import (
    LABELS_BY_NAME,
    LESION_LABELS,
    NO_FINDING,
    AnnotationRecord,
    BBox,
    get_label,
    rad_sort_key,
    serialize_annotation_csv,
)
from .detection_eval import Prediction, serialize_prediction_csv
from .dicom_meta import (
    BITS_ALLOCATED,
    COLUMNS,
    NUMBER_OF_FRAMES,
    PATIENT_AGE,
    PATIENT_SEX,
    PHOTOMETRIC,
    PIXEL_DATA,
    ROWS,
    TRANSFER_SYNTAX,
    TransferSyntax,
    LONG_VRS,
)

PLACEMENTS = ("symmetric", "left-only", "right-only", "uniform")
CORRUPTIONS = ("truncate", "missing_magic", "pixel")
SYNTAX_KEYS = {"explicit": TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN,
               "implicit": TransferSyntax.IMPLICIT_VR_LITTLE_ENDIAN}
PHOTOMETRIC_ABSENT = "missing"

PATIENT_ID = (0x0010, 0x0020)
PROCEDURE_CODE_SEQUENCE = (0x0008, 0x1032)

CROSS_PARTNER = {
    "ILD": "Pulmonary fibrosis",
    "Pulmonary fibrosis": "ILD",
    "Consolidation": "Infiltration",
    "Infiltration": "Consolidation",
    "Lung Opacity": "Consolidation",
}
DEFAULT_CROSS_PARTNER = "Lung Opacity"

_OUT_OF_RANGE_AGES = ("000Y", "238", "120Y", "005D", "011M", "100Y")
_MALFORMED_AGES = ("abc", "4O5Y", "Y045", "45 years", "-12")
_MISSING_SEX = (None, "", "U", "m")


class OutputNotWritable(OSError):
    pass


class InfeasibleSpec(ValueError):
    pass


@dataclass
class CorpusSpec:
    seed: int = 0
    n_images: int = 100
    missing_age_rate: float = 0.0
    malformed_age_share: float = 0.25
    out_of_range_age_rate: float = 0.0
    pediatric_rate: float = 0.0
    young_share: float = 0.5
    finding_age_means: Optional[list] = None
    age_split: int = 50
    missing_sex_rate: float = 0.0
    sex_o_rate: float = 0.0
    male_share: float = 0.5
    photometric_mix: dict = field(default_factory=lambda: {"MONOCHROME2": 1.0})
    syntax_mix: dict = field(default_factory=lambda: {"explicit": 0.5, "implicit": 0.5})
    dims: list = field(default_factory=lambda: [[2048, 2048], [2500, 2000], [3000, 2500]])
    missing_dims_rate: float = 0.0
    annotators: list = field(default_factory=lambda: ["R1", "R2", "R3"])
    annotators_per_image: int = 3
    finding_rate: float = 0.4
    classes: Optional[list] = None
    placements: dict = field(default_factory=dict)
    default_placement: str = "symmetric"
    miss_rates: dict = field(default_factory=dict)
    cross_label_rate: float = 0.0
    granularity_rate: float = 0.0
    predictions: str = "perfect"
    parity_targets: list = field(default_factory=list)
    corruptions: list = field(default_factory=list)

    def __post_init__(self):
        rates = ("missing_age_rate", "malformed_age_share", "out_of_range_age_rate",
                 "pediatric_rate", "young_share", "missing_sex_rate", "sex_o_rate",
                 "male_share", "missing_dims_rate", "finding_rate", "cross_label_rate",
                 "granularity_rate")
        for name in rates:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name, mix in (("photometric_mix", self.photometric_mix), ("syntax_mix", self.syntax_mix)):
            if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ValueError(f"{name} must hold nonnegative fractions summing to 1")
        if set(self.syntax_mix) - set(SYNTAX_KEYS):
            raise ValueError(f"syntax_mix keys must be among {sorted(SYNTAX_KEYS)}")
        if self.missing_age_rate + self.out_of_range_age_rate + self.pediatric_rate > 1 + 1e-9:
            raise ValueError("age category rates exceed 1")
        if self.missing_sex_rate + self.sex_o_rate > 1 + 1e-9:
            raise ValueError("sex category rates exceed 1")
        if self.cross_label_rate + self.granularity_rate > 1 + 1e-9:
            raise ValueError("cross_label_rate + granularity_rate exceeds 1")
        if not 1 <= self.annotators_per_image <= len(self.annotators):
            raise ValueError("annotators_per_image must be between 1 and len(annotators)")
        for rad, rate in self.miss_rates.items():
            if rad not in self.annotators or not 0 <= rate <= 1:
                raise ValueError(f"bad miss rate for {rad!r}")
        for name in list(self.placements) + list(self.classes or []):
            label = get_label(name)
            if not label.is_lesion:
                raise ValueError("'No finding' cannot be planted as a lesion")
        for p in list(self.placements.values()) + [self.default_placement]:
            if p not in PLACEMENTS:
                raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.predictions not in ("perfect", "none"):
            raise ValueError("predictions must be 'perfect' or 'none'")
        for c in self.corruptions:
            if c.get("kind") not in CORRUPTIONS or int(c.get("count", 0)) < 0:
                raise ValueError(f"bad corruption entry {c}")
        for r, c in self.dims:
            if r < 256 or c < 256:
                raise ValueError("image dimensions must be at least 256 pixels")

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown corpus spec keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _count(rate: float, n: int) -> int:
    return int(math.floor(rate * n + 1e-9))


def _apportion(n: int, weights: dict) -> dict:
    """Largest-remainder split of n items over weighted categories."""
    total = sum(weights.values())
    if n == 0 or total == 0:
        return {k: 0 for k in weights}
    raw = {k: n * w / total for k, w in weights.items()}
    counts = {k: int(math.floor(v + 1e-9)) for k, v in raw.items()}
    keys = list(weights)
    leftover = n - sum(counts.values())
    for k in sorted(keys, key=lambda k: (-(raw[k] - counts[k]), keys.index(k)))[:leftover]:
        counts[k] += 1
    return counts


def _assign(rng: np.random.Generator, ids: list, counts: dict) -> dict:
    """Randomly deal ``ids`` into categories of exactly the given sizes."""
    assert sum(counts.values()) == len(ids)
    order = [ids[i] for i in rng.permutation(len(ids))]
    out, pos = {}, 0
    for cat, k in counts.items():
        for i in order[pos:pos + k]:
            out[i] = cat
        pos += k
    return out


# ---------------------------------------------------------------- DICOM writing

def _pad(value: bytes, pad: bytes = b" ") -> bytes:
    return value + pad if len(value) % 2 else value


def _encode_element(tag, vr: str, value: bytes, explicit: bool, undefined: bool = False) -> bytes:
    head = struct.pack("<HH", *tag)
    length = 0xFFFFFFFF if undefined else len(value)
    if explicit:
        vrb = vr.encode("ascii")
        if vrb in LONG_VRS:
            return head + vrb + b"\x00\x00" + struct.pack("<I", length) + value
        return head + vrb + struct.pack("<H", length) + value
    return head + struct.pack("<I", length) + value


def _str_value(text: str, vr: str) -> bytes:
    return _pad(text.encode("latin-1"), b"\x00" if vr == "UI" else b" ")


@dataclass(frozen=True)
class DicomFields:
    patient_id: str
    syntax: TransferSyntax
    patient_sex: Optional[str] = None
    patient_age: Optional[str] = None
    photometric: Optional[str] = None
    rows: Optional[int] = None
    columns: Optional[int] = None
    bits_allocated: Optional[int] = 16
    number_of_frames: Optional[int] = None
    instance_uid: str = "2.25.1"


def write_dicom(f: DicomFields) -> tuple[bytes, dict]:
    """Encode a minimal Part-10 file; returns (bytes, element start offsets by tag)."""
    explicit = f.syntax.explicit
    meta_elems = [
        ((0x0002, 0x0001), "OB", b"\x00\x01"),
        ((0x0002, 0x0002), "UI", _str_value("1.2.840.10008.5.1.4.1.1.1.1", "UI")),
        ((0x0002, 0x0003), "UI", _str_value(f.instance_uid, "UI")),
        (TRANSFER_SYNTAX, "UI", _str_value(f.syntax.uid, "UI")),
        ((0x0002, 0x0012), "UI", _str_value("2.25.271828", "UI")),
    ]
    meta_body = b"".join(_encode_element(t, vr, v, True) for t, vr, v in meta_elems)
    meta = _encode_element((0x0002, 0x0000), "UL", struct.pack("<I", len(meta_body)), True) + meta_body

    item_body = (_encode_element((0x0008, 0x0100), "SH", _str_value("CXR", "SH"), explicit)
                 + _encode_element((0x0008, 0x0104), "LO", _str_value("Chest X-ray PA", "LO"), explicit))
    item = struct.pack("<HHI", 0xFFFE, 0xE000, 0xFFFFFFFF) + item_body + struct.pack("<HHI", 0xFFFE, 0xE00D, 0)
    sequence = item + struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)

    us = lambda v: struct.pack("<H", v)  # noqa: E731
    elems = [
        ((0x0008, 0x0016), "UI", _str_value("1.2.840.10008.5.1.4.1.1.1.1", "UI"), False),
        ((0x0008, 0x0018), "UI", _str_value(f.instance_uid, "UI"), False),
        ((0x0008, 0x0060), "CS", _str_value("DX", "CS"), False),
        (PROCEDURE_CODE_SEQUENCE, "SQ", sequence, True),
        (PATIENT_ID, "LO", _str_value(f.patient_id, "LO"), False),
    ]
    if f.patient_sex is not None:
        elems.append((PATIENT_SEX, "CS", _str_value(f.patient_sex, "CS"), False))
    if f.patient_age is not None:
        elems.append((PATIENT_AGE, "AS", _str_value(f.patient_age, "AS"), False))
    elems.append(((0x0028, 0x0002), "US", us(1), False))
    if f.photometric is not None:
        elems.append((PHOTOMETRIC, "CS", _str_value(f.photometric, "CS"), False))
    if f.number_of_frames is not None:
        elems.append((NUMBER_OF_FRAMES, "IS", _str_value(str(f.number_of_frames), "IS"), False))
    if f.rows is not None:
        elems.append((ROWS, "US", us(f.rows), False))
    if f.columns is not None:
        elems.append((COLUMNS, "US", us(f.columns), False))
    if f.bits_allocated is not None:
        elems.append((BITS_ALLOCATED, "US", us(f.bits_allocated), False))
    elems.append(((0x0028, 0x0101), "US", us(12), False))
    elems.append((PIXEL_DATA, "OW", b"\x00\x10\x20\x30\x40\x50\x60\x70", False))

    out = bytearray(b"\x00" * 128 + b"DICM" + meta)
    offsets = {}
    for tag, vr, value, undefined in elems:
        offsets[tag] = len(out)
        out += _encode_element(tag, vr, value, explicit, undefined)
    return bytes(out), offsets


def corrupt(data: bytes, offsets: dict, kind: str) -> tuple[bytes, Optional[int]]:
    """Apply an injection; returns new bytes and the expected error offset."""
    if kind == "missing_magic":
        return data[:128] + b"DICX" + data[132:], 128
    if kind == "truncate":
        start = offsets[PATIENT_ID]
        # keep the element header and one value byte
        return data[:start + 9], start
    if kind == "pixel":
        cut = offsets[PIXEL_DATA] + 4
        return data[:cut] + b"\xff" * (len(data) - cut), None
    raise ValueError(f"unknown corruption {kind!r}")


# ---------------------------------------------------------------- planting

def _box(t) -> BBox:
    return BBox(*(float(v) for v in t))


def _object_geometry(rng, placement: str, rows: int, cols: int) -> dict:
    if placement == "uniform":
        bw, bh = cols // 8, rows // 8
        x0 = int(rng.integers(0, cols - bw + 1))
        y0 = int(rng.integers(0, rows - bh + 1))
        normal = [(x0, y0, x0 + bw, y0 + bh)]
    else:
        bw = int(rng.integers(int(0.10 * cols), int(0.20 * cols) + 1))
        x0 = int(rng.integers(int(0.05 * cols), int(0.25 * cols) + 1))
        bh = int(rng.integers(int(0.10 * rows), int(0.25 * rows) + 1))
        y0 = int(rng.integers(int(0.15 * rows), int(0.55 * rows) + 1))
        left = (x0, y0, x0 + bw, y0 + bh)
        right = (cols - x0 - bw, y0, cols - x0, y0 + bh)
        normal = {"left-only": [left], "right-only": [right], "symmetric": [left, right]}[placement]
    if len(normal) == 2:
        (lx0, ly0, _, ly1), (_, _, rx1, _) = normal
        coarse = (lx0, ly0, rx1, ly1)
        fine = normal
    else:
        x0, y0, x1, y1 = normal[0]
        mid = (y0 + y1) // 2
        gap = max(1, (y1 - y0) // 10)
        coarse = normal[0]
        fine = [(x0, y0, x1, mid - gap), (x0, mid + gap, x1, y1)]
    return {"normal": normal, "coarse": [coarse], "fine": fine}


def _age_raw(category: str, k: int, years: Optional[int]) -> Optional[str]:
    if category == "missing":
        return None if k % 2 == 0 else ""
    if category == "malformed":
        return _MALFORMED_AGES[k % len(_MALFORMED_AGES)]
    if category == "out_of_range":
        return _OUT_OF_RANGE_AGES[k % len(_OUT_OF_RANGE_AGES)]
    if category == "pediatric" and k % 3 == 0:
        return f"{years * 12:03d}M"
    if k % 5 == 4:
        return str(years)
    return f"{years:03d}Y"


def _age_bin(years: Optional[int], split: int) -> str:
    if years is None:
        return "missing"
    return "young" if years < split else "old"


_SEX_OF_RAW = {"M": "Male", "F": "Female", "O": "Other"}


def _plan(spec: CorpusSpec) -> dict:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_images
    ids = [f"img{i:05d}" for i in range(n)]
    img = {i: {"image_id": i} for i in ids}

    # sex
    n_missing_sex = _count(spec.missing_sex_rate, n)
    n_other = _count(spec.sex_o_rate, n)
    mf = _apportion(n - n_missing_sex - n_other, {"M": spec.male_share, "F": 1 - spec.male_share})
    sex_of = _assign(rng, ids, {"missing": n_missing_sex, "O": n_other, **mf})
    k_missing = 0
    for i in ids:
        if sex_of[i] == "missing":
            raw = _MISSING_SEX[k_missing % len(_MISSING_SEX)]
            k_missing += 1
            img[i].update(sex_raw=raw, sex="Missing")
        else:
            img[i].update(sex_raw=sex_of[i], sex=_SEX_OF_RAW[sex_of[i]])

    # age categories
    n_missing_age = _count(spec.missing_age_rate, n)
    n_malformed = _count(spec.malformed_age_share, n_missing_age)
    n_oor = _count(spec.out_of_range_age_rate, n)
    n_ped = _count(spec.pediatric_rate, n)
    n_adult = n - n_missing_age - n_oor - n_ped
    adult = _apportion(n_adult, {"young": spec.young_share, "old": 1 - spec.young_share})
    if spec.finding_age_means is not None:
        adult = {"adult": n_adult}
    age_cat = _assign(rng, ids, {"missing": n_missing_age - n_malformed, "malformed": n_malformed,
                                 "out_of_range": n_oor, "pediatric": n_ped, **adult})
    for i in ids:
        cat = age_cat[i]
        years = None
        if cat == "pediatric":
            years = int(rng.integers(1, 18))
        elif cat == "young":
            years = int(rng.integers(18, spec.age_split))
        elif cat == "old":
            years = int(rng.integers(spec.age_split, 96))
        img[i].update(age_category=cat, age_years=years)

    # photometric, syntax, dims
    photo = _assign(rng, ids, _apportion(n, spec.photometric_mix))
    syntax = _assign(rng, ids, _apportion(n, spec.syntax_mix))
    n_no_dims = _count(spec.missing_dims_rate, n)
    dims_missing = _assign(rng, ids, {True: n_no_dims, False: n - n_no_dims})
    for i in ids:
        r, c = spec.dims[int(rng.integers(0, len(spec.dims)))]
        img[i].update(
            photometric=None if photo[i] == PHOTOMETRIC_ABSENT else photo[i],
            syntax=syntax[i],
            geometry_dims=[r, c],
            rows=None if dims_missing[i] else r,
            columns=None if dims_missing[i] else c,
        )

    # image-level findings, stratified so prevalence is even across subgroups
    def stratum(i):
        if spec.finding_age_means is not None:
            return (img[i]["sex"],)
        return (_age_bin(img[i]["age_years"], spec.age_split), img[i]["sex"])

    strata = defaultdict(list)
    for i in ids:
        strata[stratum(i)].append(i)
    classes = [get_label(c) for c in (spec.classes or [l.name for l in LESION_LABELS])]
    finding = {}
    cursor = 0
    for key in sorted(strata):
        members = strata[key]
        k = _count(spec.finding_rate, len(members))
        chosen = _assign(rng, members, {True: k, False: len(members) - k})
        for i in members:
            finding[i] = chosen[i]
        for i in [m for m in members if chosen[m]]:
            img[i]["label"] = classes[cursor % len(classes)].name
            cursor += 1

    if spec.finding_age_means is not None:
        mean_f, mean_nf = spec.finding_age_means
        for i in ids:
            if img[i]["age_category"] == "adult":
                mean = mean_f if finding[i] else mean_nf
                years = int(np.clip(np.rint(rng.normal(mean, 12.0)), 18, 99))
                img[i]["age_years"] = years

    for k, i in enumerate(ids):
        d = img[i]
        cat = d["age_category"]
        raw_cat = cat if cat in ("missing", "malformed", "out_of_range") else (
            "pediatric" if cat == "pediatric" else "adult")
        d["age_raw"] = _age_raw(raw_cat, k, d["age_years"])
        d["finding"] = finding[i]

    # annotators and objects
    for i in ids:
        pick = rng.choice(len(spec.annotators), size=spec.annotators_per_image, replace=False)
        drawn = [spec.annotators[int(p)] for p in pick]
        img[i]["reference_rad"] = drawn[0]
        img[i]["annotators"] = sorted(drawn, key=rad_sort_key)
        img[i]["events"] = {}
        if finding[i]:
            label = img[i]["label"]
            placement = spec.placements.get(label, spec.default_placement)
            r, c = img[i]["geometry_dims"]
            img[i]["placement"] = placement
            img[i]["geometry"] = _object_geometry(rng, placement, r, c)

    finding_ids = [i for i in ids if finding[i]]

    def non_ref(i):
        return [r for r in img[i]["annotators"] if r != img[i]["reference_rad"]]

    for rad in sorted(spec.miss_rates, key=rad_sort_key):
        eligible = [i for i in finding_ids if rad in non_ref(i)]
        k = _count(spec.miss_rates[rad], len(eligible))
        for i in [eligible[j] for j in rng.permutation(len(eligible))[:k]]:
            img[i]["events"][rad] = "miss"

    def free(i):
        return [r for r in non_ref(i) if r not in img[i]["events"]]

    used = set()
    for kind, rate in (("cross", spec.cross_label_rate), ("coarse", spec.granularity_rate)):
        k = _count(rate, len(finding_ids))
        eligible = [i for i in finding_ids if free(i) and i not in used]
        if k > len(eligible):
            raise InfeasibleSpec(f"cannot plant {k} {kind} events on {len(eligible)} eligible images")
        for i in [eligible[j] for j in rng.permutation(len(eligible))[:k]]:
            options = free(i)
            rad = options[int(rng.integers(0, len(options)))]
            img[i]["events"][rad] = kind
            used.add(i)

    # realised annotations: per rad a list of (label name, boxes)
    for i in ids:
        d = img[i]
        ann = {}
        for rad in d["annotators"]:
            if not d["finding"] or d["events"].get(rad) == "miss":
                ann[rad] = (NO_FINDING.name, [])
                continue
            geom = d["geometry"]
            event = d["events"].get(rad)
            has_coarse = "coarse" in d["events"].values()
            if event == "cross":
                ann[rad] = (CROSS_PARTNER.get(d["label"], DEFAULT_CROSS_PARTNER), geom["normal"])
            elif event == "coarse":
                ann[rad] = (d["label"], geom["coarse"])
            elif has_coarse:
                ann[rad] = (d["label"], geom["fine"])
            else:
                ann[rad] = (d["label"], geom["normal"])
        d["annotations"] = ann

    # corruptions
    corrupt_of = {}
    pool = [ids[j] for j in rng.permutation(n)] if n else []
    for entry in spec.corruptions:
        for _ in range(int(entry["count"])):
            if not pool:
                raise InfeasibleSpec("more corruptions than images")
            corrupt_of[pool.pop()] = entry["kind"]
    for i in ids:
        img[i]["corruption"] = corrupt_of.get(i)

    return img


def _unreadable(d: dict) -> bool:
    return d["corruption"] in ("truncate", "missing_magic")


def _effective_groups(d: dict, split: int) -> dict:
    if _unreadable(d):
        return {"age": "missing", "sex": "Missing"}
    years = d["age_years"] if d["age_category"] in ("pediatric", "young", "old", "adult") else None
    return {"age": _age_bin(years, split), "sex": d["sex"]}


def _plan_predictions(spec: CorpusSpec, img: dict):
    """Predictions plus expected confusion counts for parity targets."""
    rng = np.random.default_rng([spec.seed, 1])
    ids = sorted(img)
    actual = {i: {lab for lab, boxes in img[i]["annotations"].values() if boxes} for i in ids}
    overrides = {}
    expected = {}
    for target in spec.parity_targets:
        label = get_label(target["class"]).name
        feature = target.get("feature", "age")
        ppv = target["ppv"]
        groups = defaultdict(list)
        for i in ids:
            groups[_effective_groups(img[i], spec.age_split)[feature]].append(i)
        cells = {}
        for g in sorted(groups):
            pos = [i for i in groups[g] if label in actual[i]]
            neg = [i for i in groups[g] if label not in actual[i]]
            if g in ppv:
                frac = Fraction(ppv[g]).limit_denominator(1000)
                p, q = frac.numerator, frac.denominator
                limits = [len(pos) // p if p else math.inf, len(neg) // (q - p) if q - p else math.inf]
                m = min(limits)
                if m == 0 or m == math.inf:
                    raise InfeasibleSpec(f"cannot plant ppv {frac} for {label}/{g}: "
                                         f"{len(pos)} positives, {len(neg)} negatives")
                tp, fp = p * m, (q - p) * m
            else:
                tp, fp = len(pos), 0
            tp_ids = [pos[j] for j in rng.permutation(len(pos))[:tp]]
            fp_ids = [neg[j] for j in rng.permutation(len(neg))[:fp]]
            for i in pos:
                overrides[(i, label)] = "tp" if i in tp_ids else "fn"
            for i in fp_ids:
                overrides[(i, label)] = "fp"
            cells[g] = {"tp": tp, "fp": fp, "fn": len(pos) - tp, "tn": len(neg) - fp}
        expected.setdefault(label, {})[feature] = cells

    preds = []
    if spec.predictions == "none":
        return preds, expected
    for i in ids:
        d = img[i]
        pooled = defaultdict(list)
        for rad in d["annotators"]:
            lab, boxes = d["annotations"][rad]
            pooled[lab].extend(boxes)
        r, c = d["geometry_dims"]
        for lab in sorted(set(pooled) | {l for (j, l) in overrides if j == i},
                          key=lambda name: LABELS_BY_NAME[name].id):
            if lab == NO_FINDING.name:
                continue
            mode = overrides.get((i, lab))
            label = get_label(lab)
            if mode is None and pooled.get(lab):
                preds += [Prediction(i, label, 1.0, _box(b)) for b in pooled[lab]]
            elif mode == "tp":
                preds += [Prediction(i, label, 0.95, _box(b)) for b in pooled[lab]]
            elif mode == "fp":
                fake = (c // 20, r // 20, 3 * c // 20, 3 * r // 20)
                preds.append(Prediction(i, label, 0.9, _box(fake)))
    return preds, expected


def _manifest(spec: CorpusSpec, img: dict, error_offsets: dict, expected_parity: dict) -> dict:
    ids = sorted(img)
    split = spec.age_split
    age_counts = {"Valid": 0, "OutOfRange": 0, "Malformed": 0, "Missing": 0}
    sex_counts = {"Male": 0, "Female": 0, "Other": 0, "Missing": 0}
    photo_counts = defaultdict(int)
    children, out_of_range = [], []
    workload = {}
    no_finding = defaultdict(list)
    box_counts = defaultdict(int)
    cooc = defaultdict(int)
    conflicts = []
    images = {}
    for i in ids:
        d = img[i]
        cat = d["age_category"]
        if _unreadable(d):
            age_counts["Missing"] += 1
            sex_counts["Missing"] += 1
            photo_counts[PHOTOMETRIC_ABSENT] += 1
        else:
            validity = {"missing": "Missing", "malformed": "Malformed",
                        "out_of_range": "OutOfRange"}.get(cat, "Valid")
            age_counts[validity] += 1
            if cat == "pediatric":
                children.append(i)
            if cat == "out_of_range":
                raw = d["age_raw"]
                years = int(raw[:-1]) // {"D": 365, "W": 52, "M": 12, "Y": 1}[raw[-1]] \
                    if raw[-1].isalpha() else int(raw)
                out_of_range.append([i, years])
            sex_counts[d["sex"]] += 1
            photo_counts[d["photometric"] or PHOTOMETRIC_ABSENT] += 1
        groups = _effective_groups(d, split)

        for rad in d["annotators"]:
            lab, boxes = d["annotations"][rad]
            w = workload.setdefault(rad, {
                "total": 0, "finding": 0, "no_finding": 0,
                "by_sex": {"Male": 0, "Female": 0, "Other": 0, "Missing": 0},
                "by_age": {"missing": 0, "young": 0, "old": 0}})
            w["total"] += 1
            w["finding" if boxes else "no_finding"] += 1
            w["by_sex"][groups["sex"]] += 1
            w["by_age"][groups["age"]] += 1
            if not boxes:
                no_finding[rad].append(i)
            box_counts[lab] += len(boxes)

        events = d["events"]
        for rad, kind in sorted(events.items()):
            if kind == "cross":
                partner = d["annotations"][rad][0]
                same = [r for r in d["annotators"] if d["annotations"][r][0] == d["label"]]
                pair = "|".join(sorted([d["label"], partner], key=lambda n: LABELS_BY_NAME[n].id))
                cooc[pair] += len(same) * len(d["geometry"]["normal"])
            elif kind == "coarse":
                for fine in d["annotators"]:
                    lab, boxes = d["annotations"][fine]
                    if fine != rad and lab == d["label"] and len(boxes) >= 2:
                        conflicts.append([i, d["label"], rad, fine])

        images[i] = {
            "syntax": d["syntax"], "sex_raw": d["sex_raw"], "sex": d["sex"],
            "age_raw": d["age_raw"], "age_category": cat, "age_years": d["age_years"],
            "photometric": d["photometric"], "rows": d["rows"], "columns": d["columns"],
            "finding": d["finding"], "label": d.get("label"), "placement": d.get("placement"),
            "annotators": d["annotators"], "reference_rad": d["reference_rad"],
            "events": dict(sorted(events.items())),
            "labels": {r: [d["annotations"][r][0]] for r in d["annotators"]},
            "box_counts": {r: len(d["annotations"][r][1]) for r in d["annotators"]},
            "groups": groups, "corruption": d["corruption"],
        }

    placements = {l.name: spec.placements.get(l.name, spec.default_placement) for l in LESION_LABELS}
    detection_perfect = spec.predictions == "perfect" and not spec.parity_targets
    return {
        "spec": spec.to_dict(),
        "images": images,
        "metadata": {
            "n_images": len(ids),
            "age": age_counts,
            "sex": sex_counts,
            "photometric": dict(sorted(photo_counts.items())),
            "children": children,
            "out_of_range": out_of_range,
            "parse_errors": sum(_unreadable(img[i]) for i in ids),
        },
        "workload": {r: workload[r] for r in sorted(workload, key=rad_sort_key)},
        "no_finding": {r: no_finding[r] for r in sorted(no_finding, key=rad_sort_key)},
        "cooccurrence": dict(sorted(cooc.items())),
        "granularity": sorted(conflicts),
        "spatial": {name: {"placement": placements[name], "n_boxes": box_counts.get(name, 0)}
                    for name in placements},
        "detection": {"n_gt": {l.name: box_counts.get(l.name, 0) for l in LESION_LABELS},
                      "expected_map": 1.0 if detection_perfect and any(box_counts.values()) else None},
        "fairness": expected_parity,
        "errors": [{"image_id": i, "kind": img[i]["corruption"], "offset": error_offsets[i]}
                   for i in ids if _unreadable(img[i])],
    }


def generate_corpus(spec: CorpusSpec, out) -> dict:
    """Write ``dicom/``, ``annotations.csv``, ``predictions.csv`` and ``manifest.json``."""
    out = Path(out)
    img = _plan(spec)
    preds, expected_parity = _plan_predictions(spec, img)

    files = {}
    error_offsets = {}
    for k, i in enumerate(sorted(img)):
        d = img[i]
        data, offsets = write_dicom(DicomFields(
            patient_id=f"P{spec.seed}-{k:05d}",
            syntax=SYNTAX_KEYS[d["syntax"]],
            patient_sex=d["sex_raw"],
            patient_age=d["age_raw"],
            photometric=d["photometric"],
            rows=d["rows"],
            columns=d["columns"],
            instance_uid=f"2.25.{(spec.seed + 1) * 1000000 + k}",
        ))
        if d["corruption"]:
            data, error_offsets[i] = corrupt(data, offsets, d["corruption"])
        files[i] = data

    records = []
    for i in sorted(img):
        d = img[i]
        for rad in d["annotators"]:
            lab, boxes = d["annotations"][rad]
            label = get_label(lab)
            if not boxes:
                records.append(AnnotationRecord(i, rad, label, None))
            for b in boxes:
                records.append(AnnotationRecord(i, rad, label, _box(b)))

    manifest = _manifest(spec, img, error_offsets, expected_parity)
    try:
        (out / "dicom").mkdir(parents=True, exist_ok=True)
        for i, data in files.items():
            (out / "dicom" / f"{i}.dicom").write_bytes(data)
        with open(out / "annotations.csv", "w", newline="", encoding="utf-8") as fp:
            serialize_annotation_csv(records, fp)
        with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fp:
            serialize_prediction_csv(preds, fp)
        with open(out / "manifest.json", "w", encoding="utf-8") as fp:
            json.dump(manifest, fp, indent=2, sort_keys=True)
            fp.write("\n")
    except OSError as exc:
        raise OutputNotWritable(f"cannot write corpus under {out}: {exc}") from exc
    return manifest


def preset(name: str, seed: int = 0, n_images: Optional[int] = None) -> CorpusSpec:
    """Ready-made corpora used by the CLI and the acceptance suite.

    ``clean``: nothing for the audit to flag. ``metadata``: header defects at
    realistic rates. ``parity``: a young/old precision gap for aortic
    enlargement. ``noisy``: annotator disagreement and box-granularity
    conflicts on top of the metadata defects.
    """
    if name == "clean":
        spec = CorpusSpec(seed=seed, n_images=n_images or 240, finding_rate=0.5,
                          photometric_mix={"MONOCHROME2": 1.0})
    elif name == "metadata":
        spec = CorpusSpec(seed=seed, n_images=n_images or 1000, missing_age_rate=0.68,
                          out_of_range_age_rate=0.07, pediatric_rate=0.01,
                          missing_sex_rate=0.17, sex_o_rate=0.34, male_share=26 / 49,
                          photometric_mix={"MONOCHROME1": 0.17, "MONOCHROME2": 0.83})
    elif name == "parity":
        spec = CorpusSpec(seed=seed, n_images=n_images or 600, finding_rate=0.5,
                          classes=["Aortic enlargement"],
                          parity_targets=[{"class": "Aortic enlargement", "feature": "age",
                                           "ppv": {"young": 0.13, "old": 0.74}}])
    elif name == "noisy":
        spec = CorpusSpec(seed=seed, n_images=n_images or 400, missing_age_rate=0.68,
                          out_of_range_age_rate=0.07, pediatric_rate=0.01,
                          missing_sex_rate=0.17, sex_o_rate=0.34, male_share=26 / 49,
                          photometric_mix={"MONOCHROME1": 0.17, "MONOCHROME2": 0.83},
                          annotators=[f"R{k}" for k in range(1, 7)],
                          miss_rates={"R1": 0.9, "R2": 0.9},
                          cross_label_rate=0.3, granularity_rate=0.2,
                          placements={"Pneumothorax": "left-only"},
                          corruptions=[{"kind": "truncate", "count": 2},
                                       {"kind": "missing_magic", "count": 1},
                                       {"kind": "pixel", "count": 3}])
    else:
        raise ValueError(f"unknown preset {name!r}")
    return spec


PRESETS = ("clean", "metadata", "parity", "noisy")


def load_manifest(path) -> dict:
    with open(os.fspath(path), encoding="utf-8") as fp:
        return json.load(fp)
