"""Per-class box heatmaps on a normalised grid and left/right symmetry scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Optional

import numpy as np

from .annotations import (
    NO_FINDING,
    BBox,
    ClassLabel,
    ImageIndex,
    get_label,
    slugify,
)
from .dicom_meta import DicomHeader

DEFAULT_GRID = (64, 64)
DEFAULT_ASYMMETRY_THRESHOLD = 0.25
DEFAULT_EXEMPT = ("Aortic enlargement", "Cardiomegaly")
WEIGHTINGS = ("binary", "area")


@dataclass(frozen=True)
class Heatmap:
    """``grid`` is indexed [row, column]: shape (H, W), row 0 at the image top."""

    label: ClassLabel
    grid: np.ndarray
    n_boxes: int
    grid_size: tuple[int, int]
    n_skipped_images: int = 0

    def mirrored(self) -> "Heatmap":
        return Heatmap(self.label, np.fliplr(self.grid).copy(), self.n_boxes, self.grid_size,
                       self.n_skipped_images)


def _cell_span(lo: Fraction, hi: Fraction, cells: int) -> tuple[int, int]:
    """Cells [first, last] overlapping the open interval (lo, hi) of the unit line."""
    first = max(0, math.floor(lo * cells))
    last = min(cells - 1, math.ceil(hi * cells) - 1)
    return first, last


def _deposit(grid: np.ndarray, box: BBox, rows: int, cols: int, weighting: str) -> bool:
    h, w = grid.shape
    # exact rationals keep cell edges stable under mirroring
    x0 = min(max(Fraction(box.x_min) / cols, Fraction(0)), Fraction(1))
    x1 = min(max(Fraction(box.x_max) / cols, Fraction(0)), Fraction(1))
    y0 = min(max(Fraction(box.y_min) / rows, Fraction(0)), Fraction(1))
    y1 = min(max(Fraction(box.y_max) / rows, Fraction(0)), Fraction(1))
    if x0 >= x1 or y0 >= y1:
        return False
    cx0, cx1 = _cell_span(x0, x1, w)
    cy0, cy1 = _cell_span(y0, y1, h)
    if weighting == "binary":
        grid[cy0:cy1 + 1, cx0:cx1 + 1] += 1
        return True
    for cy in range(cy0, cy1 + 1):
        oy = min(y1, Fraction(cy + 1, h)) - max(y0, Fraction(cy, h))
        for cx in range(cx0, cx1 + 1):
            ox = min(x1, Fraction(cx + 1, w)) - max(x0, Fraction(cx, w))
            grid[cy, cx] += float(ox * oy * w * h)
    return True


def accumulate_heatmap(index: ImageIndex, headers: Mapping[str, Optional[DicomHeader]],
                       label, grid_size: tuple[int, int] = DEFAULT_GRID,
                       weighting: str = "binary") -> Heatmap:
    """Rasterise every annotator's boxes of ``label`` onto a W x H grid.

    Boxes are scaled into the unit square by their image's columns and rows.
    With binary weighting a cell gains 1 per box overlapping it by positive
    area; with area weighting it gains the covered fraction of the cell.
    Images lacking dimensions are skipped and counted.
    """
    label = get_label(label)
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    w, h = grid_size
    grid = np.zeros((h, w), dtype=np.int64 if weighting == "binary" else float)
    n_boxes = skipped = 0
    for image_id in sorted(index):
        ann = index[image_id]
        boxes = [b for rad in ann.annotators for b in ann.boxes_of(rad, label)]
        if not boxes:
            continue
        header = headers.get(image_id)
        if header is None or header.rows is None or header.columns is None:
            skipped += 1
            continue
        for box in boxes:
            n_boxes += _deposit(grid, box, header.rows, header.columns, weighting)
    return Heatmap(label, grid, n_boxes, (w, h), skipped)


@dataclass(frozen=True)
class SymmetryScore:
    label: ClassLabel
    score: float
    exempt: bool


def symmetry_score(heatmap: Heatmap, exempt: Iterable = DEFAULT_EXEMPT) -> SymmetryScore:
    """sum |H - mirror(H)| / sum (H + mirror(H)); an empty map scores 0."""
    exempt_labels = {get_label(e) for e in exempt}
    g = heatmap.grid.astype(float)
    m = np.fliplr(g)
    den = float((g + m).sum())
    score = float(np.abs(g - m).sum()) / den if den > 0 else 0.0
    return SymmetryScore(heatmap.label, score, heatmap.label in exempt_labels)


def asymmetry_flags(scores: Iterable[SymmetryScore],
                    threshold: float = DEFAULT_ASYMMETRY_THRESHOLD,
                    exempt: Iterable = DEFAULT_EXEMPT) -> list[SymmetryScore]:
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    exempt_labels = {get_label(e) for e in exempt}
    return [s for s in scores
            if not s.exempt and s.label not in exempt_labels and s.label != NO_FINDING
            and s.score > threshold]


def render_heatmap(heatmap: Heatmap) -> bytes:
    """8-bit binary PGM; the largest count maps to 255."""
    h, w = heatmap.grid.shape
    peak = float(heatmap.grid.max()) if heatmap.grid.size else 0.0
    if peak > 0:
        pixels = np.rint(heatmap.grid.astype(float) * (255.0 / peak)).astype(np.uint8)
    else:
        pixels = np.zeros((h, w), dtype=np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def heatmap_filename(label: ClassLabel) -> str:
    return f"heatmap_{slugify(label.name)}.pgm"
