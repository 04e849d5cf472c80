from __future__ import annotations

import math
import random

import numpy as np
import pytest

from _builders import header, index_from
from cxraudit.annotations import get_label
from cxraudit.spatial import (
    Heatmap,
    SymmetryScore,
    accumulate_heatmap,
    asymmetry_flags,
    heatmap_filename,
    render_heatmap,
    symmetry_score,
)

PTX = get_label("Pneumothorax")


def hm(grid, label="Pneumothorax"):
    g = np.asarray(grid)
    return Heatmap(get_label(label), g, 1, (g.shape[1], g.shape[0]))


def test_half_plane_box():
    idx = index_from({"i": {"A": [("Pneumothorax", (0, 0, 50, 100))]}})
    h = accumulate_heatmap(idx, {"i": header("i")}, PTX, (4, 4))
    assert h.n_boxes == 1
    assert (h.grid[:, :2] == 1).all() and (h.grid[:, 2:] == 0).all()
    pgm = render_heatmap(h)
    assert pgm.startswith(b"P5\n4 4\n255\n")
    pixels = np.frombuffer(pgm[len(b"P5\n4 4\n255\n"):], dtype=np.uint8).reshape(4, 4)
    assert (pixels[:, :2] == 255).all() and (pixels[:, 2:] == 0).all()


def test_area_weighting_fraction():
    idx = index_from({"i": {"A": [("Pneumothorax", (0, 0, 25, 100))]}})
    h = accumulate_heatmap(idx, {"i": header("i")}, PTX, (2, 1), weighting="area")
    assert h.grid.tolist() == [[0.5, 0.0]]


def test_empty_label_and_missing_dims():
    idx = index_from({"i": {"A": [("ILD", (0, 0, 5, 5))]}, "j": {"A": [("Pneumothorax", (0, 0, 5, 5))]}})
    h = accumulate_heatmap(idx, {"i": header("i"), "j": header("j", rows=None)}, PTX, (8, 8))
    assert h.n_boxes == 0 and h.grid.sum() == 0 and h.n_skipped_images == 1
    assert render_heatmap(h)[-64:] == bytes(64)


def test_two_by_two_hand_example():
    assert symmetry_score(hm([[2, 1], [1, 1]])).score == 0.2


def test_mirror_and_one_sided_extremes():
    assert symmetry_score(hm([[1, 3, 3, 1], [0, 2, 2, 0]])).score == 0
    assert abs(symmetry_score(hm([[5, 0], [2, 0]])).score - 1) <= 1e-12
    assert symmetry_score(hm([[0, 0], [0, 0]])).score == 0


@pytest.mark.parametrize("seed", range(10))
def test_score_mirror_and_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    g = rng.integers(0, 9, size=(6, 7))
    s = symmetry_score(hm(g)).score
    assert symmetry_score(hm(np.fliplr(g))).score == pytest.approx(s, abs=1e-12)
    assert symmetry_score(hm(3 * g)).score == pytest.approx(s, abs=1e-12)
    assert 0 <= s <= 1


def test_mirrored_corpus_scores_zero():
    rng = random.Random(3)
    spec = {}
    heads = {}
    for i in range(30):
        w, h = rng.choice([(1000, 800), (2048, 2048), (999, 1001)])
        x0, y0 = rng.uniform(0, w / 2), rng.uniform(0, h - 50)
        x1, y1 = x0 + rng.uniform(1, w / 2 - 1), y0 + rng.uniform(1, 49)
        spec[f"i{i}"] = {"A": [("Pneumothorax", (x0, y0, x1, y1)),
                               ("Pneumothorax", (w - x1, y0, w - x0, y1))]}
        heads[f"i{i}"] = header(f"i{i}", rows=h, columns=w)
    idx = index_from(spec)
    for weighting in ("binary", "area"):
        h = accumulate_heatmap(idx, heads, PTX, (16, 9), weighting)
        assert symmetry_score(h).score <= 1e-12


def test_flags_respect_exemptions():
    scores = [SymmetryScore(get_label("Cardiomegaly"), 0.9, True),
              SymmetryScore(get_label("Aortic enlargement"), 1.0, True),
              SymmetryScore(PTX, 0.6, False),
              SymmetryScore(get_label("ILD"), 0.1, False)]
    assert [s.label for s in asymmetry_flags(scores, 0.25)] == [PTX]
    assert asymmetry_flags([SymmetryScore(PTX, 0.0, False)]) == []
    with pytest.raises(ValueError):
        asymmetry_flags(scores, 1.0)


def test_uniform_placement_within_binomial_bounds():
    """Boxes of fixed size dropped uniformly; each cell count vs its exact hit probability."""
    rng = random.Random(11)
    size, W, grid = 10, 100, 10
    n = 400
    spec, heads = {}, {}
    for i in range(n):
        x, y = rng.randint(0, W - size), rng.randint(0, W - size)
        spec[f"i{i:03d}"] = {"A": [("ILD", (x, y, x + size, y + size))]}
        heads[f"i{i:03d}"] = header(f"i{i:03d}", rows=W, columns=W)
    h = accumulate_heatmap(index_from(spec), heads, get_label("ILD"), (grid, grid))

    def p_axis(cell):
        # integer offsets 0..90; a box [x, x+10) overlaps cell [10c, 10c+10) by positive length
        hits = sum(1 for x in range(W - size + 1) if x < 10 * cell + 10 and x + size > 10 * cell)
        return hits / (W - size + 1)

    for r in range(grid):
        for c in range(grid):
            p = p_axis(r) * p_axis(c)
            mean, sd = n * p, math.sqrt(n * p * (1 - p))
            assert abs(h.grid[r, c] - mean) <= 5 * sd + 1e-9


def test_filename():
    assert heatmap_filename(get_label("Nodule/Mass")) == "heatmap_nodule-mass.pgm"
