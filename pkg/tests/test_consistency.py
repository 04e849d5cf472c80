from __future__ import annotations

import io
import random
from fractions import Fraction
from itertools import combinations

import pytest

from _builders import header, index_from
from cxraudit.annotations import default_taxonomy, get_label
from cxraudit.consistency import (
    UnknownRadInGroups,
    agreement_rates,
    class_cooccurrence,
    containment,
    granularity_conflicts,
    sample_no_finding_review,
    tally_review,
    workload_summary,
)
from cxraudit.annotations import NO_FINDING, BBox
from cxraudit.detection_eval import iou

BOX = (0, 0, 10, 10)


def sets_index(table: dict):
    """{image: {rad: [class names]}} with generic boxes."""
    spec = {}
    for image_id, rads in table.items():
        spec[image_id] = {
            r: [(n, (k, k, k + 5, k + 5)) for k, n in enumerate(names)] for r, names in rads.items()
        }
    return index_from(spec)


def brute_force_agreement(index):
    """Enumerate every ordered annotator pair per image."""
    out = {}
    for ann in index.values():
        for a in ann.annotators:
            row = out.setdefault(a, [0, 0, 0])
            row[0] += 1
            matches = [ann.label_sets[a] == ann.label_sets[b] for b in ann.annotators if b != a]
            row[1] += 1 if not matches else int(any(matches))
            row[2] += int(all(matches))
    return {r: (Fraction(c[1], c[0]), Fraction(c[2], c[0])) for r, c in out.items()}


def test_worked_example():
    idx = sets_index({
        "img1": {"A": ["ILD"], "B": ["ILD"], "C": ["Atelectasis"]},
        "img2": {"A": ["ILD"], "B": ["Atelectasis"], "C": ["Cardiomegaly"]},
        "img3": {"A": ["ILD"], "B": ["ILD"], "C": ["ILD"]},
    })
    a = agreement_rates(idx).per_rad["A"]
    assert (a.at_least_one, a.both_all) == (Fraction(2, 3), Fraction(1, 3))


def test_all_identical_is_full_agreement():
    idx = index_from({f"i{k}": {"R1": [], "R2": [], "R3": []} for k in range(4)})
    for rates in agreement_rates(idx).per_rad.values():
        assert rates.at_least_one == rates.both_all == 1


def test_solo_image_counts_as_agreement():
    idx = index_from({"i": {"R1": [("ILD", BOX)]}})
    r = agreement_rates(idx).per_rad["R1"]
    assert r.at_least_one == r.both_all == 1


@pytest.mark.parametrize("seed", range(20))
def test_agreement_matches_brute_force(seed):
    rng = random.Random(seed)
    names = ["ILD", "Atelectasis", "Cardiomegaly"]
    table = {}
    for i in range(rng.randint(1, 15)):
        rads = rng.sample(["R1", "R2", "R3", "R4"], rng.randint(1, 3))
        table[f"i{i}"] = {r: rng.sample(names, rng.randint(0, 2)) for r in rads}
    idx = sets_index(table)
    got = agreement_rates(idx).per_rad
    want = brute_force_agreement(idx)
    assert {r: (g.at_least_one, g.both_all) for r, g in got.items()} == want
    for g in got.values():
        assert g.both_all <= g.at_least_one <= 1


def test_group_rates_pool_images():
    idx = sets_index({
        "img1": {"A": ["ILD"], "B": ["ILD"], "C": ["Atelectasis"]},
        "img2": {"A": ["ILD"], "B": ["Atelectasis"], "C": ["Cardiomegaly"]},
        "img3": {"A": ["ILD"], "B": ["ILD"]},
    })
    res = agreement_rates(idx, {"g": ["A", "B"], "h": ["C"]})
    g = res.groups["g"]
    assert g.members == ("A", "B")
    assert g.rates.n_images == 6
    assert g.rates.at_least_one == Fraction(4, 6)
    assert res.groups["h"].rates.at_least_one == 0
    with pytest.raises(UnknownRadInGroups):
        agreement_rates(idx, {"g": ["Z"]})


def test_workload_examples():
    idx = index_from({"a": {"R1": []}, "b": {"R1": [("Cardiomegaly", BOX)]}})
    heads = {"a": header("a", "045Y", "F"), "b": header("b", "050Y", None)}
    w = workload_summary(idx, heads)
    assert set(w) == {"R1"}
    assert (w["R1"].total, w["R1"].finding, w["R1"].no_finding) == (2, 1, 1)
    assert w["R1"].by_age == {"missing": 0, "young": 1, "old": 1}
    assert w["R1"].by_sex == {"Male": 0, "Female": 1, "Other": 0, "Missing": 1}


def test_cooccurrence_identical_boxes():
    b1 = (10, 10, 50, 50)
    idx = index_from({"i": {"A": [("ILD", b1)], "B": [("Pulmonary fibrosis", b1)]}})
    co = class_cooccurrence(idx, default_taxonomy())
    ild, fib = get_label("ILD"), get_label("Pulmonary fibrosis")
    assert co.count(ild, fib) == co.count(fib, ild) == 1
    assert co.mean_iou(ild, fib) == 1.0
    assert co.counts.sum() == 2


def test_cooccurrence_zero_for_single_class():
    idx = index_from({f"i{k}": {"A": [("ILD", BOX)], "B": [("ILD", BOX)]} for k in range(3)})
    assert class_cooccurrence(idx, default_taxonomy()).counts.sum() == 0


@pytest.mark.parametrize("seed", range(10))
def test_cooccurrence_brute_force(seed):
    rng = random.Random(seed)
    spec = {}
    for i in range(6):
        spec[f"i{i}"] = {}
        for r in ("A", "B", "C"):
            items = []
            for _ in range(rng.randint(0, 3)):
                x, y = rng.choice([0, 5, 10]), rng.choice([0, 5])
                items.append((rng.choice(["ILD", "Pulmonary fibrosis", "Atelectasis"]), (x, y, x + 20, y + 20)))
            spec[f"i{i}"][r] = items
    idx = index_from(spec)
    co = class_cooccurrence(idx, default_taxonomy(), 0.5)
    want = {}
    for ann in idx.values():
        for a, b in combinations(ann.annotators, 2):
            for la, ba in ann.boxes[a]:
                for lb, bb in ann.boxes[b]:
                    if la != lb and iou(ba, bb) >= 0.5:
                        key = frozenset((la, lb))
                        want[key] = want.get(key, 0) + 1
    for key, n in want.items():
        la, lb = sorted(key)
        assert co.count(la, lb) == n
    assert co.counts.sum() == 2 * sum(want.values())


def test_granularity_examples():
    idx = index_from({"i": {"A": [("Atelectasis", (0, 0, 100, 100))],
                            "B": [("Atelectasis", (10, 10, 20, 20)), ("Atelectasis", (60, 60, 80, 80))]}})
    found = granularity_conflicts(idx)
    assert len(found) == 1
    c = found[0]
    assert (c.coarse_rad, c.fine_rad, len(c.contained_boxes)) == ("A", "B", 2)
    assert containment(BBox(10, 10, 20, 20), BBox(0, 0, 100, 100)) == 1.0

    same = index_from({"i": {"A": [("ILD", (0, 0, 10, 10)), ("ILD", (20, 20, 30, 30))],
                             "B": [("ILD", (0, 0, 10, 10)), ("ILD", (20, 20, 30, 30))]}})
    assert granularity_conflicts(same) == []

    one = index_from({"i": {"A": [("ILD", (0, 0, 100, 100))],
                            "B": [("ILD", (10, 10, 20, 20)), ("ILD", (90, 90, 200, 200))]}})
    assert granularity_conflicts(one) == []
    with pytest.raises(ValueError):
        granularity_conflicts(one, 0)


def _review_index():
    spec = {}
    for i in range(40):
        spec[f"i{i:02d}"] = {"R1": [] if i % 2 else [("ILD", BOX)], "R2": [] if i % 3 else [("ILD", BOX)]}
    spec["z"] = {"R3": [], "R1": []}
    return index_from(spec)


def test_review_sampling():
    idx = _review_index()
    sheet = sample_no_finding_review(idx, 10, seed=7)
    assert sheet == sample_no_finding_review(idx, 10, seed=7)
    assert sheet.samples["R3"] == ("z",)
    for rad, images in sheet.samples.items():
        assert len(images) == min(10, sum(1 for a in idx.values()
                                         if rad in a.label_sets and a.label_sets[rad] == {NO_FINDING}))
        assert all(idx[i].label_sets[rad] == {NO_FINDING} for i in images)
    assert sample_no_finding_review(idx, 10, seed=8).samples != sheet.samples
    with pytest.raises(ValueError):
        sample_no_finding_review(idx, 0)


def test_review_independent_of_other_annotators():
    idx = _review_index()
    reduced = {k: v for k, v in idx.items() if k != "z"}
    a = sample_no_finding_review(idx, 5, seed=1).samples
    b = sample_no_finding_review(reduced, 5, seed=1).samples
    assert a["R2"] == b["R2"]


def test_worksheet_csv_and_tally():
    sheet = sample_no_finding_review(_review_index(), 2, seed=0)
    buf = io.StringIO()
    sheet.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "rad_id,image_id,verdict,notes"
    filled = "\n".join([lines[0]] + [l.replace(",,", ",error,", 1) if l.startswith("R1") else l
                                     for l in lines[1:]])
    assert tally_review(io.StringIO(filled)) == {"R1": 2, "R2": 0, "R3": 0}
