"""Turn audit results into report sections, flags, JSON and Markdown."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from . import __version__
from .config import AuditConfig
from .consistency import AgreementResult, Cooccurrence
from .detection_eval import DetectionReport
from .dicom_meta import AgeValidity, SexCategory
from .fairness import FEATURES, METRICS, ParityReport, feature_groups
from .metadata_audit import AgeDensity, MetadataReport
from .spatial import heatmap_filename

SECTIONS = ("metadata", "consistency", "spatial", "detection", "fairness")

NOTES = {
    "observations": "metadata fractions count images, not annotation rows",
    "missing_age": "malformed ages are merged into the missing fraction; detail block splits them",
    "agreement": "label sets compared exactly; solo-annotated images agree vacuously; "
                 "group rates are image-weighted",
    "centering": "boxes normalised per axis to the unit square before rasterising",
    "iou_match": "a detection matches when IoU >= iou_threshold",
    "ground_truth": "union of all annotators' boxes, no consensus fusion",
    "no_finding_predictions": "detections on images without boxes of the class are false positives",
    "fairness_subgroups": "out-of-range and malformed ages fall in the missing age subgroup",
}


def num(value):
    """The single numeric rendering shared by JSON and Markdown."""
    if value is None:
        return None
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        return value
    return round(float(value), 6)


def fmt(value) -> str:
    v = num(value)
    return "n/a" if v is None else repr(v)


@dataclass
class Flag:
    section: str
    severity: str
    code: str
    message: str
    evidence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"section": self.section, "severity": self.severity, "code": self.code,
                "message": self.message, "evidence": self.evidence}


@dataclass
class Section:
    name: str
    payload: dict
    flags: list


# ---------------------------------------------------------------- metadata

def metadata_section(report: MetadataReport, density, scan_errors, config: AuditConfig) -> Section:
    payload = {
        "n_images": report.n_images,
        "n_parse_errors": report.n_parse_errors,
        "missing_age_frac": num(report.missing_age_frac),
        "valid_age_frac": num(report.valid_age_frac),
        "out_of_range_age_frac": num(report.out_of_range_frac),
        "missing_sex_frac": num(report.missing_sex_frac),
        "age_detail": {v.value: report.age_counts[v] for v in AgeValidity},
        "sex_counts": {c.value: report.sex_counts[c] for c in SexCategory},
        "sex_distribution": {c.value: num(f) for c, f in report.sex_distribution.items()},
        "photometric_counts": dict(report.photometric_counts),
        "photometric_distribution": {k: num(f) for k, f in report.photometric_distribution.items()},
        "children": list(report.children),
        "out_of_range_ages": [[i, y] for i, y in report.out_of_range_ages],
        "parse_errors": [{"image_id": i, "error": e.kind, "offset": e.offset, "message": str(e)}
                         for i, e in scan_errors],
    }
    if isinstance(density, AgeDensity):
        payload["age_density"] = {
            "n_excluded": density.n_excluded,
            "n_finding": density.finding.n,
            "n_nofinding": density.no_finding.n,
            "bandwidth_finding": num(density.finding.bandwidth),
            "bandwidth_nofinding": num(density.no_finding.bandwidth),
            "mean_age_finding": num(density.finding.mean()),
            "mean_age_nofinding": num(density.no_finding.mean()),
            "histogram": {
                "bin_edges": [int(e) for e in density.bin_edges],
                "finding": [int(c) for c in density.hist_finding],
                "no_finding": [int(c) for c in density.hist_no_finding],
            },
            "csv": "age_density.csv",
        }
    else:
        payload["age_density"] = {"status": "skipped", "reason": density}

    flags = []
    if report.n_parse_errors:
        flags.append(Flag("metadata", "error", "unparseable_dicom",
                          f"{report.n_parse_errors} DICOM file(s) could not be parsed",
                          {"image_ids": [i for i, _ in scan_errors]}))
    if report.children:
        flags.append(Flag("metadata", "warning", "pediatric_images",
                          f"{len(report.children)} image(s) of children (ages 1-17)",
                          {"image_ids": list(report.children)}))
    if report.out_of_range_ages:
        flags.append(Flag("metadata", "warning", "age_out_of_range",
                          f"{len(report.out_of_range_ages)} image(s) with age outside 1-99",
                          {"count": len(report.out_of_range_ages)}))
    for key, frac in (("age", report.missing_age_frac), ("sex", report.missing_sex_frac)):
        if frac is not None and frac > Fraction(config.max_missing_frac):
            flags.append(Flag("metadata", "warning", f"missing_{key}",
                              f"{fmt(frac)} of images lack a usable patient {key}",
                              {"fraction": num(frac), "limit": config.max_missing_frac}))
    present = [k for k, n in report.photometric_counts.items() if k != "missing" and n > 0]
    if len(present) > 1:
        flags.append(Flag("metadata", "warning", "mixed_photometric",
                          f"images mix photometric interpretations {present}",
                          {"counts": {k: report.photometric_counts[k] for k in present}}))
    return Section("metadata", payload, flags)


# ---------------------------------------------------------------- consistency

def _rates(r) -> dict:
    return {"n_images": r.n_images, "at_least_one": num(r.at_least_one), "both_all": num(r.both_all)}


def consistency_section(workload: dict, agreement: AgreementResult, cooc: Cooccurrence,
                        conflicts: list, config: AuditConfig) -> Section:
    pairs = []
    n = len(cooc.labels)
    for a in range(n):
        for b in range(a + 1, n):
            count = int(cooc.counts[a, b])
            if count:
                la, lb = cooc.labels[a], cooc.labels[b]
                pairs.append({"a": la.name, "b": lb.name, "count": count,
                              "mean_iou": num(cooc.mean_iou(la, lb))})
    payload = {
        "workload": {
            rad: {"total": w.total, "finding": w.finding, "no_finding": w.no_finding,
                  "by_sex": dict(w.by_sex), "by_age": dict(w.by_age)}
            for rad, w in workload.items()
        },
        "agreement": {
            "per_annotator": {r: _rates(a) for r, a in agreement.per_rad.items()},
            "groups": {g: {"members": list(ga.members), **_rates(ga.rates)}
                       for g, ga in agreement.groups.items()},
            "group_weighting": "image-weighted",
        },
        "class_cooccurrence": {
            "colocation_iou": config.colocation_iou,
            "pairs": pairs,
            "overlap_pairs": [{"a": a.name, "b": b.name, "count": cooc.count(a, b),
                               "mean_iou": num(cooc.mean_iou(a, b))} for a, b in cooc.overlap_pairs],
        },
        "granularity": {
            "containment_threshold": config.containment_threshold,
            "conflicts": [{"image_id": c.image_id, "label": c.label.name, "coarse_rad": c.coarse_rad,
                           "fine_rad": c.fine_rad, "coarse_box": list(c.coarse_box.as_tuple()),
                           "contained_boxes": [list(b.as_tuple()) for b in c.contained_boxes]}
                          for c in conflicts],
        },
    }

    flags = []
    targets = ([(g, ga.rates) for g, ga in agreement.groups.items()] if agreement.groups
               else list(agreement.per_rad.items()))
    for name, rates in targets:
        if rates.both_all is not None and rates.both_all < Fraction(config.min_agreement):
            flags.append(Flag("consistency", "warning", "low_agreement",
                              f"{name} agreed with all colleagues on only {fmt(rates.both_all)} of images",
                              {"who": name, "both_all": num(rates.both_all),
                               "at_least_one": num(rates.at_least_one)}))
    overlapping = [p for p in payload["class_cooccurrence"]["overlap_pairs"] if p["count"]]
    for p in overlapping:
        flags.append(Flag("consistency", "warning", "overlapping_classes",
                          f"{p['a']} and {p['b']} label the same region {p['count']} time(s)",
                          {"a": p["a"], "b": p["b"], "count": p["count"]}))
    if conflicts:
        flags.append(Flag("consistency", "warning", "box_granularity",
                          f"{len(conflicts)} case(s) of one box covering several boxes of a colleague",
                          {"count": len(conflicts)}))
    return Section("consistency", payload, flags)


# ---------------------------------------------------------------- spatial

def spatial_section(heatmaps: list, scores: list, flagged: list, config: AuditConfig) -> Section:
    flagged_labels = {s.label for s in flagged}
    payload = {
        "grid_size": list(config.grid_size),
        "weighting": config.heatmap_weighting,
        "asymmetry_threshold": config.asymmetry_threshold,
        "classes": {
            h.label.name: {"n_boxes": h.n_boxes, "n_skipped_images": h.n_skipped_images,
                           "symmetry_score": num(s.score), "exempt": s.exempt,
                           "flagged": s.label in flagged_labels, "pgm": heatmap_filename(h.label)}
            for h, s in zip(heatmaps, scores)
        },
    }
    flags = [Flag("spatial", "warning", "asymmetric_lesions",
                  f"{s.label.name} boxes are lopsided (score {fmt(s.score)})",
                  {"label": s.label.name, "score": num(s.score)})
             for s in flagged]
    return Section("spatial", payload, flags)


# ---------------------------------------------------------------- detection

def detection_section(report: DetectionReport) -> Section:
    payload = {
        "iou_threshold": report.iou_threshold,
        "match_rule": "iou >= threshold",
        "per_class": {
            label.name: {"ap": num(r.ap), "n_gt": r.n_gt, "n_pred": r.n_pred, "n_tp": r.n_tp,
                         "pr_curve": [[num(rc), num(pr)] for rc, pr in zip(r.recall, r.precision)]}
            for label, r in report.per_class.items()
        },
        "map": num(report.map.value) if report.map else None,
        "included": [l.name for l in report.map.included] if report.map else [],
        "excluded": [l.name for l in report.map.excluded] if report.map
        else [l.name for l in report.per_class],
    }
    return Section("detection", payload, [])


# ---------------------------------------------------------------- fairness

def fairness_section(report: ParityReport, flags: list, config: AuditConfig) -> Section:
    classes = {}
    for label, features in sorted(report.cells.items()):
        entry = {}
        for feature in FEATURES:
            groups = {}
            for g, m in features[feature].items():
                cell = {"support": m.support, "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn,
                        "denominators": m.denominators()}
                for metric in METRICS:
                    value = m.metric(metric)
                    if value is not None:
                        cell[metric] = num(value)
                groups[g] = cell
            gaps = {}
            for metric, gap in report.gaps(label, feature).items():
                if gap is not None:
                    gaps[metric] = {"gap": num(gap[0]), "low": gap[1][0], "high": gap[2][0]}
            entry[feature] = {"subgroups": groups, "gaps": gaps}
        classes[label.name] = entry
    flat = [{"label": f.label.name, "feature": f.feature, "metric": f.metric, "gap": num(f.gap),
             "low_group": f.low_group, "low_value": num(f.low_value),
             "high_group": f.high_group, "high_value": num(f.high_value)} for f in flags]
    payload = {
        "score_threshold": config.score_threshold,
        "gap_threshold": config.gap_threshold,
        "min_support": config.min_support,
        "age_split": config.age_split,
        "classes": classes,
        "flags": flat,
    }
    out = [Flag("fairness", "warning", "parity_gap", f.message, fl) for f, fl in zip(flags, flat)]
    return Section("fairness", payload, out)


# ---------------------------------------------------------------- assembly

@dataclass
class AuditReport:
    tool: dict
    config: dict
    sections: dict
    flags: list
    artifacts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"tool": self.tool, "config": self.config, "notes": NOTES,
                "sections": self.sections, "flags": [f.to_dict() for f in self.flags],
                "artifacts": sorted(self.artifacts)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        return render_markdown(self.to_dict())


def merge_report(sections: dict, config: AuditConfig, skipped: Optional[dict] = None,
                 artifacts: Optional[list] = None) -> AuditReport:
    """Assemble whichever sections were computed; the rest are marked skipped."""
    skipped = skipped or {}
    body, flags = {}, []
    for name in SECTIONS:
        section = sections.get(name)
        if section is None:
            body[name] = {"status": "skipped", "reason": skipped.get(name, "not requested")}
            continue
        body[name] = {"status": "ok", **section.payload}
        flags.extend(section.flags)
    return AuditReport({"name": "cxraudit", "version": __version__}, config.to_dict(), body,
                       flags, list(artifacts or []))


# ---------------------------------------------------------------- markdown

def _table(headers, rows) -> list:
    out = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    out += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return out + [""]


def _v(value) -> str:
    return "n/a" if value is None else repr(value)


def render_markdown(report: dict) -> str:
    s = report["sections"]
    lines = ["# Dataset and model audit", "",
             f"Tool: {report['tool']['name']} {report['tool']['version']}", ""]

    lines += ["## Flags", ""]
    if report["flags"]:
        lines += _table(["section", "severity", "code", "message"],
                        [[f["section"], f["severity"], f["code"], f["message"]] for f in report["flags"]])
    else:
        lines += ["No flags raised.", ""]

    for name in SECTIONS:
        sec = s[name]
        lines += [f"## {name.capitalize()}", ""]
        if sec["status"] != "ok":
            lines += [f"Skipped: {sec['reason']}", ""]
            continue
        lines += globals()[f"_md_{name}"](sec)

    lines += ["## Configuration", "", "```json",
              json.dumps(report["config"], indent=2, sort_keys=True), "```", ""]
    return "\n".join(lines)


def _md_metadata(sec) -> list:
    out = _table(["statistic", "value"], [
        ["images", sec["n_images"]],
        ["parse errors", sec["n_parse_errors"]],
        ["missing age fraction", _v(sec["missing_age_frac"])],
        ["valid age fraction", _v(sec["valid_age_frac"])],
        ["out-of-range age fraction", _v(sec["out_of_range_age_frac"])],
        ["missing sex fraction", _v(sec["missing_sex_frac"])],
        ["children (1-17)", len(sec["children"])],
    ])
    out += ["### Age validity", ""] + _table(["validity", "images"], list(sec["age_detail"].items()))
    out += ["### Sex", ""] + _table(["category", "images", "fraction"],
                                    [[k, sec["sex_counts"][k], _v(v)]
                                     for k, v in sec["sex_distribution"].items()])
    out += ["### Photometric interpretation", ""] + _table(
        ["value", "images", "fraction"],
        [[k, sec["photometric_counts"][k], _v(v)] for k, v in sec["photometric_distribution"].items()])
    dens = sec["age_density"]
    if dens.get("status") == "skipped":
        out += [f"Age density skipped: {dens['reason']}", ""]
    else:
        out += ["### Age by illness", ""] + _table(
            ["group", "images", "mean age", "bandwidth"],
            [["finding", dens["n_finding"], _v(dens["mean_age_finding"]), _v(dens["bandwidth_finding"])],
             ["no finding", dens["n_nofinding"], _v(dens["mean_age_nofinding"]),
              _v(dens["bandwidth_nofinding"])]])
        out += [f"Images without a valid age: {dens['n_excluded']}", ""]
    return out


def _md_consistency(sec) -> list:
    out = ["### Workload", ""]
    out += _table(["annotator", "images", "finding", "no finding", "Male", "Female", "Other",
                   "sex missing", "young", "old", "age missing"],
                  [[r, w["total"], w["finding"], w["no_finding"], w["by_sex"]["Male"],
                    w["by_sex"]["Female"], w["by_sex"]["Other"], w["by_sex"]["Missing"],
                    w["by_age"]["young"], w["by_age"]["old"], w["by_age"]["missing"]]
                   for r, w in sec["workload"].items()])
    ag = sec["agreement"]
    if ag["groups"]:
        names = list(ag["groups"])
        out += ["### Agreement by group", ""]
        out += _table(["", *names], [
            ["Agreed with at least one colleague on all classes",
             *(_v(ag["groups"][g]["at_least_one"]) for g in names)],
            ["Agreed with every colleague on all classes",
             *(_v(ag["groups"][g]["both_all"]) for g in names)],
        ])
    out += ["### Agreement by annotator", ""]
    out += _table(["annotator", "images", "at least one", "all"],
                  [[r, a["n_images"], _v(a["at_least_one"]), _v(a["both_all"])]
                   for r, a in ag["per_annotator"].items()])
    co = sec["class_cooccurrence"]
    out += [f"### Co-located boxes with different classes (IoU >= {co['colocation_iou']})", ""]
    if co["pairs"]:
        out += _table(["class A", "class B", "events", "mean IoU"],
                      [[p["a"], p["b"], p["count"], _v(p["mean_iou"])] for p in co["pairs"]])
    else:
        out += ["None.", ""]
    gr = sec["granularity"]["conflicts"]
    out += [f"### Box granularity conflicts: {len(gr)}", ""]
    if gr:
        out += _table(["image", "class", "single-box annotator", "multi-box annotator", "boxes inside"],
                      [[c["image_id"], c["label"], c["coarse_rad"], c["fine_rad"],
                        len(c["contained_boxes"])] for c in gr])
    return out


def _md_spatial(sec) -> list:
    return _table(["class", "boxes", "symmetry score", "exempt", "flagged"],
                  [[k, c["n_boxes"], _v(c["symmetry_score"]), c["exempt"], c["flagged"]]
                   for k, c in sec["classes"].items()])


def _md_detection(sec) -> list:
    out = [f"mAP at IoU >= {sec['iou_threshold']}: {_v(sec['map'])}", ""]
    out += _table(["class", "AP", "ground-truth boxes", "predictions", "true positives"],
                  [[k, _v(c["ap"]), c["n_gt"], c["n_pred"], c["n_tp"]]
                   for k, c in sec["per_class"].items()])
    if sec["excluded"]:
        out += [f"Excluded (no boxes, no predictions): {', '.join(sec['excluded'])}", ""]
    return out


def _md_fairness(sec) -> list:
    out = [f"Score threshold {sec['score_threshold']}, gap threshold {sec['gap_threshold']}, "
           f"minimum support {sec['min_support']}.", ""]
    for label, entry in sec["classes"].items():
        rows = []
        for feature in FEATURES:
            for g in feature_groups(feature):
                cell = entry[feature]["subgroups"].get(g)
                if cell is None:
                    continue
                rows.append([feature, g, cell["support"], *(_v(cell.get(m)) for m in METRICS)])
        out += [f"### {label}", ""] + _table(["feature", "subgroup", "support", *METRICS], rows)
        gaps = [[feature, metric, _v(g["gap"]), g["low"], g["high"]]
                for feature in FEATURES for metric, g in entry[feature]["gaps"].items()]
        if gaps:
            out += _table(["feature", "metric", "gap", "lowest", "highest"], gaps)
    return out
