"""``cxraudit`` command line: run audits, write reports, generate corpora.

Exit status: 0 when the report raises no flags, 1 when it raises any,
2 when an input cannot be read or parsed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from . import __version__
from .annotations import AnnotationError, LESION_LABELS, load_index
from .config import AuditConfig, ConfigError, load_config
from .consistency import (
    UnknownRadInGroups,
    agreement_rates,
    class_cooccurrence,
    granularity_conflicts,
    sample_no_finding_review,
    workload_summary,
)
from .detection_eval import evaluate_detections, load_predictions
from .dicom_meta import DirectoryUnreadable, headers_by_id, scan_corpus
from .fairness import audit_fairness, parity_flags
from .metadata_audit import EmptyGroup, age_illness_density, metadata_validity_report, write_density_csv
from .report import (
    consistency_section,
    detection_section,
    fairness_section,
    merge_report,
    metadata_section,
    spatial_section,
)
from .spatial import accumulate_heatmap, asymmetry_flags, heatmap_filename, render_heatmap, symmetry_score
from .synthgen import PRESETS, CorpusSpec, InfeasibleSpec, OutputNotWritable, generate_corpus, preset

EXIT_OK, EXIT_FLAGS, EXIT_INPUT = 0, 1, 2

# subcommand -> (sections, required inputs)
AUDITS = {
    "audit-metadata": (("metadata",), ("dicom_dir",)),
    "audit-consistency": (("consistency",), ("annotations",)),
    "audit-spatial": (("spatial",), ("annotations", "dicom_dir")),
    "eval-detections": (("detection",), ("annotations", "predictions")),
    "audit-fairness": (("fairness",), ("annotations", "predictions", "dicom_dir")),
    "full-report": (("metadata", "consistency", "spatial", "detection", "fairness"),
                    ("annotations", "dicom_dir")),
}


class InputError(Exception):
    """Raised for anything that should end the run with exit status 2."""


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dicom-dir", help="directory of DICOM files named <image_id>.dicom")
    p.add_argument("--annotations", help="annotation CSV (image_id, rad_id, class_name, class_id, box)")
    p.add_argument("--predictions", help="prediction CSV (image_id, class_name, score, box)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; VALUE is parsed as JSON when possible")
    p.add_argument("--out-dir", required=True, help="directory for the report and artifacts")
    p.add_argument("--format", choices=("json", "markdown", "both"), default="both")
    p.add_argument("--no-figures", action="store_true", help="skip the matplotlib PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxraudit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in AUDITS:
        _add_common(sub.add_parser(name, help=f"run {name.replace('-', ' ')}"))

    review = sub.add_parser("sample-review", help="draw 'No finding' images per annotator for re-review")
    review.add_argument("--annotations", required=True)
    review.add_argument("--config")
    review.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    review.add_argument("--out-dir", required=True)
    review.add_argument("--n", type=int, help="images per annotator (default: config review_n)")
    review.add_argument("--seed", type=int, help="sampling seed (default: config seed)")

    synth = sub.add_parser("synth", help="write a synthetic corpus with a ground-truth manifest")
    src = synth.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=PRESETS)
    src.add_argument("--spec", help="JSON corpus spec")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n-images", type=int)
    synth.add_argument("--out-dir", required=True)
    return parser


def _load_inputs(args, needed: tuple, config: AuditConfig):
    missing = [n for n in needed if not getattr(args, n, None)]
    if missing:
        raise InputError("missing required input(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    scan = index = preds = None
    if args.annotations:
        try:
            index = load_index(args.annotations)
        except AnnotationError as exc:
            raise InputError(f"{args.annotations}: {exc}") from None
        except OSError as exc:
            raise InputError(f"{args.annotations}: {exc.strerror or exc}") from None
    if getattr(args, "predictions", None):
        try:
            preds = load_predictions(args.predictions)
        except AnnotationError as exc:
            raise InputError(f"{args.predictions}: {exc}") from None
        except OSError as exc:
            raise InputError(f"{args.predictions}: {exc.strerror or exc}") from None
    if args.dicom_dir:
        try:
            scan = scan_corpus(args.dicom_dir, config.dicom_extensions)
        except DirectoryUnreadable as exc:
            raise InputError(str(exc)) from None
    return scan, index, preds


class _Audit:
    """Computes sections from shared read-only inputs; artifacts are written afterwards."""

    def __init__(self, config: AuditConfig, scan, index, preds):
        self.config = config
        self.scan = scan
        self.index = index
        self.preds = preds
        self.headers = headers_by_id(scan) if scan is not None else {}

    def metadata(self):
        report = metadata_validity_report(self.scan)
        density = "annotations not given"
        if self.index is not None:
            try:
                density = age_illness_density(self.headers, self.index)
            except EmptyGroup as exc:
                density = str(exc)
        errors = [(i, e) for i, e in self.scan if not hasattr(e, "patient_age_raw")]
        return metadata_section(report, density, errors, self.config), density

    def consistency(self):
        c = self.config
        work = workload_summary(self.index, self.headers, c.age_split)
        try:
            agree = agreement_rates(self.index, c.annotator_groups)
        except UnknownRadInGroups as exc:
            raise InputError(f"config annotator_groups: {exc}") from None
        cooc = class_cooccurrence(self.index, c.taxonomy(), c.colocation_iou)
        conflicts = granularity_conflicts(self.index, c.containment_threshold)
        return consistency_section(work, agree, cooc, conflicts, c), work

    def spatial(self):
        c = self.config
        maps = [accumulate_heatmap(self.index, self.headers, l, c.grid_size, c.heatmap_weighting)
                for l in LESION_LABELS]
        scores = [symmetry_score(h, c.exempt_classes) for h in maps]
        flagged = asymmetry_flags(scores, c.asymmetry_threshold, c.exempt_classes)
        return spatial_section(maps, scores, flagged, c), maps

    def detection(self):
        report = evaluate_detections(self.preds, self.index, self.config.iou_threshold)
        return detection_section(report), report

    def fairness(self):
        c = self.config
        report = audit_fairness(self.preds, self.index, self.headers, c.score_threshold,
                                c.min_support, c.age_split)
        flags = parity_flags(report, c.gap_threshold)
        return fairness_section(report, flags, c), report


def _write_artifacts(name: str, extra, out: Path, figures: bool) -> list:
    written = []
    if name == "metadata" and not isinstance(extra, str):
        with open(out / "age_density.csv", "w", newline="", encoding="utf-8") as fp:
            write_density_csv(extra, fp)
        written.append("age_density.csv")
        if figures:
            from .figures import age_density_figure
            written.append(age_density_figure(extra, out))
    elif name == "consistency" and figures and extra:
        from .figures import workload_figure
        written.append(workload_figure(extra, out))
    elif name == "spatial":
        for h in extra:
            (out / heatmap_filename(h.label)).write_bytes(render_heatmap(h))
            written.append(heatmap_filename(h.label))
        if figures:
            from .figures import heatmap_figure
            written.append(heatmap_figure(extra, out))
    elif name == "detection" and figures:
        from .figures import pr_figure
        written.append(pr_figure(extra, out))
    elif name == "fairness" and figures:
        from .figures import parity_figure
        written.append(parity_figure(extra, "ppv", out))
    return written


def run_audit(args) -> int:
    try:
        config = load_config(args.config, args.overrides)
    except ConfigError as exc:
        raise InputError(f"config: {exc}") from None
    sections, needed = AUDITS[args.command]
    scan, index, preds = _load_inputs(args, needed, config)
    audit = _Audit(config, scan, index, preds)

    skipped = {}
    todo = []
    for name in sections:
        if name in ("detection", "fairness") and preds is None:
            skipped[name] = "no predictions given"
        elif name in ("consistency", "spatial") and index is None:
            skipped[name] = "no annotations given"
        else:
            todo.append(name)
    with ThreadPoolExecutor(max_workers=max(1, len(todo))) as pool:
        futures = {name: pool.submit(getattr(audit, name)) for name in todo}
        results = {name: f.result() for name, f in futures.items()}

    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        artifacts = []
        for name in todo:
            artifacts += _write_artifacts(name, results[name][1], out, not args.no_figures)
        report = merge_report({n: r[0] for n, r in results.items()}, config, skipped, artifacts)
        paths = []
        if args.format in ("json", "both"):
            (out / "report.json").write_text(report.to_json(), encoding="utf-8")
            paths.append(out / "report.json")
        if args.format in ("markdown", "both"):
            (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
            paths.append(out / "report.md")
    except OSError as exc:
        raise InputError(f"cannot write to {out}: {exc.strerror or exc}") from None
    for p in paths:
        print(p)
    for flag in report.flags:
        print(f"[{flag.section}] {flag.severity}: {flag.message}", file=sys.stderr)
    return EXIT_FLAGS if report.flags else EXIT_OK


def run_review(args) -> int:
    try:
        config = load_config(args.config, args.overrides)
    except ConfigError as exc:
        raise InputError(f"config: {exc}") from None
    n = args.n if args.n is not None else config.review_n
    seed = args.seed if args.seed is not None else config.seed
    if n < 1:
        raise InputError("--n must be at least 1")
    try:
        index = load_index(args.annotations)
    except AnnotationError as exc:
        raise InputError(f"{args.annotations}: {exc}") from None
    except OSError as exc:
        raise InputError(f"{args.annotations}: {exc.strerror or exc}") from None
    sheet = sample_no_finding_review(index, n, seed)
    out = Path(args.out_dir)
    path = out / f"review_seed{seed}_n{n}.csv"
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fp:
            sheet.to_csv(fp)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror or exc}") from None
    print(path)
    return EXIT_OK


def run_synth(args) -> int:
    try:
        if args.preset:
            spec = preset(args.preset, args.seed, args.n_images)
        else:
            with open(args.spec, encoding="utf-8") as fp:
                data = json.load(fp)
            data.setdefault("seed", args.seed)
            if args.n_images is not None:
                data["n_images"] = args.n_images
            spec = CorpusSpec.from_dict(data)
        generate_corpus(spec, args.out_dir)
    except (InfeasibleSpec, OutputNotWritable, ValueError, OSError) as exc:
        raise InputError(str(exc)) from None
    print(Path(args.out_dir) / "manifest.json")
    return EXIT_OK


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        if args.command == "sample-review":
            return run_review(args)
        if args.command == "synth":
            return run_synth(args)
        return run_audit(args)
    except InputError as exc:
        print(f"cxraudit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
