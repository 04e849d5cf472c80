"""Audit configuration: one JSON file plus ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .annotations import DEFAULT_OVERLAP_PAIRS, Taxonomy, get_label
from .spatial import DEFAULT_EXEMPT, WEIGHTINGS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AuditConfig:
    overlap_pairs: tuple = tuple(tuple(p) for p in DEFAULT_OVERLAP_PAIRS)
    umbrella_map: dict = field(default_factory=dict)
    iou_threshold: float = 0.4
    colocation_iou: float = 0.5
    containment_threshold: float = 0.9
    asymmetry_threshold: float = 0.25
    score_threshold: float = 0.5
    gap_threshold: float = 0.1
    min_support: int = 30
    grid_size: tuple = (64, 64)
    heatmap_weighting: str = "binary"
    annotator_groups: dict = field(default_factory=dict)
    age_split: int = 50
    exempt_classes: tuple = DEFAULT_EXEMPT
    seed: int = 0
    review_n: int = 10
    max_missing_frac: float = 0.05
    min_agreement: float = 0.9
    dicom_extensions: tuple = (".dicom", ".dcm")

    def __post_init__(self):
        def check(name, ok):
            if not ok:
                raise ConfigError(f"{name}={getattr(self, name)!r} is outside its allowed range")

        check("iou_threshold", 0 < self.iou_threshold < 1)
        check("colocation_iou", 0 < self.colocation_iou <= 1)
        check("containment_threshold", 0 < self.containment_threshold <= 1)
        check("asymmetry_threshold", 0 < self.asymmetry_threshold < 1)
        check("score_threshold", 0 <= self.score_threshold <= 1)
        check("gap_threshold", 0 < self.gap_threshold <= 1)
        check("min_support", isinstance(self.min_support, int) and self.min_support >= 1)
        check("grid_size", len(self.grid_size) == 2 and all(isinstance(v, int) and v >= 1
                                                            for v in self.grid_size))
        check("heatmap_weighting", self.heatmap_weighting in WEIGHTINGS)
        check("age_split", isinstance(self.age_split, int) and 1 < self.age_split <= 99)
        check("review_n", isinstance(self.review_n, int) and self.review_n >= 1)
        check("max_missing_frac", 0 <= self.max_missing_frac <= 1)
        check("min_agreement", 0 <= self.min_agreement <= 1)
        check("seed", isinstance(self.seed, int))
        try:
            self.taxonomy()
            for name in self.exempt_classes:
                get_label(name)
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        for group, members in self.annotator_groups.items():
            if not isinstance(members, (list, tuple)) or not all(isinstance(m, str) for m in members):
                raise ConfigError(f"annotator group {group!r} must list rad ids")

    def taxonomy(self) -> Taxonomy:
        return Taxonomy.from_names(self.overlap_pairs, self.umbrella_map)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = [list(v) if isinstance(v, tuple) else v for v in value]
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AuditConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        for key, value in data.items():
            if key in ("overlap_pairs",):
                value = tuple(tuple(p) for p in value)
            elif key in ("grid_size", "exempt_classes", "dicom_extensions"):
                value = tuple(value)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _parse_override(item: str) -> tuple[str, object]:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> AuditConfig:
    data = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fp:
                data = json.load(fp)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for item in overrides:
        key, value = _parse_override(item)
        data[key] = value
    return AuditConfig.from_dict(data)
