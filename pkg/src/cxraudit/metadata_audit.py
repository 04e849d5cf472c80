"""Corpus-level metadata validity and the age-by-illness density comparison."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence, TextIO, Union

import numpy as np

from .annotations import ImageIndex
from .dicom_meta import (
    MAX_VALID_AGE,
    MIN_VALID_AGE,
    AgeValidity,
    DicomError,
    DicomHeader,
    SexCategory,
    normalize_sex,
    parse_age,
)

PEDIATRIC_MAX_AGE = 17
MISSING_KEY = "missing"
HIST_BIN_WIDTH = 5

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

Entries = Union[Sequence[tuple[str, Union[DicomHeader, DicomError]]],
                Mapping[str, Optional[DicomHeader]]]


def _items(entries: Entries):
    if isinstance(entries, Mapping):
        return list(entries.items())
    return list(entries)


def _frac(num: int, den: int) -> Optional[Fraction]:
    return Fraction(num, den) if den else None


@dataclass(frozen=True)
class MetadataReport:
    n_images: int
    n_parse_errors: int
    age_counts: Mapping[AgeValidity, int]
    sex_counts: Mapping[SexCategory, int]
    photometric_counts: Mapping[str, int]
    children: tuple[str, ...]
    out_of_range_ages: tuple[tuple[str, int], ...]

    @property
    def n_missing_age(self) -> int:
        return self.age_counts[AgeValidity.MISSING] + self.age_counts[AgeValidity.MALFORMED]

    @property
    def missing_age_frac(self) -> Optional[Fraction]:
        return _frac(self.n_missing_age, self.n_images)

    @property
    def valid_age_frac(self) -> Optional[Fraction]:
        return _frac(self.age_counts[AgeValidity.VALID], self.n_images)

    @property
    def out_of_range_frac(self) -> Optional[Fraction]:
        return _frac(self.age_counts[AgeValidity.OUT_OF_RANGE], self.n_images)

    @property
    def missing_sex_frac(self) -> Optional[Fraction]:
        return _frac(self.sex_counts[SexCategory.MISSING], self.n_images)

    @property
    def sex_distribution(self) -> dict[SexCategory, Optional[Fraction]]:
        return {c: _frac(n, self.n_images) for c, n in self.sex_counts.items()}

    @property
    def photometric_distribution(self) -> dict[str, Optional[Fraction]]:
        return {k: _frac(n, self.n_images) for k, n in self.photometric_counts.items()}


def metadata_validity_report(entries: Entries) -> MetadataReport:
    """Tally age, sex and photometric validity over a scanned corpus.

    Files that failed to parse count as missing on every attribute.
    Malformed ages fall under the headline missing count.
    """
    items = sorted(_items(entries), key=lambda kv: kv[0])
    age_counts = Counter({v: 0 for v in AgeValidity})
    sex_counts = Counter({c: 0 for c in SexCategory})
    photometric = Counter()
    children, out_of_range = [], []
    errors = 0
    for image_id, header in items:
        if not isinstance(header, DicomHeader):
            errors += 1
            age_counts[AgeValidity.MISSING] += 1
            sex_counts[SexCategory.MISSING] += 1
            photometric[MISSING_KEY] += 1
            continue
        age = parse_age(header.patient_age_raw)
        age_counts[age.validity] += 1
        if age.valid and age.years <= PEDIATRIC_MAX_AGE:
            children.append(image_id)
        elif age.validity is AgeValidity.OUT_OF_RANGE:
            out_of_range.append((image_id, age.years))
        sex_counts[normalize_sex(header.patient_sex_raw)] += 1
        photometric[header.photometric if header.photometric else MISSING_KEY] += 1
    photometric.setdefault(MISSING_KEY, 0)
    return MetadataReport(
        n_images=len(items),
        n_parse_errors=errors,
        age_counts=dict(age_counts),
        sex_counts=dict(sex_counts),
        photometric_counts=dict(sorted(photometric.items())),
        children=tuple(children),
        out_of_range_ages=tuple(out_of_range),
    )


class EmptyGroup(ValueError):
    pass


def silverman_bandwidth(samples: np.ndarray) -> float:
    """0.9 * min(sd, IQR/1.34) * n^-1/5, falling back to whichever spread is nonzero.

    A sample with no spread at all gets a one-year bandwidth.
    """
    n = len(samples)
    sd = float(np.std(samples, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(samples, [75, 25])
    iqr = float(q75 - q25) / 1.34
    spreads = [s for s in (sd, iqr) if s > 0]
    spread = min(spreads) if spreads else 1.0
    return 0.9 * spread * n ** (-0.2)


@dataclass(frozen=True)
class DensityCurve:
    group: str
    ages: np.ndarray
    density: np.ndarray
    bandwidth: float
    n: int

    def integral(self) -> float:
        return float(_trapezoid(self.density, self.ages))

    def mean(self) -> float:
        return float(_trapezoid(self.ages * self.density, self.ages))


def gaussian_kde_curve(samples: Sequence[float], grid: np.ndarray, group: str) -> DensityCurve:
    """Gaussian KDE on ``grid``, renormalised to unit trapezoid area there."""
    x = np.asarray(samples, dtype=float)
    h = silverman_bandwidth(x)
    z = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h * np.sqrt(2 * np.pi))
    area = _trapezoid(dens, grid)
    if area > 0:
        dens = dens / area
    return DensityCurve(group, grid.astype(float), dens, h, len(x))


@dataclass(frozen=True)
class AgeDensity:
    finding: DensityCurve
    no_finding: DensityCurve
    bin_edges: np.ndarray
    hist_finding: np.ndarray
    hist_no_finding: np.ndarray
    n_excluded: int


AGE_GRID = np.arange(MIN_VALID_AGE, MAX_VALID_AGE + 1, dtype=float)


def age_illness_density(headers: Mapping[str, Optional[DicomHeader]], index: ImageIndex,
                        grid: np.ndarray = AGE_GRID) -> AgeDensity:
    """Age densities of images with and without any annotated lesion.

    Only indexed images with a valid age contribute; the rest are counted
    as excluded.
    """
    groups = {"finding": [], "no finding": []}
    excluded = 0
    for image_id in sorted(index):
        header = headers.get(image_id)
        age = parse_age(header.patient_age_raw) if header is not None else None
        if age is None or not age.valid:
            excluded += 1
            continue
        groups["finding" if index[image_id].any_finding else "no finding"].append(age.years)
    for name, ages in groups.items():
        if not ages:
            raise EmptyGroup(f"group {name!r} has no image with a valid age")
    edges = np.arange(MIN_VALID_AGE, MAX_VALID_AGE + HIST_BIN_WIDTH + 1, HIST_BIN_WIDTH)
    return AgeDensity(
        finding=gaussian_kde_curve(groups["finding"], grid, "finding"),
        no_finding=gaussian_kde_curve(groups["no finding"], grid, "no finding"),
        bin_edges=edges,
        hist_finding=np.histogram(groups["finding"], bins=edges)[0],
        hist_no_finding=np.histogram(groups["no finding"], bins=edges)[0],
        n_excluded=excluded,
    )


def write_density_csv(density: AgeDensity, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["age", "density_finding", "density_nofinding"])
    for age, f, nf in zip(density.finding.ages, density.finding.density, density.no_finding.density):
        writer.writerow([int(age), repr(float(f)), repr(float(nf))])
