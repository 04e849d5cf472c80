"""Audit tooling for chest X-ray corpora: DICOM metadata, annotator
consistency, box placement, detection scoring and subgroup parity."""

__version__ = "0.1.0"
