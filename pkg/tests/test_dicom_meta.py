from __future__ import annotations

import struct

import pytest

from cxraudit.dicom_meta import (
    AgeValidity,
    DirectoryUnreadable,
    MalformedElement,
    MissingMagic,
    SexCategory,
    TransferSyntax,
    Truncated,
    UnsupportedTransferSyntax,
    headers_by_id,
    normalize_sex,
    parse_age,
    parse_dicom_header,
    read_dicom_header,
    scan_corpus,
)
from cxraudit.synthgen import PATIENT_ID, DicomFields, corrupt, write_dicom

SYNTAXES = [TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN, TransferSyntax.IMPLICIT_VR_LITTLE_ENDIAN]


def fields(syntax, **kw):
    base = dict(patient_id="P1", syntax=syntax, patient_sex="F", patient_age="045Y",
                photometric="MONOCHROME2", rows=2048, columns=2500)
    base.update(kw)
    return DicomFields(**base)


@pytest.mark.parametrize("syntax", SYNTAXES)
def test_round_trip(syntax):
    data, _ = write_dicom(fields(syntax, number_of_frames=1))
    h = parse_dicom_header(data, "a")
    assert h.transfer_syntax is syntax
    assert (h.patient_age_raw, h.patient_sex_raw, h.photometric) == ("045Y", "F", "MONOCHROME2")
    assert (h.rows, h.columns, h.bits_allocated, h.number_of_frames) == (2048, 2500, 16, 1)


@pytest.mark.parametrize("syntax", SYNTAXES)
def test_absent_elements_are_none(syntax):
    data, _ = write_dicom(fields(syntax, patient_sex=None, patient_age=None, photometric=None,
                                 rows=None, columns=None))
    h = parse_dicom_header(data)
    assert h.patient_age_raw is None and h.patient_sex_raw is None
    assert h.photometric is None and h.rows is None and h.columns is None


@pytest.mark.parametrize("syntax", SYNTAXES)
def test_odd_length_values_padded(syntax):
    # "O" pads to "O "; the raw value is returned without padding
    h = parse_dicom_header(write_dicom(fields(syntax, patient_sex="O"))[0])
    assert h.patient_sex_raw == "O"
    assert normalize_sex(h.patient_sex_raw) is SexCategory.OTHER


@pytest.mark.parametrize("syntax", SYNTAXES)
def test_pixel_bytes_never_matter(syntax):
    data, offsets = write_dicom(fields(syntax))
    reference = parse_dicom_header(data)
    bad, offset = corrupt(data, offsets, "pixel")
    assert offset is None
    assert parse_dicom_header(bad) == reference
    # a pixel element whose declared length runs past EOF is still fine
    assert parse_dicom_header(data[:offsets[(0x7FE0, 0x0010)] + 4]) == reference


@pytest.mark.parametrize("syntax", SYNTAXES)
def test_truncation_reports_element_offset(syntax):
    data, offsets = write_dicom(fields(syntax))
    bad, offset = corrupt(data, offsets, "truncate")
    assert offset == offsets[PATIENT_ID]
    with pytest.raises(Truncated) as info:
        parse_dicom_header(bad)
    assert info.value.offset == offset
    assert str(offset) in str(info.value)


@pytest.mark.parametrize("cut", [133, 140, 150])
def test_truncation_inside_meta(cut):
    data, _ = write_dicom(fields(TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN))
    with pytest.raises((Truncated, UnsupportedTransferSyntax)):
        parse_dicom_header(data[:cut])


def test_missing_magic():
    data, offsets = write_dicom(fields(TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN))
    bad, offset = corrupt(data, offsets, "missing_magic")
    with pytest.raises(MissingMagic) as info:
        parse_dicom_header(bad)
    assert info.value.offset == offset == 128
    with pytest.raises(MissingMagic):
        parse_dicom_header(b"\x00" * 50)


def test_unsupported_transfer_syntax():
    data, _ = write_dicom(fields(TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN))
    # JPEG baseline UID has the same length as the padded explicit UID
    bad = data.replace(b"1.2.840.10008.1.2.1\x00", b"1.2.840.10008.1.2.4\x00", 1)
    with pytest.raises(UnsupportedTransferSyntax) as info:
        parse_dicom_header(bad)
    assert info.value.offset > 132


def test_bad_vr_is_malformed():
    data, offsets = write_dicom(fields(TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN))
    at = offsets[PATIENT_ID]
    bad = data[:at + 4] + b"\x01\x02" + data[at + 6:]
    with pytest.raises(MalformedElement) as info:
        parse_dicom_header(bad)
    assert info.value.offset == at


def test_zero_dimension_reads_as_none():
    data, offsets = write_dicom(fields(TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN))
    at = offsets[(0x0028, 0x0010)]
    bad = data[:at + 8] + struct.pack("<H", 0) + data[at + 10:]
    assert parse_dicom_header(bad).rows is None


def test_read_from_disk_and_scan(tmp_path):
    good, offsets = write_dicom(fields(TransferSyntax.IMPLICIT_VR_LITTLE_ENDIAN))
    (tmp_path / "b.dicom").write_bytes(good)
    (tmp_path / "a.dcm").write_bytes(corrupt(good, offsets, "missing_magic")[0])
    (tmp_path / "notes.txt").write_text("ignored")
    assert read_dicom_header(tmp_path / "b.dicom").image_id == "b"
    entries = scan_corpus(tmp_path)
    assert [i for i, _ in entries] == ["a", "b"]
    assert isinstance(entries[0][1], MissingMagic)
    serial = scan_corpus(tmp_path, max_workers=1)
    assert [(i, type(e)) for i, e in serial] == [(i, type(e)) for i, e in entries]
    assert headers_by_id(entries)["a"] is None


def test_scan_missing_directory(tmp_path):
    with pytest.raises(DirectoryUnreadable):
        scan_corpus(tmp_path / "nope")


# ---- ages and sex

def test_every_year_string():
    for n in range(1000):
        got = parse_age(f"{n:03d}Y")
        assert got.years == n
        expected = AgeValidity.VALID if 1 <= n <= 99 else AgeValidity.OUT_OF_RANGE
        assert got.validity is expected


@pytest.mark.parametrize("raw,years,validity", [
    ("045Y", 45, AgeValidity.VALID),
    ("45", 45, AgeValidity.VALID),
    ("000Y", 0, AgeValidity.OUT_OF_RANGE),
    ("238Y", 238, AgeValidity.OUT_OF_RANGE),
    ("018M", 1, AgeValidity.VALID),
    ("011M", 0, AgeValidity.OUT_OF_RANGE),
    ("104W", 2, AgeValidity.VALID),
    ("400D", 1, AgeValidity.VALID),
    ("", None, AgeValidity.MISSING),
    (None, None, AgeValidity.MISSING),
    ("  ", None, AgeValidity.MISSING),
    ("unknown", None, AgeValidity.MALFORMED),
    ("45X", None, AgeValidity.MALFORMED),
    ("-4Y", None, AgeValidity.MALFORMED),
])
def test_parse_age_table(raw, years, validity):
    got = parse_age(raw)
    assert (got.years, got.validity) == (years, validity)


@pytest.mark.parametrize("raw,expected", [
    ("M", SexCategory.MALE), ("F", SexCategory.FEMALE), ("O", SexCategory.OTHER),
    ("m", SexCategory.MISSING), ("", SexCategory.MISSING), (None, SexCategory.MISSING),
    ("X", SexCategory.MISSING), ("F ", SexCategory.FEMALE),
])
def test_normalize_sex(raw, expected):
    assert normalize_sex(raw) is expected
