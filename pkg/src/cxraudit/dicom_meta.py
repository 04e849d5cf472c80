"""Read patient and image attributes from DICOM Part-10 headers.

Only the header is decoded. Parsing stops at the Pixel Data element, so the
pixel payload is never loaded, and unknown elements are skipped by their
declared lengths.
"""

from __future__ import annotations

import enum
import io
import os
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Union

EXPLICIT_VR_LE_UID = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LE_UID = "1.2.840.10008.1.2"

PREAMBLE_LENGTH = 128
MAGIC = b"DICM"

TRANSFER_SYNTAX = (0x0002, 0x0010)
PATIENT_SEX = (0x0010, 0x0040)
PATIENT_AGE = (0x0010, 0x1010)
PHOTOMETRIC = (0x0028, 0x0004)
NUMBER_OF_FRAMES = (0x0028, 0x0008)
ROWS = (0x0028, 0x0010)
COLUMNS = (0x0028, 0x0011)
BITS_ALLOCATED = (0x0028, 0x0100)
PIXEL_DATA = (0x7FE0, 0x0010)

ITEM = (0xFFFE, 0xE000)
ITEM_DELIMITER = (0xFFFE, 0xE00D)
SEQUENCE_DELIMITER = (0xFFFE, 0xE0DD)

UNDEFINED_LENGTH = 0xFFFFFFFF

# explicit-VR encodings with a 2-byte reserved field and a 4-byte length
LONG_VRS = frozenset(
    {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
)

# implicit VR has no type on the wire; these are the only tags decoded
_IMPLICIT_VR = {
    TRANSFER_SYNTAX: "UI",
    PATIENT_SEX: "CS",
    PATIENT_AGE: "AS",
    PHOTOMETRIC: "CS",
    NUMBER_OF_FRAMES: "IS",
    ROWS: "US",
    COLUMNS: "US",
    BITS_ALLOCATED: "US",
}

_WANTED = frozenset(_IMPLICIT_VR) - {TRANSFER_SYNTAX}


class TransferSyntax(enum.Enum):
    EXPLICIT_VR_LITTLE_ENDIAN = "ExplicitVRLittleEndian"
    IMPLICIT_VR_LITTLE_ENDIAN = "ImplicitVRLittleEndian"

    @property
    def uid(self) -> str:
        if self is TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN:
            return EXPLICIT_VR_LE_UID
        return IMPLICIT_VR_LE_UID

    @property
    def explicit(self) -> bool:
        return self is TransferSyntax.EXPLICIT_VR_LITTLE_ENDIAN


_SYNTAX_BY_UID = {ts.uid: ts for ts in TransferSyntax}


class DicomError(ValueError):
    """A DICOM file could not be parsed; ``offset`` locates the failure."""

    kind = "DicomError"

    def __init__(self, detail: str, offset: int):
        self.detail = detail
        self.offset = offset
        super().__init__(f"{self.kind} at byte offset {offset}: {detail}")


class MissingMagic(DicomError):
    kind = "MissingMagic"


class Truncated(DicomError):
    kind = "Truncated"


class UnsupportedTransferSyntax(DicomError):
    kind = "UnsupportedTransferSyntax"


class MalformedElement(DicomError):
    kind = "MalformedElement"


class FileUnreadable(DicomError):
    kind = "FileUnreadable"


class DirectoryUnreadable(OSError):
    pass


@dataclass(frozen=True)
class DicomHeader:
    image_id: str
    transfer_syntax: TransferSyntax
    patient_age_raw: Optional[str] = None
    patient_sex_raw: Optional[str] = None
    photometric: Optional[str] = None
    rows: Optional[int] = None
    columns: Optional[int] = None
    bits_allocated: Optional[int] = None
    number_of_frames: Optional[int] = None

    def __post_init__(self):
        for name in ("rows", "columns", "bits_allocated", "number_of_frames"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")


class AgeValidity(enum.Enum):
    VALID = "Valid"
    OUT_OF_RANGE = "OutOfRange"
    MALFORMED = "Malformed"
    MISSING = "Missing"


@dataclass(frozen=True)
class AgeParse:
    years: Optional[int]
    validity: AgeValidity

    @property
    def valid(self) -> bool:
        return self.validity is AgeValidity.VALID


class SexCategory(enum.Enum):
    MALE = "Male"
    FEMALE = "Female"
    OTHER = "Other"
    MISSING = "Missing"


MIN_VALID_AGE = 1
MAX_VALID_AGE = 99

_AGE_STRING = re.compile(r"^(\d+)([DWMY])$")
_BARE_AGE = re.compile(r"^\d+$")
_AGE_UNIT_DIVISOR = {"D": 365, "W": 52, "M": 12, "Y": 1}


def parse_age(raw: Optional[str]) -> AgeParse:
    """Parse a PatientAge value and classify it against the 1-99 year window.

    Accepts the DICOM age string ``nnnU`` (U in D/W/M/Y, sub-year units
    floor-divided to whole years) and bare integers read as years.
    """
    if raw is None:
        return AgeParse(None, AgeValidity.MISSING)
    text = raw.rstrip(" \x00")
    if not text:
        return AgeParse(None, AgeValidity.MISSING)
    match = _AGE_STRING.match(text)
    if match:
        years = int(match.group(1)) // _AGE_UNIT_DIVISOR[match.group(2)]
    elif _BARE_AGE.match(text):
        years = int(text)
    else:
        return AgeParse(None, AgeValidity.MALFORMED)
    if MIN_VALID_AGE <= years <= MAX_VALID_AGE:
        return AgeParse(years, AgeValidity.VALID)
    return AgeParse(years, AgeValidity.OUT_OF_RANGE)


_SEX_CODES = {"M": SexCategory.MALE, "F": SexCategory.FEMALE, "O": SexCategory.OTHER}


def normalize_sex(raw: Optional[str]) -> SexCategory:
    if raw is None:
        return SexCategory.MISSING
    return _SEX_CODES.get(raw.rstrip(" \x00"), SexCategory.MISSING)


class _Reader:
    """Bounds-checked little-endian reader over a seekable binary stream."""

    def __init__(self, fp: BinaryIO, size: int):
        self.fp = fp
        self.size = size

    @property
    def pos(self) -> int:
        return self.fp.tell()

    def remaining(self) -> int:
        return self.size - self.pos

    def read(self, n: int, element_offset: int, what: str) -> bytes:
        if n > self.remaining():
            raise Truncated(
                f"{what} needs {n} bytes, {self.remaining()} left in file", element_offset
            )
        return self.fp.read(n)

    def skip(self, n: int, element_offset: int, what: str) -> None:
        if n > self.remaining():
            raise Truncated(
                f"{what} declares {n} bytes, {self.remaining()} left in file", element_offset
            )
        self.fp.seek(n, io.SEEK_CUR)

    def peek_tag(self) -> Optional[tuple[int, int]]:
        if self.remaining() < 4:
            return None
        group, element = struct.unpack("<HH", self.fp.read(4))
        self.fp.seek(-4, io.SEEK_CUR)
        return group, element


def _read_element_header(reader: _Reader, explicit: bool):
    """Return (offset, tag, vr, length) for the element at the current position."""
    offset = reader.pos
    if reader.remaining() < 8:
        raise Truncated(f"element header needs 8 bytes, {reader.remaining()} left", offset)
    group, element, = struct.unpack("<HH", reader.read(4, offset, "tag"))
    tag = (group, element)
    if group == 0xFFFE:
        (length,) = struct.unpack("<I", reader.read(4, offset, "item length"))
        return offset, tag, None, length
    if not explicit:
        (length,) = struct.unpack("<I", reader.read(4, offset, "length"))
        return offset, tag, None, length
    vr = reader.read(2, offset, "VR")
    if not (vr.isalpha() and vr.isupper()):
        raise MalformedElement(
            f"invalid VR {vr!r} for tag ({group:04X},{element:04X})", offset
        )
    if vr in LONG_VRS:
        reader.read(2, offset, "reserved bytes")
        (length,) = struct.unpack("<I", reader.read(4, offset, "length"))
    else:
        (length,) = struct.unpack("<H", reader.read(2, offset, "length"))
    return offset, tag, vr.decode("ascii"), length


def _skip_undefined_sequence(reader: _Reader, explicit: bool, seq_offset: int) -> None:
    while True:
        offset, tag, _, length = _read_element_header(reader, explicit=False)
        if tag == SEQUENCE_DELIMITER:
            return
        if tag != ITEM:
            raise MalformedElement(
                f"expected item tag inside sequence, found ({tag[0]:04X},{tag[1]:04X})", offset
            )
        if length != UNDEFINED_LENGTH:
            reader.skip(length, offset, "sequence item")
            continue
        while True:
            inner_offset, inner_tag, inner_vr, inner_len = _read_element_header(reader, explicit)
            if inner_tag == ITEM_DELIMITER:
                break
            _skip_value(reader, explicit, inner_offset, inner_vr, inner_len)


def _skip_value(reader: _Reader, explicit: bool, offset: int, vr: Optional[str], length: int) -> None:
    if length == UNDEFINED_LENGTH:
        # undefined-length UN is encoded as an implicit-VR sequence
        _skip_undefined_sequence(reader, explicit and vr != "UN", offset)
    else:
        reader.skip(length, offset, "element value")


def _decode_string(raw: bytes) -> str:
    return raw.decode("latin-1").rstrip(" \x00")


def _decode_int(raw: bytes, vr: str) -> Optional[int]:
    if vr in ("US", "SS", "UL", "SL"):
        signed = vr.startswith("S")
        if len(raw) == 2:
            value = struct.unpack("<h" if signed else "<H", raw)[0]
        elif len(raw) == 4:
            value = struct.unpack("<i" if signed else "<I", raw)[0]
        else:
            return None
    else:
        try:
            value = int(float(_decode_string(raw).strip()))
        except ValueError:
            return None
    return value if value >= 1 else None


def _parse_stream(fp: BinaryIO, size: int, image_id: str) -> DicomHeader:
    reader = _Reader(fp, size)
    if size < PREAMBLE_LENGTH + len(MAGIC):
        raise MissingMagic(f"file is {size} bytes, shorter than preamble and magic", PREAMBLE_LENGTH)
    fp.seek(PREAMBLE_LENGTH)
    if fp.read(4) != MAGIC:
        raise MissingMagic("'DICM' not found after the 128-byte preamble", PREAMBLE_LENGTH)

    syntax_uid = None
    syntax_offset = reader.pos
    while True:
        tag = reader.peek_tag()
        if tag is None or tag[0] != 0x0002:
            break
        offset, tag, vr, length = _read_element_header(reader, explicit=True)
        if tag == TRANSFER_SYNTAX and length != UNDEFINED_LENGTH:
            syntax_offset = offset
            syntax_uid = _decode_string(reader.read(length, offset, "TransferSyntaxUID"))
        else:
            _skip_value(reader, True, offset, vr, length)

    if syntax_uid is None:
        raise UnsupportedTransferSyntax("file meta has no TransferSyntaxUID", syntax_offset)
    syntax = _SYNTAX_BY_UID.get(syntax_uid)
    if syntax is None:
        raise UnsupportedTransferSyntax(f"transfer syntax {syntax_uid!r}", syntax_offset)

    values: dict[tuple[int, int], object] = {}
    while reader.remaining() > 0:
        if reader.peek_tag() == PIXEL_DATA:
            break
        offset, tag, vr, length = _read_element_header(reader, syntax.explicit)
        if tag in _WANTED and length != UNDEFINED_LENGTH:
            raw = reader.read(length, offset, "element value")
            vr = vr or _IMPLICIT_VR[tag]
            if vr in ("US", "SS", "UL", "SL", "IS", "DS"):
                values[tag] = _decode_int(raw, vr)
            else:
                values[tag] = _decode_string(raw)
        else:
            _skip_value(reader, syntax.explicit, offset, vr, length)

    return DicomHeader(
        image_id=image_id,
        transfer_syntax=syntax,
        patient_age_raw=values.get(PATIENT_AGE),
        patient_sex_raw=values.get(PATIENT_SEX),
        photometric=values.get(PHOTOMETRIC),
        rows=values.get(ROWS),
        columns=values.get(COLUMNS),
        bits_allocated=values.get(BITS_ALLOCATED),
        number_of_frames=values.get(NUMBER_OF_FRAMES),
    )


def parse_dicom_header(data: bytes, image_id: str = "") -> DicomHeader:
    """Parse the header of an in-memory DICOM Part-10 file."""
    return _parse_stream(io.BytesIO(data), len(data), image_id)


def read_dicom_header(path: Union[str, os.PathLike]) -> DicomHeader:
    """Parse a file's header, reading only up to the Pixel Data element."""
    path = Path(path)
    with open(path, "rb") as fp:
        size = os.fstat(fp.fileno()).st_size
        return _parse_stream(fp, size, path.stem)


ScanEntry = tuple[str, Union[DicomHeader, DicomError]]

DEFAULT_EXTENSIONS = (".dicom", ".dcm")


def _scan_one(path: Path) -> ScanEntry:
    try:
        return path.stem, read_dicom_header(path)
    except DicomError as exc:
        return path.stem, exc
    except OSError as exc:
        return path.stem, FileUnreadable(str(exc), 0)


def scan_corpus(
    root: Union[str, os.PathLike],
    extensions: Optional[Iterable[str]] = DEFAULT_EXTENSIONS,
    max_workers: Optional[int] = None,
) -> list[ScanEntry]:
    """Parse every matching file under ``root`` (non-recursive).

    Per-file failures become error entries. The result is sorted by image id
    whatever the degree of parallelism.
    """
    root = Path(root)
    try:
        names = os.listdir(root)
    except OSError as exc:
        raise DirectoryUnreadable(f"cannot list {root}: {exc.strerror or exc}") from exc
    wanted = None if extensions is None else {e.lower() for e in extensions}
    paths = sorted(
        (root / n for n in names
         if (root / n).is_file() and (wanted is None or Path(n).suffix.lower() in wanted)),
        key=lambda p: (p.stem, p.name),
    )
    if max_workers == 1 or len(paths) < 2:
        return [_scan_one(p) for p in paths]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_scan_one, paths))


def headers_by_id(entries: Iterable[ScanEntry]) -> dict[str, Optional[DicomHeader]]:
    """Map image id to header, with ``None`` for files that failed to parse."""
    return {
        image_id: (h if isinstance(h, DicomHeader) else None) for image_id, h in entries
    }
