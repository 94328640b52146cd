"""Versioned little-endian binary formats and the TSV report format.

TENSOR (``MTL1``)::

    magic "MTL1" | version u32 | dtype u8 (0=f32, 1=f64, 2=u32) | ndim u8
    | dims u64 x ndim | payload (row-major, little-endian) | crc32(payload) u32

Containers (``TGTS``, ``CKPT``, ``RVQM``, ``CDBK``) share one layout::

    magic (4 bytes) | version u32 | header_len u32 | header (UTF-8 JSON, sorted keys)
    | n_blocks u32 | n_blocks x (name_len u16 | name UTF-8 | TENSOR)

REPORT is UTF-8 TSV preceded by ``# key: value`` comment lines, the first of
which is ``# mtlab-report <version>`` and one of which is ``config_hash``.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

TENSOR_MAGIC = b"MTL1"
TENSOR_VERSION = 1
CONTAINER_VERSION = 1
REPORT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
_CODES = {np.dtype("=f4"): 0, np.dtype("=f8"): 1, np.dtype("=u4"): 2}


class FormatError(ValueError):
    pass


# -- TENSOR -----------------------------------------------------------------

def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind in "iu" and arr.dtype != np.uint32:
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise FormatError("integer tensor does not fit u32")
        arr = arr.astype(np.uint32)
    code = _CODES.get(np.dtype(arr.dtype.str.replace(">", "<").replace("<", "=")))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    head = TENSOR_MAGIC + struct.pack("<IBB", TENSOR_VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def read_tensor_from(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, code, ndim = struct.unpack("<IBB", _read_exact(stream, 6))
    if version != TENSOR_VERSION:
        raise FormatError(f"tensor version {version} unsupported (expected {TENSOR_VERSION})")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(stream, 8 * ndim))
    dt = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    payload = _read_exact(stream, nbytes)
    (crc,) = struct.unpack("<I", _read_exact(stream, 4))
    if crc != zlib.crc32(payload):
        raise FormatError("tensor CRC mismatch")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def tensor_from_bytes(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    arr = read_tensor_from(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after tensor")
    return arr


def _read_exact(stream, n) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


# -- containers -------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def container_to_bytes(magic: bytes, header: dict, blocks: list[tuple[str, np.ndarray]]) -> bytes:
    if len(magic) != 4:
        raise FormatError("magic must be 4 bytes")
    hdr = canonical_json(header).encode("utf-8")
    out = [magic, struct.pack("<II", CONTAINER_VERSION, len(hdr)), hdr, struct.pack("<I", len(blocks))]
    for name, arr in blocks:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(tensor_to_bytes(arr))
    return b"".join(out)


def container_from_bytes(data: bytes, magic: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    stream = io.BytesIO(data)
    got = stream.read(4)
    if got != magic:
        raise FormatError(f"expected {magic!r} file, got magic {got!r}")
    version, hlen = struct.unpack("<II", _read_exact(stream, 8))
    if version != CONTAINER_VERSION:
        raise FormatError(f"{magic.decode()} version {version} unsupported (expected {CONTAINER_VERSION})")
    header = json.loads(_read_exact(stream, hlen).decode("utf-8"))
    (n,) = struct.unpack("<I", _read_exact(stream, 4))
    blocks = []
    for _ in range(n):
        (ln,) = struct.unpack("<H", _read_exact(stream, 2))
        name = _read_exact(stream, ln).decode("utf-8")
        blocks.append((name, read_tensor_from(stream)))
    if stream.read(1):
        raise FormatError("trailing bytes after container")
    return header, blocks


# -- REPORT -----------------------------------------------------------------

@dataclass
class Report:
    columns: list[str]
    rows: list[list[str]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def column(self, name) -> list[str]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    s = str(v)
    if "\t" in s or "\n" in s:
        raise FormatError(f"cell contains tab/newline: {s!r}")
    return s


def report_to_text(report: Report) -> str:
    lines = [f"# mtlab-report {REPORT_VERSION}"]
    for k, v in report.meta.items():
        if ":" in k or "\n" in str(v):
            raise FormatError(f"bad report meta entry {k!r}")
        lines.append(f"# {k}: {v}")
    lines.append("\t".join(report.columns))
    for row in report.rows:
        if len(row) != len(report.columns):
            raise FormatError(f"row has {len(row)} cells, header has {len(report.columns)}")
        lines.append("\t".join(format_cell(c) for c in row))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Report:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("# mtlab-report "):
        raise FormatError("missing report signature line")
    version = int(lines[0].split()[-1])
    if version != REPORT_VERSION:
        raise FormatError(f"report version {version} unsupported")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        k, _, v = lines[i][2:].partition(": ")
        meta[k] = v
        i += 1
    if i >= len(lines):
        raise FormatError("report has no header row")
    columns = lines[i].split("\t")
    rows = [ln.split("\t") for ln in lines[i + 1:]]
    for n, r in enumerate(rows):
        if len(r) != len(columns):
            raise FormatError(f"report row {n + 1} has {len(r)} cells, header has {len(columns)}")
    return Report(columns, rows, meta)
