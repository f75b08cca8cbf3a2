"""File formats.

Binary containers (little-endian throughout)::

    magic      4 bytes   b"SIFT" increment | b"SIFM" mask | b"SIFC" dense checkpoint
    version    u32
    dtype tag  u32       1 = float32, 2 = float64 (0 for masks)
    n_tensors  u32
    records    n_tensors times:
        name_len u32, name utf-8
        rank     u32, extents u64 * rank
        count    u64
        indices  u64 * count   (strictly increasing; absent in checkpoints)
        values   dtype * count (absent in masks)
    meta_len   u32, meta utf-8 JSON (masks only; empty otherwise)
    crc32      u32 of every byte between the magic and the checksum

Scans go to CSV with ``#``-prefixed metadata lines; reports to sorted,
indented JSON.  Floats are written with Python's shortest round-trip repr.
"""
from __future__ import annotations

import io
import json
import math
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
MAGIC_INCREMENT = b"SIFT"
MAGIC_MASK = b"SIFM"
MAGIC_CHECKPOINT = b"SIFC"
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(ValueError):
    code = 10


class BadMagicError(FormatError):
    code = 11


class UnsupportedVersionError(FormatError):
    code = 12


class ChecksumError(FormatError):
    code = 13


class MonotonicityError(FormatError):
    code = 14


class TruncatedFileError(FormatError):
    code = 15


# ----------------------------------------------------------------------
# binary containers

def _encode(magic: bytes, dtype, records, meta: dict | None = None, version: int = FORMAT_VERSION) -> bytes:
    body = io.BytesIO()
    tag = 0 if dtype is None else _DTYPE_TAGS[np.dtype(dtype).newbyteorder("<")]
    body.write(struct.pack("<III", version, tag, len(records)))
    for name, shape, idx, vals in records:
        raw = name.encode("utf-8")
        body.write(struct.pack("<I", len(raw)))
        body.write(raw)
        body.write(struct.pack("<I", len(shape)))
        body.write(struct.pack(f"<{len(shape)}Q", *shape))
        count = idx.size if idx is not None else vals.size
        body.write(struct.pack("<Q", count))
        if idx is not None:
            idx = np.asarray(idx)
            n = int(np.prod(shape))
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= n):
                raise MonotonicityError(f"{name!r}: indices must be strictly increasing and < {n}")
            body.write(idx.astype("<u8").tobytes())
        if vals is not None:
            body.write(np.ascontiguousarray(vals).astype(np.dtype(dtype).newbyteorder("<")).tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8") if meta else b""
    body.write(struct.pack("<I", len(blob)))
    body.write(blob)
    payload = body.getvalue()
    return magic + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError("file ends inside a record")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode(data: bytes, magic: bytes, with_idx: bool, with_vals: bool):
    if len(data) < 8:
        raise TruncatedFileError("file too short")
    if data[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {data[:4]!r}")
    payload, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("CRC32 mismatch")
    r = _Reader(payload)
    version, tag, count = r.unpack("<III")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} (supported: {FORMAT_VERSION})")
    dtype = None
    if with_vals:
        if tag not in _TAG_DTYPES:
            raise FormatError(f"unknown element-type tag {tag}")
        dtype = _TAG_DTYPES[tag]
    records = []
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = tuple(int(e) for e in r.unpack(f"<{rank}Q"))
        (k,) = r.unpack("<Q")
        idx = vals = None
        if with_idx:
            idx = np.frombuffer(r.take(8 * k), dtype="<u8").astype(np.int64)
            n = int(np.prod(shape))
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[-1] >= n):
                raise MonotonicityError(f"{name!r}: indices not strictly increasing below {n}")
        if with_vals:
            vals = np.frombuffer(r.take(dtype.itemsize * k), dtype=dtype).astype(dtype.newbyteorder("="))
        records.append((name, shape, idx, vals))
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8")) if mlen else {}
    if r.pos != len(payload):
        raise FormatError("trailing bytes after last record")
    return dtype, records, meta


def _write_bytes(path, blob: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(blob)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def encode_increment(increment) -> bytes:
    entries = increment.entries
    dtypes = {e.values.dtype for e in entries.values()}
    if len(dtypes) > 1:
        raise FormatError(f"mixed element types in increment: {dtypes}")
    dtype = dtypes.pop() if dtypes else np.dtype(np.float64)
    recs = [(n, tuple(e.shape), e.indices, e.values) for n, e in sorted(entries.items())]
    return _encode(MAGIC_INCREMENT, dtype, recs)


def decode_increment(data: bytes):
    from .sift import IncrementEntry, SparseIncrement

    _, recs, _ = _decode(data, MAGIC_INCREMENT, True, True)
    return SparseIncrement({n: IncrementEntry(shape, idx, vals) for n, shape, idx, vals in recs})


def save_increment(path, increment) -> None:
    _write_bytes(path, encode_increment(increment))


def load_increment(path):
    return decode_increment(_read_bytes(path))


def save_mask(path, mask) -> None:
    recs = [(n, tuple(mask.shapes[n]), mask.indices[n], None) for n in mask.names]
    meta = {"rate": mask.rate, "granularity": mask.granularity, "provenance": mask.provenance,
            "calibration_batches": mask.calibration_batches}
    _write_bytes(path, _encode(MAGIC_MASK, None, recs, meta))


def load_mask(path):
    from .sift import MaskSelection

    _, recs, meta = _decode(_read_bytes(path), MAGIC_MASK, True, False)
    return MaskSelection({n: idx for n, _, idx, _ in recs}, {n: s for n, s, _, _ in recs},
                         meta["rate"], meta["granularity"], meta["provenance"], meta["calibration_batches"])


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    dtypes = {v.dtype for v in params.values()}
    if len(dtypes) != 1:
        raise FormatError(f"checkpoint needs a single element type, got {dtypes}")
    recs = [(n, tuple(v.shape), None, v.reshape(-1)) for n, v in params.items()]
    _write_bytes(path, _encode(MAGIC_CHECKPOINT, dtypes.pop(), recs))


def load_checkpoint(path):
    from .models import ParamSet

    _, recs, _ = _decode(_read_bytes(path), MAGIC_CHECKPOINT, False, True)
    return ParamSet((n, vals.reshape(shape)) for n, shape, _, vals in recs)


# ----------------------------------------------------------------------
# text outputs

def fmt_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def scan_csv_text(scan) -> str:
    lines = [f"# kind: {'scan-2d' if scan.is_2d else 'scan-1d'}"]
    for k in sorted(scan.meta):
        lines.append(f"# {k}: {scan.meta[k]}")
    if scan.is_2d:
        lines.append("alpha,beta,loss,flag")
        for i, a in enumerate(scan.alphas):
            for j, b in enumerate(scan.betas):
                v = scan.losses[i, j]
                lines.append(f"{fmt_float(a)},{fmt_float(b)},{fmt_float(v)},{0 if math.isfinite(v) else 1}")
    else:
        lines.append("alpha,loss,flag")
        for a, v in zip(scan.alphas, scan.losses):
            lines.append(f"{fmt_float(a)},{fmt_float(v)},{0 if math.isfinite(v) else 1}")
    return "\n".join(lines) + "\n"


def write_scan_csv(path, scan) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(scan_csv_text(scan))


def read_scan_csv(path):
    from .landscape import LandscapeScan

    meta, rows, header = {}, [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                k, _, v = line[2:].partition(": ")
                meta[k] = v
            elif header is None:
                header = line.split(",")
            elif line:
                rows.append([float(c) for c in line.split(",")])
    kind = meta.pop("kind")
    arr = np.array(rows, dtype=np.float64)
    if kind == "scan-1d":
        return LandscapeScan(arr[:, 0].tolist(), arr[:, 1].copy(), None, arr[:, 2] != 0, meta)
    alphas = list(dict.fromkeys(arr[:, 0].tolist()))
    betas = list(dict.fromkeys(arr[:, 1].tolist()))
    losses = arr[:, 2].reshape(len(alphas), len(betas))
    return LandscapeScan(alphas, losses, betas, arr[:, 3].reshape(losses.shape) != 0, meta)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if hasattr(o, "as_dict"):
        return o.as_dict()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def report_json_text(report) -> str:
    return json.dumps(report, sort_keys=True, indent=2, default=_jsonable) + "\n"


def write_report_json(path, report) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_json_text(report))


def write_metrics_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no metric rows")
    cols = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(fmt_float(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
