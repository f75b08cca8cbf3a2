import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siftlab.landscape import LandscapeScan
from siftlab.models import ModelConfig, build_model
from siftlab.persistence import (BadMagicError, ChecksumError, FormatError, MonotonicityError,
                                 TruncatedFileError, UnsupportedVersionError, decode_increment,
                                 encode_increment, fmt_float, load_checkpoint, load_increment, load_mask,
                                 read_scan_csv, report_json_text, save_checkpoint, save_increment, save_mask,
                                 scan_csv_text, write_report_json, write_scan_csv)
from siftlab.sift import IncrementEntry, SparseIncrement, random_mask


def _raw_increment(records, version=1, tag=2, magic=b"SIFT"):
    """Hand-rolled writer for the increment layout, independent of the library encoder."""
    body = struct.pack("<III", version, tag, len(records))
    for name, shape, idx, vals in records:
        raw = name.encode()
        body += struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(shape))
        body += b"".join(struct.pack("<Q", e) for e in shape)
        body += struct.pack("<Q", len(idx))
        body += b"".join(struct.pack("<Q", i) for i in idx)
        body += b"".join(struct.pack("<d", v) for v in vals)
    body += struct.pack("<I", 0)
    return magic + body + struct.pack("<I", zlib.crc32(body))


def _increment(seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    mask = random_mask({"a": (4, 5), "b": 7}, 0.3, seed)
    return SparseIncrement({n: IncrementEntry(tuple(mask.shapes[n]), mask.indices[n],
                                              rng.standard_normal(mask.indices[n].size).astype(dtype))
                            for n in mask.names})


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_increment_round_trip(tmp_path, dtype):
    inc = _increment(dtype=dtype)
    save_increment(tmp_path / "d.bin", inc)
    assert load_increment(tmp_path / "d.bin").equals(inc)


def test_library_encoder_matches_hand_layout():
    inc = SparseIncrement({"w": IncrementEntry((2, 3), np.array([1, 4]), np.array([0.5, -2.0]))})
    assert encode_increment(inc) == _raw_increment([("w", (2, 3), [1, 4], [0.5, -2.0])])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([np.float32, np.float64]))
def test_round_trip_property(seed, dtype):
    inc = _increment(seed, dtype)
    assert decode_increment(encode_increment(inc)).equals(inc)


def test_special_values_survive():
    vals = np.array([np.nan, np.inf, -0.0, 5e-324])
    inc = SparseIncrement({"w": IncrementEntry((4,), np.arange(4), vals)})
    assert decode_increment(encode_increment(inc)).equals(inc)


def test_empty_increment_is_valid():
    blob = encode_increment(SparseIncrement())
    assert len(blob) == 4 + 12 + 4 + 4
    assert len(decode_increment(blob)) == 0


@pytest.mark.parametrize("pos", [4, 10, 20, -6, -1])
def test_corrupted_byte_fails_checksum(pos):
    blob = bytearray(encode_increment(_increment()))
    blob[pos] ^= 0x40
    with pytest.raises(ChecksumError):
        decode_increment(bytes(blob))


def test_bad_magic_version_and_truncation():
    good = encode_increment(_increment())
    with pytest.raises(BadMagicError):
        decode_increment(b"XXXX" + good[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_increment(_raw_increment([], version=2))
    with pytest.raises(TruncatedFileError):
        decode_increment(good[:6])
    with pytest.raises(ChecksumError):
        decode_increment(good[:-9] + good[-4:])
    assert issubclass(ChecksumError, FormatError)


def test_non_monotone_indices_rejected():
    with pytest.raises(MonotonicityError):
        decode_increment(_raw_increment([("w", (5,), [3, 1], [1.0, 2.0])]))
    with pytest.raises(MonotonicityError):
        decode_increment(_raw_increment([("w", (5,), [1, 5], [1.0, 2.0])]))
    bad = SparseIncrement({"w": IncrementEntry((5,), np.array([2, 2]), np.zeros(2))})
    with pytest.raises(MonotonicityError):
        encode_increment(bad)


def test_mask_and_checkpoint_round_trip(tmp_path):
    mask = random_mask({"a": (3, 3), "b": 10}, 0.4, 2)
    save_mask(tmp_path / "m.bin", mask)
    back = load_mask(tmp_path / "m.bin")
    assert back.rate == 0.4 and back.provenance == mask.provenance
    assert all(np.array_equal(back.indices[n], mask.indices[n]) for n in mask.names)
    params = build_model(ModelConfig(hidden=8, heads=2))
    save_checkpoint(tmp_path / "c.bin", params)
    got = load_checkpoint(tmp_path / "c.bin")
    assert list(got) == list(params) and all(got[k].tobytes() == params[k].tobytes() for k in params)
    with pytest.raises(BadMagicError):
        load_increment(tmp_path / "c.bin")


def _scan_1d():
    return LandscapeScan([-0.5, 0.0, 0.5], np.array([1.25, float("nan"), 0.1]), None,
                         np.array([False, True, False]), {"seed": 3})


def test_scan_csv_schema_and_determinism(tmp_path):
    scan = _scan_1d()
    write_scan_csv(tmp_path / "a.csv", scan)
    write_scan_csv(tmp_path / "b.csv", scan)
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == "# kind: scan-1d"
    body = [l for l in lines if not l.startswith("#")]
    assert body[0] == "alpha,loss,flag"
    assert body[2] == "0.0,nan,1" and body[1] == "-0.5,1.25,0"
    back = read_scan_csv(tmp_path / "a.csv")
    assert back.alphas == scan.alphas and back.nonfinite.tolist() == [False, True, False]


def test_scan_2d_round_trip(tmp_path):
    losses = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
    scan = LandscapeScan([0.0, 1.0], losses, [-1.0, 0.0, 1.0], np.zeros((2, 3), bool), {})
    write_scan_csv(tmp_path / "s.csv", scan)
    back = read_scan_csv(tmp_path / "s.csv")
    assert back.betas == [-1.0, 0.0, 1.0] and back.losses.tobytes() == losses.tobytes()
    assert "alpha,beta,loss,flag" in scan_csv_text(scan)


def test_report_json_is_byte_deterministic(tmp_path):
    report = {"b": np.float64(0.1), "a": [1, 2], "z": {"y": np.arange(2), "x": 1e-300}}
    write_report_json(tmp_path / "r1.json", report)
    write_report_json(tmp_path / "r2.json", dict(reversed(list(report.items()))))
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    assert report_json_text(report).index('"a"') < report_json_text(report).index('"b"')


def test_fmt_float():
    assert [fmt_float(v) for v in (0.1, float("nan"), float("inf"), -float("inf"))] == ["0.1", "nan", "inf", "-inf"]
