import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mtlab.formats import (FormatError, Report, container_from_bytes, container_to_bytes, parse_report,
                           report_to_text, tensor_from_bytes, tensor_to_bytes)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint32]),
                  hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
def test_tensor_round_trip_byte_exact(arr):
    data = tensor_to_bytes(arr)
    back = tensor_from_bytes(data)
    assert back.shape == arr.shape and back.dtype == arr.dtype
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()
    assert tensor_to_bytes(back) == data


def test_tensor_layout():
    data = tensor_to_bytes(np.array([[1, 2, 3]], dtype=np.uint32))
    assert data[:4] == b"MTL1"
    assert data[4:8] == (1).to_bytes(4, "little")
    assert data[8] == 2 and data[9] == 2
    assert int.from_bytes(data[10:18], "little") == 1 and int.from_bytes(data[18:26], "little") == 3
    assert len(data) == 26 + 12 + 4


def test_tensor_rejections():
    good = tensor_to_bytes(np.arange(4.0))
    with pytest.raises(FormatError, match="CRC"):
        tensor_from_bytes(good[:-5] + bytes([good[-5] ^ 1]) + good[-4:])
    with pytest.raises(FormatError, match="version"):
        tensor_from_bytes(good[:4] + (2).to_bytes(4, "little") + good[8:])
    with pytest.raises(FormatError, match="truncated"):
        tensor_from_bytes(good[:-1])
    with pytest.raises(FormatError, match="magic"):
        tensor_from_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="trailing"):
        tensor_from_bytes(good + b"\0")
    with pytest.raises(FormatError):
        tensor_to_bytes(np.array([-1]))
    with pytest.raises(FormatError):
        tensor_to_bytes(np.array(["a"]))


def test_container_round_trip():
    blocks = [("a", np.arange(3.0)), ("b.c", np.zeros((2, 2), np.float32)), ("ids", np.arange(5, dtype=np.uint32))]
    data = container_to_bytes(b"TEST", {"z": 1, "a": [1, 2], "s": "é"}, blocks)
    header, back = container_from_bytes(data, b"TEST")
    assert header == {"z": 1, "a": [1, 2], "s": "é"}
    assert [n for n, _ in back] == ["a", "b.c", "ids"]
    assert container_to_bytes(b"TEST", header, back) == data
    with pytest.raises(FormatError, match="magic"):
        container_from_bytes(data, b"OTHR")
    with pytest.raises(FormatError, match="version"):
        container_from_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:], b"TEST")


def test_report_round_trip():
    r = Report(["task", "value", "ok"], [["phone", 0.125, True], ["spk", 1e-17, False]], {"config_hash": "abc"})
    text = report_to_text(r)
    assert text.startswith("# mtlab-report 1\n# config_hash: abc\ntask\tvalue\tok\n")
    back = parse_report(text)
    assert back.meta == {"config_hash": "abc"} and float(back.column("value")[1]) == 1e-17
    assert report_to_text(back) == text
    with pytest.raises(FormatError):
        report_to_text(Report(["a"], [["x\ty"]]))
    with pytest.raises(FormatError):
        parse_report("a\tb\n")
