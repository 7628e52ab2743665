import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dyncausal.io import FormatError, dumps_bundle, load_bundle, loads_bundle, save_bundle

_shapes = hnp.array_shapes(min_dims=0, max_dims=3, max_side=5)


@settings(max_examples=40, deadline=None)
@given(f=hnp.arrays(np.float64, _shapes), b=hnp.arrays(np.bool_, _shapes),
       i=hnp.arrays(np.int64, _shapes), meta=st.dictionaries(st.text(max_size=5),
                                                             st.integers(), max_size=3))
def test_bundle_round_trip_is_bit_exact(f, b, i, meta):
    arrays, m = loads_bundle(dumps_bundle(b"TEST", {"f": f, "b": b, "i": i}, meta), b"TEST")
    assert m == meta
    assert arrays["f"].tobytes() == f.astype("<f8").tobytes()
    assert np.array_equal(arrays["b"], b) and arrays["b"].dtype == bool
    assert np.array_equal(arrays["i"], i)


def test_file_round_trip(tmp_path):
    n = save_bundle(tmp_path / "x.bin", b"ABCD", {"a": np.arange(3.0)}, {"k": 1})
    assert n == (tmp_path / "x.bin").stat().st_size
    arrays, meta = load_bundle(tmp_path / "x.bin", b"ABCD")
    assert meta == {"k": 1} and np.array_equal(arrays["a"], [0.0, 1.0, 2.0])


def test_wrong_magic_and_truncation():
    data = dumps_bundle(b"ABCD", {"a": np.ones(10)})
    with pytest.raises(FormatError):
        loads_bundle(data, b"WXYZ")
    with pytest.raises(FormatError):
        loads_bundle(data[:-8], b"ABCD")
    with pytest.raises(FormatError):
        loads_bundle(data[:3], b"ABCD")


def test_unsupported_version():
    data = dumps_bundle(b"ABCD", {}, version=9)
    with pytest.raises(FormatError):
        loads_bundle(data, b"ABCD")


def test_rejects_bad_magic_length_and_dtype():
    with pytest.raises(ValueError):
        dumps_bundle(b"AB", {})
    with pytest.raises(TypeError):
        dumps_bundle(b"ABCD", {"s": np.array(["x"])})
