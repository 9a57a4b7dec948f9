import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dni.tensor import NonFiniteError, ShapeError, axpy, stats, zeros

finite32 = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@pytest.mark.parametrize("shape, size", [([2, 2], 4), ([1], 1), ([3, 1, 9, 9], 243)])
def test_zeros(shape, size):
    z = zeros(shape)
    assert z.shape == tuple(shape)
    assert z.dtype == np.float32
    assert z.size == size and not z.any()


@pytest.mark.parametrize("shape", [[], [0], [2, 0, 3]])
def test_zeros_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        zeros(shape)


@pytest.mark.parametrize(
    "a, x, y, expected",
    [(1, [1, 2], [0, 0], [1, 2]), (0, [7, 7], [3, 4], [3, 4]), (0.5, [2, 4], [1, 1], [2, 3])],
)
def test_axpy_examples(a, x, y, expected):
    out = axpy(a, np.array(x, np.float32), np.array(y, np.float32))
    np.testing.assert_array_equal(out, expected)


def test_axpy_shape_mismatch():
    with pytest.raises(ShapeError):
        axpy(1.0, zeros([2]), zeros([3]))


def test_axpy_overflow_is_an_error():
    big = np.full(2, 3e38, np.float32)
    with pytest.raises(NonFiniteError):
        axpy(2.0, big, big)


@given(arrays(np.float32, st.integers(1, 30), elements=finite32))
def test_axpy_identity_bit_exact(x):
    out = axpy(1.0, x, zeros(x.shape))
    assert out.shape == x.shape
    # adding +0.0 turns -0.0 into +0.0; compare values, which is what float equality means
    np.testing.assert_array_equal(out, x)


def test_stats_examples():
    assert stats(np.ones(4, np.float32)) == (1.0, 0.0)
    mean, norm = stats(np.array([0, 2], np.float32))
    assert mean == 1.0 and norm == pytest.approx(math.sqrt(2), abs=1e-15)


def test_stats_against_two_pass_oracle():
    f = np.random.default_rng(7).standard_normal((9, 9)).astype(np.float32)
    vals = [float(v) for v in f.reshape(-1)]
    mean = math.fsum(vals) / len(vals)
    norm = math.sqrt(math.fsum((v - mean) ** 2 for v in vals))
    m, n = stats(f)
    assert m == pytest.approx(mean, abs=1e-12)
    assert n == pytest.approx(norm, rel=1e-12)


@settings(max_examples=50)
@given(
    arrays(np.float32, st.integers(2, 40), elements=st.floats(-10, 10, width=32)),
    st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3),
    st.floats(-5, 5),
)
def test_stats_affine(x, a, b):
    mean, norm = stats(x)
    m2, n2 = stats(a * x.astype(np.float64) + b)
    assert m2 == pytest.approx(a * mean + b, rel=1e-5, abs=1e-5)
    assert n2 == pytest.approx(abs(a) * norm, rel=1e-5, abs=1e-5)
