import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acg import numerics as nx


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(float(a[i][p]) * float(b[p][j]) for p in range(k)) for j in range(n)] for i in range(m)]


finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    out = nx.matmul(np.eye(2), [[3, 4], [5, 6]])
    np.testing.assert_array_equal(out, [[3, 4], [5, 6]])


def test_matmul_row_times_column():
    assert nx.matmul([[1, 2]], [[3], [4]])[0, 0] == 11


def test_matmul_shape_mismatch():
    with pytest.raises(nx.NumericsError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_against_triple_loop_7x5x3():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    expected = np.array(naive_matmul(a.tolist(), b.tolist()))
    np.testing.assert_allclose(nx.matmul(a, b), expected, rtol=1e-6, atol=1e-6)


def test_matmul_against_triple_loop_100_cases(f64):
    rng = np.random.default_rng(1)
    for _ in range(100):
        m, k, n = rng.integers(1, 9, size=3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        expected = np.array(naive_matmul(a.tolist(), b.tolist()))
        np.testing.assert_allclose(nx.matmul(a, b), expected, rtol=1e-5, atol=1e-12)


def test_matmul_rows_do_not_depend_on_batch():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((9, 64)), rng.standard_normal((64, 33))
    full = nx.matmul(a, b)
    for i in range(9):
        np.testing.assert_array_equal(nx.matmul(a[i:i + 1], b)[0], full[i])


def test_matmul_rejects_non_finite():
    with pytest.raises(nx.NumericsError):
        nx.matmul([[np.inf]], [[1.0]])


@pytest.mark.parametrize("scores, mask, expected", [
    ([0, 0], [0, 0], [0.5, 0.5]),
    ([0, 0], [nx.MASK_SENTINEL, 0], [0, 1]),
    ([math.log(2), 0, 0], [nx.MASK_SENTINEL, 0, 0], [0, 0.5, 0.5]),
])
def test_masked_softmax_examples(scores, mask, expected):
    out = nx.masked_softmax_row(scores, mask)
    np.testing.assert_allclose(out, expected, atol=1e-7)


def test_masked_positions_are_exact_zeros():
    out = nx.masked_softmax_row([50.0, 1.0, 2.0], [nx.MASK_SENTINEL, 0, 0])
    assert out[0] == 0.0


def test_softmax_all_masked_is_rejected():
    with pytest.raises(nx.NumericsError):
        nx.masked_softmax_row([1.0, 2.0], [nx.MASK_SENTINEL, nx.MASK_SENTINEL])


def test_softmax_non_finite_rejected():
    with pytest.raises(nx.NumericsError):
        nx.masked_softmax_row([np.nan, 0.0], [0, 0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 24), elements=finite))
def test_softmax_is_distribution(scores):
    with nx.precision("f64"):
        out = nx.masked_softmax_row(scores, np.zeros_like(scores))
    assert (out >= 0).all()
    assert abs(out.sum() - 1) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_masking_renormalizes_survivors(data):
    n = data.draw(st.integers(2, 24))
    scores = data.draw(arrays(np.float64, n, elements=finite))
    hidden = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    if hidden.all():
        hidden[data.draw(st.integers(0, n - 1))] = False
    with nx.precision("f64"):
        plain = nx.softmax_rows(scores[None])[0]
        masked = nx.masked_softmax_row(scores, np.where(hidden, nx.MASK_SENTINEL, 0.0))
    kept = plain[~hidden].sum()
    np.testing.assert_allclose(masked[~hidden], plain[~hidden] / kept, rtol=1e-5, atol=1e-12)
    assert (masked[hidden] == 0).all()


def test_rms_norm_unit_rows():
    np.testing.assert_allclose(nx.rms_norm(np.ones(4), np.ones(4), 1e-12), np.ones(4), atol=1e-6)


def test_rms_norm_zero_input():
    np.testing.assert_array_equal(nx.rms_norm(np.zeros(2), np.ones(2), 1e-6), [0.0, 0.0])


def test_rms_norm_hand_value():
    # rms of (3, 4) is sqrt(12.5)
    expected = np.array([3, 4]) / math.sqrt(12.5)
    np.testing.assert_allclose(nx.rms_norm([3.0, 4.0], np.ones(2), 0.0), expected, rtol=1e-6)
    np.testing.assert_allclose(expected, [0.8485, 1.1314], atol=1e-4)


def test_rms_norm_length_mismatch():
    with pytest.raises(nx.NumericsError):
        nx.rms_norm(np.ones(3), np.ones(2), 1e-6)


@pytest.mark.parametrize("v, u, expected", [
    ((1, 1), (1, 0), (0, 1)),
    ((2, 0), (1, 0), (0, 0)),
    ((0, 3), (1, 0), (0, 3)),
])
def test_project_out_examples(v, u, expected):
    np.testing.assert_allclose(nx.project_out(v, u), expected, atol=1e-7)


def test_project_out_length_mismatch():
    with pytest.raises(nx.NumericsError):
        nx.project_out([1.0, 2.0], [1.0])


def unit(v):
    return v / np.linalg.norm(v)


vectors = arrays(np.float64, 8, elements=st.floats(-100, 100, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vectors, vectors.filter(lambda x: np.linalg.norm(x) > 1e-3))
def test_project_out_properties(v, u):
    with nx.precision("f64"):
        u = unit(u)
        once = nx.project_out(v, u)
        twice = nx.project_out(once, u)
        assert abs(nx.dot(once, u)) <= 1e-5 * max(np.linalg.norm(v), 1e-12) + 1e-12
        np.testing.assert_allclose(twice, once, atol=1e-6)
        assert np.linalg.norm(once) <= np.linalg.norm(v) + 1e-9


def test_precision_switch():
    assert nx.get_dtype() == np.float32
    with nx.precision("f64"):
        assert nx.matmul([[1.0]], [[2.0]]).dtype == np.float64
    assert nx.get_dtype() == np.float32
    with pytest.raises(nx.NumericsError):
        nx.set_precision("f16")


def test_op_counter():
    with nx.count_ops() as c:
        nx.matmul(np.ones((2, 3)), np.ones((3, 4)))
        nx.record_forward_pass()
    assert (c.matmul_calls, c.matmul_flops, c.forward_passes) == (1, 48, 1)
    nx.matmul(np.ones((1, 1)), np.ones((1, 1)))
    assert c.matmul_calls == 1
