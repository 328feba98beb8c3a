import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import bilerp, softmax_direct
from deformdet.kernels import (
    FeatureMap,
    bilinear_sample,
    bilinear_sample_grad,
    finite_diff_check,
    inverse_sigmoid,
    sigmoid,
    softmax,
    softmax_backward,
)

rng = np.random.default_rng(0)


def test_feature_map_validation():
    FeatureMap(np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((1, 0, 2)))
    with pytest.raises(ValueError):
        FeatureMap(np.full((1, 2, 2), np.nan))


def test_integer_point_returns_pixel():
    m = rng.normal(size=(3, 5, 6))
    assert np.array_equal(bilinear_sample(m, (3, 2)), m[:, 2, 3])


def test_cell_center_is_mean_of_corners():
    m = rng.normal(size=(2, 4, 4))
    expect = (m[:, 1, 1] + m[:, 1, 2] + m[:, 2, 1] + m[:, 2, 2]) / 4
    np.testing.assert_allclose(bilinear_sample(m, (1.5, 1.5)), expect, atol=1e-15)


def test_far_outside_reads_zero():
    assert not bilinear_sample(rng.normal(size=(3, 4, 4)), (-5, -5)).any()


def test_matches_four_term_formula():
    m = rng.normal(size=(3, 6, 7))
    for _ in range(50):
        p = rng.uniform(-1.5, 7.5, size=2)
        np.testing.assert_allclose(bilinear_sample(m, p), bilerp(m, *p), atol=1e-13)


def test_grad_one_hot_at_integer_point():
    m = rng.normal(size=(3, 4, 5))
    g, _ = bilinear_sample_grad(m, (2, 1), np.eye(3)[1])
    expect = np.zeros_like(m)
    expect[1, 1, 2] = 1.0
    assert np.array_equal(g, expect)


def test_constant_map_has_zero_location_grad():
    _, gp = bilinear_sample_grad(np.full((2, 4, 4), 3.0), (1.3, 2.7), rng.normal(size=2))
    np.testing.assert_allclose(gp, 0.0, atol=1e-14)


def test_grad_matches_finite_differences():
    for _ in range(20):
        m = rng.normal(size=(3, 5, 5))
        p = rng.uniform(0.1, 3.9, size=2)
        up = rng.normal(size=3)
        gm, gp = bilinear_sample_grad(m, p, up)
        rep = finite_diff_check(lambda x: float(up @ bilinear_sample(m, x)), p, gp)
        assert rep.max_rel_err < 1e-6
        rep = finite_diff_check(lambda x: float(up @ bilinear_sample(x, p)), m, gm)
        assert rep.max_rel_err < 1e-6


def test_gridline_uses_left_cell():
    # on x = 2 the derivative is the slope of the [1, 2] cell
    m = np.zeros((1, 1, 4))
    m[0, 0] = [0.0, 1.0, 5.0, 6.0]
    _, gp = bilinear_sample_grad(m, (2.0, 0.0), np.ones(1))
    assert gp[0] == pytest.approx(4.0)


@given(st.integers(0, 4), st.floats(0, 1, exclude_max=True), st.integers(0, 4))
def test_linear_along_x(i, t, row):
    m = np.random.default_rng(i).normal(size=(2, 5, 6))
    got = bilinear_sample(m, (i + t, row))
    np.testing.assert_allclose(got, (1 - t) * m[:, row, i] + t * m[:, row, i + 1], atol=1e-12)


@given(st.integers(1, 5), st.floats(0.2, 3.8))
def test_continuous_across_gridlines(i, y):
    m = np.random.default_rng(i).normal(size=(2, 5, 7))
    a = bilinear_sample(m, (i - 1e-9, y))
    b = bilinear_sample(m, (i + 1e-9, y))
    assert np.abs(a - b).max() < 1e-6 * np.abs(m).max()


@settings(max_examples=50)
@given(st.floats(0.01, 4.99), st.floats(0.01, 3.99))
def test_grad_map_partition_of_unity(x, y):
    g, _ = bilinear_sample_grad(np.zeros((2, 5, 6)), (x, y), np.ones(2))
    np.testing.assert_allclose(g.sum(axis=(1, 2)), 1.0, atol=1e-12)
    assert np.count_nonzero(g[0]) <= 4


def test_grad_map_zero_outside():
    g, _ = bilinear_sample_grad(np.ones((2, 3, 3)), (-4.0, 10.0), np.ones(2))
    assert not g.any()


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(5)), np.full(5, 0.2))
    v = rng.normal(size=7)
    np.testing.assert_allclose(softmax(v), softmax(v + 123.4), atol=1e-15)
    np.testing.assert_allclose(softmax(v), softmax_direct(v), atol=1e-15)
    assert softmax(v).sum() == pytest.approx(1.0, abs=1e-12)


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20))
def test_softmax_never_nan(v):
    out = softmax(np.array(v))
    assert np.all(np.isfinite(out)) and np.all(out <= 1) and abs(out.sum() - 1) < 1e-12


def test_softmax_backward_fd():
    v = rng.normal(size=(3, 6))
    g = rng.normal(size=(3, 6))
    analytic = softmax_backward(softmax(v), g)
    assert finite_diff_check(lambda x: float(np.sum(g * softmax(x))), v, analytic).max_rel_err < 1e-7


def test_inverse_sigmoid_examples():
    assert inverse_sigmoid(0.5) == 0.0
    assert inverse_sigmoid(0.0, 1e-5) == inverse_sigmoid(1e-5, 1e-5)
    assert inverse_sigmoid(0.0) == pytest.approx(np.log(1e-5 / (1 - 1e-5)), rel=1e-12)
    with pytest.raises(ValueError):
        inverse_sigmoid(0.3, eps=0.5)


@given(st.floats(1e-5, 1 - 1e-5))
def test_sigmoid_round_trip(p):
    assert sigmoid(inverse_sigmoid(p)) == pytest.approx(p, abs=1e-12)


def test_sigmoid_extremes_finite():
    out = sigmoid(np.array([-1e4, 0.0, 1e4]))
    assert np.array_equal(out, [0.0, 0.5, 1.0])


def test_fd_quadratic():
    x = rng.normal(size=10)
    assert finite_diff_check(lambda v: float(np.sum(v**2)), x, 2 * x).max_rel_err < 1e-8


def test_fd_detects_zeroed_gradient():
    x = rng.normal(size=10)
    rep = finite_diff_check(lambda v: float(np.sum(v**2)), x, np.zeros_like(x))
    assert rep.max_rel_err == pytest.approx(1.0)
    assert not rep.passed(1e-4)


def test_fd_rejects_bad_inputs():
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda v: float("nan"), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_check(lambda v: 0.0, np.zeros(2), np.zeros(2), step=0)
    with pytest.raises(ValueError):
        finite_diff_check(lambda v: 0.0, np.zeros(2), np.zeros(3))
