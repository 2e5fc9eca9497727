import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qarcnn.detector import (
    Box,
    Detector,
    GeneratorParams,
    apply_deltas,
    generate_detector,
    load_params,
    regression_targets,
    regressor_param_count,
    save_params,
    score_region,
)
from qarcnn.errors import DimensionError, FormatError


def test_identity_classifier_and_zero_regressor():
    p = GeneratorParams.zeros(2, 2, 3)
    p.W = np.eye(2)
    det = generate_detector(p, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(det.w_c, [1, 2])
    assert not det.w_r.any()


def test_zero_embedding_gives_zero_detector(rng):
    p = GeneratorParams.initialize(4, 6, 3, seed=1)
    p.b1[:] = 0
    det = generate_detector(p, np.zeros(4))
    assert not det.w_c.any() and not det.w_r.any()


def test_classifier_is_linear(rng):
    p = GeneratorParams.initialize(5, 7, 4, seed=2)
    v1, v2 = rng.normal(size=5), rng.normal(size=5)
    a, b = 0.7, -1.3
    lhs = generate_detector(p, a * v1 + b * v2).w_c
    rhs = a * generate_detector(p, v1).w_c + b * generate_detector(p, v2).w_c
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_score_region():
    det = lambda w: Detector(np.array(w, float), np.zeros((4, 2)))  # noqa: E731
    assert score_region(det([1, 0]), np.array([3.0, 5.0])) == 3
    assert score_region(det([0, 0]), np.array([3.0, 5.0])) == 0
    assert score_region(det([0.5, 2]), np.array([2.0, 3.0])) == pytest.approx(7.0)
    with pytest.raises(DimensionError):
        score_region(det([1, 0]), np.ones(3))


def test_regression_target_examples():
    np.testing.assert_allclose(regression_targets(Box(0, 0, 10, 10), Box(0, 0, 10, 10)), 0)
    np.testing.assert_allclose(regression_targets(Box(0, 0, 10, 10), Box(1, 2, 11, 12)), [0.1, 0.2, 0, 0], atol=1e-12)
    np.testing.assert_allclose(regression_targets(Box(0, 0, 10, 10), Box(-5, 0, 15, 10)), [0, 0, math.log(2), 0], atol=1e-12)


def test_apply_deltas_examples():
    assert apply_deltas(Box(0, 0, 10, 10), np.zeros(4)) == Box(0, 0, 10, 10)
    np.testing.assert_allclose(apply_deltas(Box(0, 0, 10, 10), [0.1, 0.2, 0, 0]), [1, 2, 11, 12], atol=1e-12)


box_st = st.tuples(
    st.floats(-100, 100), st.floats(-100, 100), st.floats(0.5, 100), st.floats(0.5, 100)
).map(lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_targets_round_trip(p, g):
    back = apply_deltas(p, regression_targets(p, g))
    np.testing.assert_allclose(back, g, rtol=1e-6, atol=1e-9)


def test_regressor_parameter_count():
    # 300-16(-4096): roughly 0.3M parameters
    n = regressor_param_count(300, 16, 4096)
    assert n == 300 * 16 + 16 + 4 * (16 * 4096 + 4096)
    assert round(n / 1e6, 1) == 0.3
    assert GeneratorParams.zeros(300, 4096, 16).num_regressor_params() == n


@pytest.mark.parametrize(
    "hidden, shared, millions, unit",
    [(16, True, 0.3, 0.1), (64, True, 1.1, 0.1), (256, True, 4.3, 0.1), (1024, True, 17, 1), (256, False, 4.5, 0.1)],
)
def test_regressor_parameter_count_variants(hidden, shared, millions, unit):
    # published counts are rounded to ``unit`` millions
    n = regressor_param_count(300, hidden, 4096, shared)
    assert abs(n / 1e6 - millions) <= unit / 2


def test_linear_regressor_counts_four_heads():
    assert regressor_param_count(300, None, 4096) == 4 * (300 * 4096 + 4096)


def test_params_round_trip(tmp_path):
    p = GeneratorParams.initialize(3, 5, 2, seed=3)
    save_params(p, tmp_path / "a.qarw")
    q = load_params(tmp_path / "a.qarw")
    save_params(q, tmp_path / "b.qarw")
    assert (tmp_path / "a.qarw").read_bytes() == (tmp_path / "b.qarw").read_bytes()
    for name, arr in p.arrays().items():
        np.testing.assert_array_equal(q.arrays()[name], arr.astype(np.float32))


def test_params_bad_file(tmp_path):
    path = tmp_path / "bad.qarw"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(FormatError):
        load_params(path)
    p = GeneratorParams.initialize(3, 5, 2)
    save_params(p, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_params(path)
