import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softalign.errors import InvalidArgumentError
from softalign.initialization import (InitConfig, init_feedback, init_forward_plain, initialize,
                                      soft_align_init)
from softalign.metrics import alignment_angles, layer_angles


def test_plain_std_matches_fan_in():
    params = init_forward_plain([512, 512], math.sqrt(2), np.random.default_rng(0))
    assert abs(params.weights[0].std() - 0.0625) < 0.001
    assert not params.biases[0].any()


def test_feedback_shapes_and_std():
    fb = init_feedback([7, 512, 300, 10], math.sqrt(2), np.random.default_rng(1))
    assert fb.matrices[0] is None
    assert fb.matrices[1].shape == (512, 300) and fb.matrices[2].shape == (300, 10)
    # fan_in of layer 1 is 512
    assert abs(fb.matrices[1].std() - math.sqrt(2 / 512)) < 0.001


def test_theta_zero_gives_transpose():
    rng = np.random.default_rng(2)
    params, fb = initialize([10, 8, 6, 4], "ifa", InitConfig(theta_init=0.0), rng)
    for l in (1, 2):
        np.testing.assert_array_equal(params.weights[l], fb.matrices[l].T)


def test_theta_ninety_is_independent():
    rng = np.random.default_rng(3)
    params, fb = initialize([10, 200, 200, 4], "ifa", InitConfig(theta_init=90.0), rng)
    assert abs(layer_angles(params, fb)[0].mean - 90.0) < 2.0


def test_theta_ninety_ignores_feedback():
    # W = R exactly, so the forward weights carry no information about B (same law as FA)
    dims = [6, 9, 7, 3]
    params = init_forward_plain(dims, math.sqrt(2), np.random.default_rng(0))
    fb1 = init_feedback(dims, math.sqrt(2), np.random.default_rng(1))
    fb2 = init_feedback(dims, 3.0, np.random.default_rng(2))
    w1 = soft_align_init(fb1, 90.0, math.sqrt(2), np.random.default_rng(3), params).weights
    w2 = soft_align_init(fb2, 90.0, math.sqrt(2), np.random.default_rng(3), params).weights
    for a, b in zip(w1, w2):
        np.testing.assert_array_equal(a, b)


def test_layer_zero_untouched_by_soft_alignment():
    rng = np.random.default_rng(4)
    plain = init_forward_plain([10, 8, 4], 1.0, rng)
    fb = init_feedback([10, 8, 4], 1.0, rng)
    out = soft_align_init(fb, 30.0, 1.0, rng, plain)
    np.testing.assert_array_equal(out.weights[0], plain.weights[0])


@pytest.mark.parametrize("theta", [0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0])
def test_measured_angle_near_theta(theta):
    rng = np.random.default_rng(int(theta))
    fb = init_feedback([512, 512, 512], math.sqrt(2), rng)
    params = soft_align_init(fb, theta, math.sqrt(2), rng,
                             init_forward_plain([512, 512, 512], math.sqrt(2), rng))
    stats = alignment_angles(params.weights[1], fb.matrices[1])
    assert abs(stats.mean - theta) < 2.0


def test_angle_monotone_in_theta():
    means = []
    for theta in range(0, 91, 10):
        rng = np.random.default_rng(11)
        params, fb = initialize([64, 256, 256, 10], "ifa", InitConfig(theta_init=theta), rng)
        means.append(layer_angles(params, fb)[0].mean)
    assert all(b > a for a, b in zip(means, means[1:]))


@pytest.mark.parametrize("theta", [0.0, 45.0, 90.0])
def test_variance_preserved_when_a_equals_b(theta):
    rng = np.random.default_rng(5)
    params, _ = initialize([16, 400, 400, 10], "ifa", InitConfig(theta_init=theta), rng)
    assert abs(params.weights[1].std() - math.sqrt(2 / 400)) < 0.002


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 90.0), st.integers(0, 10_000))
def test_soft_init_reproducible(theta, seed):
    cfg = InitConfig(theta_init=theta)
    a, fa = initialize([5, 6, 3], "ifa", cfg, np.random.default_rng(seed))
    b, fb = initialize([5, 6, 3], "ifa", cfg, np.random.default_rng(seed))
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(fa.matrices[1], fb.matrices[1])


def test_bp_and_fa_share_forward_weights():
    a, _ = initialize([5, 6, 3], "bp", InitConfig(), np.random.default_rng(9))
    b, _ = initialize([5, 6, 3], "fa", InitConfig(), np.random.default_rng(9))
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("kwargs", [dict(theta_init=-1.0), dict(theta_init=91.0),
                                    dict(a=0.0), dict(b=-1.0)])
def test_invalid_config(kwargs):
    with pytest.raises(InvalidArgumentError):
        InitConfig(**kwargs)


def test_unknown_rule():
    with pytest.raises(InvalidArgumentError):
        initialize([3, 2], "dfa", InitConfig(), np.random.default_rng(0))
