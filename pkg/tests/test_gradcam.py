import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpaat.data import read_netpbm
from dpaat.gradcam import cam, channel_weights, grad_cam, normalize, read_map_csv, render, upsample_bilinear
from dpaat.models import build_model, mlp, small_cnn


def test_weights_mean():
    acts = np.zeros((2, 2, 2))
    np.testing.assert_array_equal(channel_weights(acts, np.ones((2, 2, 2))), [1.0, 1.0])
    np.testing.assert_array_equal(channel_weights(acts, np.zeros((2, 2, 2))), [0.0, 0.0])
    g = np.zeros((1, 2, 2))
    g[0] = [[1, 2], [3, 4]]
    assert channel_weights(acts[:1], g)[0] == 2.5


def test_weights_shape_mismatch():
    with pytest.raises(ValueError):
        channel_weights(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)))


def test_cam_relu_and_cancellation():
    a = np.array([[[-1.0, 2.0], [0.0, 3.0]]])
    np.testing.assert_array_equal(cam(a, np.array([1.0])), [[0, 2], [0, 3]])
    np.testing.assert_array_equal(cam(a, np.array([0.0])), np.zeros((2, 2)))
    two = np.concatenate([a, a])
    np.testing.assert_array_equal(cam(two, np.array([1.0, -1.0])), np.zeros((2, 2)))


def test_constant_map_normalizes_to_zero():
    assert np.array_equal(normalize(np.full((3, 3), 4.0)), np.zeros((3, 3)))


def test_upsample_keeps_corners():
    up = upsample_bilinear(np.array([[0.0, 1.0], [0.0, 0.0]]), (4, 4))
    assert up[0, 3] == 1.0 and up.max() == 1.0
    assert up[0, 0] == up[3, 0] == up[3, 3] == 0.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(1e-3, 1e3))
def test_cam_invariants(seed, c):
    rng = np.random.default_rng(seed)
    acts = rng.normal(size=(4, 5, 5))
    grads = rng.normal(size=(4, 5, 5))
    raw = cam(acts, channel_weights(acts, grads))
    assert np.all(raw >= 0)
    scaled = cam(acts, channel_weights(acts, c * grads))
    np.testing.assert_allclose(scaled, c * raw, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(normalize(upsample_bilinear(scaled, (10, 10))),
                               normalize(upsample_bilinear(raw, (10, 10))), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-2, 2), b=st.floats(-2, 2))
def test_weights_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    acts, g1, g2 = rng.normal(size=(3, 2, 4, 4))
    lhs = channel_weights(acts, a * g1 + b * g2)
    np.testing.assert_allclose(lhs, a * channel_weights(acts, g1) + b * channel_weights(acts, g2), atol=1e-12)


def test_grad_cam_on_model(tmp_path):
    params = build_model(small_cnn(), seed=0)
    image = np.random.default_rng(0).uniform(size=(1, 32, 32))
    res = grad_cam(params, image, target_class=1)
    assert res.map.shape == (13, 13) and res.upsampled.shape == (32, 32)
    assert res.upsampled.min() >= 0 and res.upsampled.max() <= 1
    pgm = render(res, tmp_path, "img7", "DPAAT")
    assert pgm.name == "img7_DPAAT_1.pgm"
    assert read_netpbm(pgm).shape == (1, 32, 32)
    np.testing.assert_allclose(read_map_csv(tmp_path / "img7_DPAAT_1.csv"), res.upsampled, atol=1e-6)


def test_grad_cam_first_layer_and_default_class():
    params = build_model(small_cnn(), seed=0)
    image = np.random.default_rng(1).uniform(size=(1, 32, 32))
    res = grad_cam(params, image, layer=0)
    assert res.map.shape == (30, 30)
    assert 0 <= res.target_class < 3


def test_grad_cam_needs_conv():
    params = build_model(mlp(), seed=0)
    with pytest.raises(ValueError):
        grad_cam(params, np.zeros((1, 8, 8)))
