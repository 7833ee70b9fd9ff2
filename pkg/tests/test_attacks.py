import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpaat.attacks import (
    FGSM,
    IFGSM,
    INF,
    PGD,
    AttackSpec,
    attack,
    attack_dataset,
    batch_norms,
    fgsm,
    iterative_attack,
    project_to_ball,
    rescale_perturbation,
    sign,
)
from dpaat.data import synth
from dpaat.models import ArchSpec, build_model, cross_entropy, mlp, predict_proba
from dpaat.trainers import TrainConfig, train


def test_sign():
    np.testing.assert_array_equal(sign(np.array([-2.5, 0.0, 7.0])), [-1.0, 0.0, 1.0])


def test_project_l2():
    np.testing.assert_allclose(project_to_ball(np.array([3.0, 4.0]), 2, 1.0), [0.6, 0.8])


def test_project_linf():
    np.testing.assert_allclose(project_to_ball(np.array([0.5, -0.2]), INF, 0.3), [0.3, -0.2])


@pytest.mark.parametrize("p", [2, INF])
def test_project_interior_unchanged(p):
    d = np.array([[0.1, -0.05, 0.02]])
    assert np.array_equal(project_to_ball(d, p, 0.5), d)


def test_fgsm_single_pixel():
    spec = AttackSpec(FGSM, p=INF, epsilon=0.1)
    out = fgsm(None, np.array([[0.5]]), np.array([0]), spec, grad_fn=lambda xs: np.full_like(xs, 2.0),
               predict_fn=False)
    np.testing.assert_allclose(out.x_adv, [[0.6]])


def test_fgsm_zero_gradient():
    x = np.array([[0.2, 0.7]])
    spec = AttackSpec(FGSM, p=INF, epsilon=0.1)
    out = fgsm(None, x, np.array([0]), spec, grad_fn=np.zeros_like, predict_fn=False)
    assert np.array_equal(out.x_adv, x)


def test_zero_steps_rejected():
    spec = AttackSpec(PGD, p=2, epsilon=0.3, steps=0)
    with pytest.raises(ValueError):
        iterative_attack(None, np.zeros((1, 2)), np.array([0]), spec, grad_fn=np.zeros_like)


@pytest.fixture(scope="module")
def small_model():
    return build_model(mlp((1, 8, 8), 16, 3), seed=0)


@pytest.fixture(scope="module")
def small_batch():
    rng = np.random.default_rng(0)
    return rng.uniform(size=(6, 1, 8, 8)), rng.integers(0, 3, 6)


def test_one_step_ifgsm_equals_fgsm(small_model, small_batch):
    x, y = small_batch
    one = iterative_attack(small_model, x, y, AttackSpec(IFGSM, p=INF, epsilon=0.1, step=0.1, steps=1))
    ref = fgsm(small_model, x, y, AttackSpec(FGSM, p=INF, epsilon=0.1))
    assert np.array_equal(one.x_adv, ref.x_adv)


def test_one_step_pgd_equals_fgsm(small_model, small_batch):
    x, y = small_batch
    spec = AttackSpec(PGD, p=INF, epsilon=0.1, step=0.1, steps=1, random_start=False)
    one = iterative_attack(small_model, x, y, spec)
    ref = fgsm(small_model, x, y, AttackSpec(FGSM, p=INF, epsilon=0.1))
    assert np.array_equal(one.x_adv, ref.x_adv)


specs = st.builds(
    lambda method, p, eps, ratio, k, clamp, direction: AttackSpec(
        method, p=p, epsilon=eps, step=max(eps * ratio, 1e-3), steps=k,
        clamp_range=(0.0, 1.0) if clamp else None, step_direction=direction),
    st.sampled_from([FGSM, IFGSM, PGD]), st.sampled_from([2, INF]), st.floats(0.0, 2.0),
    st.floats(0.05, 2.0), st.integers(1, 6), st.booleans(), st.sampled_from(["sign", "normalized_gradient"]),
)


@settings(max_examples=60, deadline=None)
@given(spec=specs, seed=st.integers(0, 2**31 - 1))
def test_containment(small_model, spec, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(4, 1, 8, 8))
    y = rng.integers(0, 3, 4)
    out = attack(small_model, x, y, spec, seed=seed)
    assert np.all(batch_norms(out.x_adv - x, spec.p) <= spec.epsilon + 1e-6)
    if spec.clamp_range is not None:
        assert out.x_adv.min() >= 0.0 and out.x_adv.max() <= 1.0


def test_attack_dataset_matches_batches(small_model):
    rng = np.random.default_rng(2)
    x, y = rng.uniform(size=(10, 1, 8, 8)), rng.integers(0, 3, 10)
    spec = AttackSpec.from_name("3-PGD")
    a = attack_dataset(small_model, x, y, spec, batch_size=4, seed=5)
    b = attack_dataset(small_model, x, y, spec, batch_size=4, seed=5)
    assert np.array_equal(a.x_adv, b.x_adv)
    assert a.x_adv.shape == x.shape and a.success.shape == (10,)


def test_random_start_streams_are_per_example(small_model):
    # example i sees the same noise whichever batch slice it sits in
    rng = np.random.default_rng(3)
    x, y = rng.uniform(size=(4, 1, 8, 8)), rng.integers(0, 3, 4)
    spec = AttackSpec(PGD, p=2, epsilon=0.3, step=0.15, steps=1)
    full = attack(small_model, x, y, spec, seed=1, counters=(0,))
    head = attack(small_model, x[:2], y[:2], spec, seed=1, counters=(0,))
    np.testing.assert_array_equal(full.x_adv[:2], head.x_adv)


def test_from_name():
    assert AttackSpec.from_name("FGSM").p == INF
    s = AttackSpec.from_name("20-PGD")
    assert (s.method, s.p, s.steps, s.random_start) == (PGD, 2, 20, True)
    s = AttackSpec.from_name("10-IFGSM")
    assert (s.method, s.p, s.steps, s.random_start) == (IFGSM, INF, 10, False)
    with pytest.raises(ValueError):
        AttackSpec.from_name("PGD-20")


# -- linear-model optimum ---------------------------------------------------------

def linear_binary(seed, dim=8):
    arch = ArchSpec.from_id(f"in=1x1x{dim};dense2;softmax")
    params = build_model(arch, seed=seed)
    rng = np.random.default_rng(seed)
    params = params.replace({"dense1.weight": rng.normal(size=(2, dim)), "dense1.bias": rng.normal(size=2)})
    return params, rng.normal(size=(5, 1, 1, dim)), rng.integers(0, 2, 5)


def closed_form_max_loss(params, x, y, eps, dual_norm):
    w, b = params["dense1.weight"], params["dense1.bias"]
    flat = x.reshape(len(x), -1)
    sign_y = np.where(y == 1, 1.0, -1.0)
    d = (w[1] - w[0])[None] * sign_y[:, None]
    margin = np.sum(d * flat, axis=1) + (b[1] - b[0]) * sign_y
    worst = margin - eps * dual_norm(d)
    return np.log1p(np.exp(-worst))


@pytest.mark.parametrize("seed", range(5))
def test_fgsm_linear_optimum(seed):
    params, x, y = linear_binary(seed)
    eps = 0.25
    out = attack(params, x, y, AttackSpec(FGSM, p=INF, epsilon=eps))
    got = cross_entropy(predict_proba(params, out.x_adv), y)
    want = closed_form_max_loss(params, x, y, eps, lambda d: np.abs(d).sum(axis=1))
    np.testing.assert_allclose(got, want, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_pgd_l2_linear_optimum(seed):
    params, x, y = linear_binary(seed)
    eps = 0.5
    spec = AttackSpec(PGD, p=2, epsilon=eps, step=eps / 2, steps=20, step_direction="normalized_gradient")
    out = attack(params, x, y, spec, seed=seed)
    got = cross_entropy(predict_proba(params, out.x_adv), y)
    want = closed_form_max_loss(params, x, y, eps, lambda d: np.linalg.norm(d, axis=1))
    assert np.all(np.abs(got - want) / want <= 1e-3)


# -- rescale ------------------------------------------------------------------------

def test_rescale_example():
    x = np.zeros((1, 2))
    out = rescale_perturbation(x, np.array([[0.3, 0.0]]), 2, 0.15)
    np.testing.assert_allclose(out, [[0.15, 0.0]])


def test_rescale_same_radius_identity():
    x = np.array([[0.1, 0.2]])
    x_adv = x + np.array([[0.3, 0.4]])
    assert np.array_equal(rescale_perturbation(x, x_adv, 2, 0.5), x_adv)


def test_rescale_zero_delta():
    x = np.array([[0.1, 0.2]])
    assert np.array_equal(rescale_perturbation(x, x.copy(), 2, 0.7), x)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), eps=st.floats(0.0, 5.0))
def test_rescale_exact_l2(seed, eps):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    delta = rng.normal(size=(3, 5))
    out = rescale_perturbation(x, x + delta, 2, eps)
    np.testing.assert_allclose(np.linalg.norm(out - x, axis=1), eps, atol=1e-9)


# -- monotone threat on a trained model ---------------------------------------------

@pytest.fixture(scope="module")
def trained_mlp():
    ds = synth(3, 40, 8, seed=0)
    params = build_model(mlp((1, 8, 8), 16, 3), seed=0)
    cfg = TrainConfig(method="STD", epochs=15, batch_size=16, lr=3e-3)
    return train(params, (ds.images, ds.labels), cfg).params, ds


def test_more_steps_never_weaker_on_most_seeds(trained_mlp):
    params, ds = trained_mlp
    x, y = ds.images[::4], ds.labels[::4]
    wins = 0
    for seed in range(5):
        one = attack(params, x, y, AttackSpec(PGD, p=2, epsilon=0.5, step=0.1, steps=1), seed=seed)
        many = attack(params, x, y, AttackSpec(PGD, p=2, epsilon=0.5, step=0.1, steps=10), seed=seed)
        l1 = cross_entropy(predict_proba(params, one.x_adv), y).mean()
        lk = cross_entropy(predict_proba(params, many.x_adv), y).mean()
        wins += lk >= l1
    assert wins >= 4
    assert math.isfinite(l1)
