import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpaat.attacks import PGD, AttackSpec
from dpaat.data import synth
from dpaat.models import ArchSpec, ModelParams, build_model, mlp
from dpaat.trainers import (
    BatchLossStats,
    OptimizerState,
    TrainConfig,
    adam_step,
    adapt_epsilon,
    amat_epsilon,
    batch_loss_stats,
    early_stop,
    read_training_log,
    sync_loss,
    total_loss,
    train,
    train_epoch,
    write_training_log,
)

LN2 = math.log(2.0)


def test_sync_equal_rows():
    p = np.array([[0.5, 0.5]])
    assert sync_loss(p, p, "paper_literal")[0] == pytest.approx(LN2, abs=1e-12)
    assert sync_loss(p, p, "jsd")[0] == pytest.approx(0.0, abs=1e-12)


def test_sync_disjoint_rows():
    p, q = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert sync_loss(p, q, "paper_literal")[0] == pytest.approx(0.0, abs=1e-9)
    assert sync_loss(p, q, "jsd")[0] == pytest.approx(LN2, abs=1e-9)


def rows(seed, n=4, c=3):
    rng = np.random.default_rng(seed)
    r = rng.dirichlet(np.ones(c), size=n)
    return r


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), variant=st.sampled_from(["jsd", "paper_literal"]))
def test_sync_symmetric(seed, variant):
    p, q = rows(seed), rows(seed + 1)
    np.testing.assert_allclose(sync_loss(p, q, variant), sync_loss(q, p, variant), atol=1e-15)


def test_sync_rejects_unnormalized():
    with pytest.raises(ValueError):
        sync_loss(np.array([[0.5, 0.6]]), np.array([[0.5, 0.5]]))


def test_batch_loss_stats_example():
    s = batch_loss_stats([1.0, 1.0, 1.0], [1.2, 1.4, 1.6])
    np.testing.assert_allclose(s.delta_l, [0.2, 0.4, 0.6])
    assert s.delta_l_avg == pytest.approx(0.4)


def test_batch_loss_stats_identity_and_empty():
    s = batch_loss_stats([0.3, 0.7], [0.3, 0.7])
    assert np.all(s.delta_l == 0) and s.delta_l_avg == 0
    with pytest.raises(ValueError):
        batch_loss_stats([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=50))
def test_mean_of_differences(pairs):
    clean, adv = np.array(pairs).T
    s = batch_loss_stats(clean, adv)
    assert abs(s.delta_l.mean() - s.delta_l_avg) <= 1e-9
    assert abs(s.delta_l_avg - (adv.mean() - clean.mean())) <= 1e-9


def stats(delta, avg):
    return BatchLossStats(np.asarray(delta, dtype=float), avg)


def test_adapt_fragile_example():
    eps = adapt_epsilon(stats([0.6], 0.4), [0.3], 0.3, 0.015, 0.6)
    assert eps[0] == pytest.approx(0.15)


def test_adapt_stable_example():
    eps = adapt_epsilon(stats([0.2], 0.4), [0.3], 0.3, 0.015, 0.6)
    assert eps[0] == pytest.approx(0.45)


def test_adapt_zero_deviation():
    assert adapt_epsilon(stats([0.4], 0.4), [0.27], 0.3, 0.015, 0.6)[0] == 0.27


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(0, 1)), min_size=1, max_size=20),
       st.floats(0.01, 1.0))
def test_adapt_direction_and_floor(items, base):
    delta, norms = map(np.array, zip(*items))
    s = batch_loss_stats(np.zeros_like(delta), delta)
    eps_min = 0.05 * base
    eps = adapt_epsilon(s, norms, base, eps_min, 2 * base)
    assert np.all(eps >= eps_min)
    assert np.array_equal(s.fragile, delta > s.delta_l_avg)
    unfloored = np.where(s.fragile, norms - s.gamma, norms + s.gamma)
    binding = unfloored < eps_min
    assert np.all(eps[s.fragile & ~binding] <= norms[s.fragile & ~binding])
    stable = delta < s.delta_l_avg
    assert np.all(eps[stable] >= norms[stable])


def test_amat_examples():
    assert amat_epsilon([0.1], [0.2], 0.3, 0.5, 0.03)[0] == pytest.approx(0.33)
    assert amat_epsilon([0.9], [0.3], 0.3, 0.5, 0.03)[0] == pytest.approx(0.3)
    assert amat_epsilon([0.9], [0.3], 0.3, 0.5, 0.03)[0] == 0.3


def test_total_loss():
    assert total_loss("SAT", 1.0, 2.0, alpha=0.5) == pytest.approx(1.5)
    assert total_loss("DPAAT", 1.0, 2.0, 0.7, alpha=0.5, beta=0.0) == total_loss("SAT", 1.0, 2.0, alpha=0.5)
    assert total_loss("AT", 1.0, 2.0) == 2.0
    assert total_loss("STD", 1.0) == 1.0
    assert total_loss("AMAT", 1.0, 2.0) == 1.5
    with pytest.raises(ValueError):
        total_loss("DPAAT", 1.0, 2.0)


def toy_params():
    arch = ArchSpec.from_id("in=1x1x3;dense2;softmax")
    return build_model(arch, seed=0)


def test_adam_first_step_is_sign():
    params = toy_params()
    rng = np.random.default_rng(0)
    grads = {k: rng.normal(size=v.shape) for k, v in params.entries.items()}
    new, state = adam_step(params, grads, OptimizerState.zeros_like(params), 1e-3)
    for k in params.names():
        np.testing.assert_allclose(new[k] - params[k], -1e-3 * np.sign(grads[k]), atol=1e-10)
    assert state.step == 1


def test_adam_zero_gradient():
    params = toy_params()
    grads = {k: np.zeros_like(v) for k, v in params.entries.items()}
    new, state = adam_step(params, grads, OptimizerState.zeros_like(params), 1e-3)
    assert new.equals(params) and state.step == 1


def test_adam_decreases_quadratic():
    params = toy_params()
    state = OptimizerState.zeros_like(params)
    f = lambda p: sum(float(np.sum(v * v)) for v in p.entries.values())
    for _ in range(5):
        grads = {k: 2 * v for k, v in params.entries.items()}
        new, state = adam_step(params, grads, state, 1e-3)
        assert f(new) < f(params)
        params = new


def test_adam_deterministic():
    params = toy_params()
    grads = {k: np.ones_like(v) for k, v in params.entries.items()}
    a = adam_step(params, grads, OptimizerState.zeros_like(params), 1e-3)
    b = adam_step(params, grads, OptimizerState.zeros_like(params), 1e-3)
    assert a[0].equals(b[0])
    assert all(np.array_equal(a[1].m[k], b[1].m[k]) for k in params.names())


def test_early_stop():
    assert early_stop([0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6], 5) == (True, 2)
    assert early_stop([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], 2) == (False, 8)
    assert early_stop([0.3], 1) == (False, 1)


# -- training loop ------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_data():
    ds = synth(3, 8, 8, seed=0)
    return ds.images, ds.labels


def base_config(method, **kw):
    attack = AttackSpec(PGD, p=2, epsilon=0.3, step=0.15, steps=2)
    return TrainConfig(method=method, batch_size=12, epochs=2, attack=attack, **kw)


def run(method, data, **kw):
    params = build_model(mlp((1, 8, 8), 8, 3), seed=1)
    return train(params, data, base_config(method, **kw))


def trajectory(result):
    return [(r.clean_loss, r.adv_loss, r.total_loss) for r in result.reports]


def test_std_makes_no_attack_calls(toy_data):
    res = run("STD", toy_data)
    assert all(r.attack_calls == 0 for r in res.reports)
    assert run("AT", toy_data).reports[0].attack_calls > 0


def test_dpaat_reduces_to_sat(toy_data):
    d = run("DPAAT", toy_data, beta=0.0, gamma_cap=0.0, eps_min=0.3)
    s = run("SAT", toy_data)
    assert trajectory(d) == trajectory(s)
    assert all(d.params.entries[k].tobytes() == s.params.entries[k].tobytes() for k in s.params.names())


def test_sat_alpha_one_is_at(toy_data):
    assert trajectory(run("SAT", toy_data, alpha=1.0)) == trajectory(run("AT", toy_data))


def test_sat_alpha_zero_is_std(toy_data):
    sat = run("SAT", toy_data, alpha=0.0)
    std = run("STD", toy_data)
    assert [r.clean_loss for r in sat.reports] == [r.clean_loss for r in std.reports]
    assert sat.params.equals(std.params)


@pytest.mark.parametrize("method", ["STD", "AT", "SAT", "AMAT", "DPAAT", "DPAAT_A_only", "DPAAT_B_only"])
def test_epoch_reproducible(toy_data, method):
    cfg = base_config(method)
    params = build_model(mlp((1, 8, 8), 8, 3), seed=1)
    a = train_epoch(params, toy_data, cfg, 0)
    b = train_epoch(params, toy_data, cfg, 0)
    assert a[0].equals(b[0])
    np.testing.assert_array_equal([a[1].clean_loss, a[1].adv_loss, a[1].total_loss],
                                  [b[1].clean_loss, b[1].adv_loss, b[1].total_loss])


def test_reattack_mode_runs(toy_data):
    res = run("DPAAT", toy_data, regenerate="reattack")
    assert res.reports[0].attack_calls == 2 * math.ceil(len(toy_data[1]) / 12)


def test_amat_measures_xi(toy_data):
    res = run("AMAT", toy_data)
    assert res.xi is not None and res.xi > 0


def test_early_stopping_keeps_best(toy_data):
    params = build_model(mlp((1, 8, 8), 8, 3), seed=1)
    cfg = base_config("STD").with_(epochs=6, patience=1)
    res = train(params, toy_data, cfg, val_data=toy_data)
    hist = [r.val_gacc for r in res.reports]
    assert res.best_epoch == int(np.argmax(hist)) + 1
    assert isinstance(res.best_params, ModelParams)


def test_training_log_roundtrip(tmp_path, toy_data):
    res = run("DPAAT", toy_data)
    path = tmp_path / "log.csv"
    write_training_log(res.reports, path)
    back = read_training_log(path)
    assert [r.clean_loss for r in back] == [r.clean_loss for r in res.reports]
    assert all(r.seconds == 0.0 for r in back)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.5)
    with pytest.raises(ValueError):
        TrainConfig(method="nope")
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.alpha, cfg.patience) == (3e-4, 32, 0.5, 5)
    assert cfg.resolved_eps_min == pytest.approx(0.015) and cfg.resolved_gamma_cap == pytest.approx(0.6)
