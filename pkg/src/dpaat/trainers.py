"""Training procedures: STD, AT, SAT, AMAT and DPAAT (plus its two ablations).

One mini-batch step of the perturbation-adaptive method:

1. craft ``x_adv`` at the fixed radius with the configured attack;
2. per-example loss change ``dL_i = L(x_adv_i) - L(x_i)`` and its batch mean;
3. shrink the radius of fragile examples (``dL_i > mean``) and grow the others;
4. regenerate ``x_adv`` at the adapted radii (rescale, or a fresh attack);
5. minimise ``alpha*L_adv + (1-alpha)*L_clean + beta*L_sync`` with Adam.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .attacks import PGD, AttackSpec, attack, batch_norms, rescale_perturbation
from .autodiff import Graph
from .models import (
    PROB_FLOOR,
    add_cross_entropy,
    add_network,
    cross_entropy,
    declare_params,
    predict_proba,
)

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
DELTA_FLOOR = 1e-8

STD, AT, SAT, AMAT, DPAAT = "STD", "AT", "SAT", "AMAT", "DPAAT"
DPAAT_A_ONLY, DPAAT_B_ONLY = "DPAAT_A_only", "DPAAT_B_only"
METHODS = (STD, AT, SAT, AMAT, DPAAT, DPAAT_A_ONLY, DPAAT_B_ONLY)
ADAPTIVE = (DPAAT, DPAAT_A_ONLY)
WITH_SYNC = (DPAAT, DPAAT_B_ONLY)

PAPER_LITERAL, JSD = "paper_literal", "jsd"
RESCALE, REATTACK = "rescale", "reattack"

LOG_HEADERS = ("epoch", "clean_loss", "adv_loss", "sync_loss", "fragile_frac", "val_gacc", "seconds")


def canonical_method(name):
    for m in METHODS:
        if m.lower() == str(name).strip().lower():
            return m
    raise ValueError(f"unknown training method {name!r}; choose from {', '.join(METHODS)}")


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one training run.

    ``xi``, ``delta_eps``, ``eps_min`` and ``gamma_cap`` default to ``None``
    and resolve relative to the attack radius (see the ``resolved_*``
    properties); ``xi=None`` is measured from data at the first AMAT batch.
    """

    method: str = DPAAT
    alpha: float = 0.5
    beta: float = 1.0
    xi: float | None = None
    delta_eps: float | None = None
    sync_variant: str = JSD
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 30
    warmup_epochs: int = 0
    patience: int = 5
    seed: int = 0
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(PGD, p=2, epsilon=0.3, step=0.15, steps=7))
    eps_min: float | None = None
    gamma_cap: float | None = None
    regenerate: str = RESCALE

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.delta_eps is not None and self.delta_eps < 0:
            raise ValueError(f"delta_eps must be >= 0, got {self.delta_eps}")
        if self.sync_variant not in (PAPER_LITERAL, JSD):
            raise ValueError(f"sync_variant must be {PAPER_LITERAL!r} or {JSD!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("batch_size", "epochs", "patience"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.eps_min is not None and not 0 <= self.eps_min <= self.attack.epsilon:
            raise ValueError(f"eps_min must lie in [0, attack.epsilon={self.attack.epsilon}], got {self.eps_min}")
        if self.gamma_cap is not None and self.gamma_cap < 0:
            raise ValueError(f"gamma_cap must be >= 0, got {self.gamma_cap}")
        if self.regenerate not in (RESCALE, REATTACK):
            raise ValueError(f"regenerate must be {RESCALE!r} or {REATTACK!r}")

    @property
    def resolved_eps_min(self):
        return 0.05 * self.attack.epsilon if self.eps_min is None else self.eps_min

    @property
    def resolved_gamma_cap(self):
        return 2.0 * self.attack.epsilon if self.gamma_cap is None else self.gamma_cap

    @property
    def resolved_delta_eps(self):
        return 0.1 * self.attack.epsilon if self.delta_eps is None else self.delta_eps

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class BatchLossStats:
    delta_l: np.ndarray
    delta_l_avg: float
    gamma: np.ndarray | None = None
    eps_adapted: np.ndarray | None = None
    fragile: np.ndarray | None = None


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(a) for k, a in params.entries.items()},
                   {k: np.zeros_like(a) for k, a in params.entries.items()})

    def copy(self):
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()},
                              self.step, self.betas, self.eps)


@dataclass
class EpochReport:
    epoch: int
    clean_loss: float
    adv_loss: float
    sync_loss: float
    fragile_frac: float
    val_gacc: float = float("nan")
    seconds: float = 0.0
    total_loss: float = float("nan")
    attack_calls: int = 0


@dataclass
class TrainState:
    """Mutable state carried across epochs of one run."""

    optimizer: OptimizerState
    xi: float | None = None


# -- loss pieces ------------------------------------------------------------

def _check_rows(prob, label):
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim == 1:
        prob = prob[None]
    sums = prob.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise ValueError(f"{label} rows must sum to 1 within 1e-5, got sums {sums}")
    return prob


def sync_loss(y_ori, y_adv, variant=JSD):
    """Per-example synchronization loss between two probability batches.

    ``paper_literal`` is ``-1/2 * sum_c [p log(p/(p+q)) + q log(q/(p+q))]``,
    which peaks at ln 2 when ``p == q``. ``jsd`` is the Jensen-Shannon
    divergence ``1/2 KL(p||m) + 1/2 KL(q||m)`` with ``m = (p+q)/2``; for
    normalized rows it equals ``ln 2`` minus the literal value.
    """
    p = np.maximum(_check_rows(y_ori, "y_ori"), PROB_FLOOR)
    q = np.maximum(_check_rows(y_adv, "y_adv"), PROB_FLOOR)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    if variant == PAPER_LITERAL:
        s = p + q
        return -0.5 * np.sum(p * np.log(p / s) + q * np.log(q / s), axis=1)
    if variant == JSD:
        m = 0.5 * (p + q)
        return 0.5 * np.sum(p * (np.log(p) - np.log(m)) + q * (np.log(q) - np.log(m)), axis=1)
    raise ValueError(f"unknown sync variant {variant!r}")


def add_sync_loss(graph, p, q, variant=JSD):
    """Graph version of :func:`sync_loss`; returns a per-example node."""
    lp = graph.log(p, floor=PROB_FLOOR)
    lq = graph.log(q, floor=PROB_FLOOR)
    if variant == JSD:
        mix = graph.log(graph.scale(graph.add(p, q), 0.5), floor=PROB_FLOOR)
        inner = graph.add(graph.mul(p, graph.sub(lp, mix)), graph.mul(q, graph.sub(lq, mix)))
        return graph.scale(graph.sum(inner, axis=1), 0.5)
    if variant == PAPER_LITERAL:
        ls = graph.log(graph.add(p, q), floor=PROB_FLOOR)
        inner = graph.add(graph.mul(p, graph.sub(lp, ls)), graph.mul(q, graph.sub(lq, ls)))
        return graph.scale(graph.sum(inner, axis=1), -0.5)
    raise ValueError(f"unknown sync variant {variant!r}")


def batch_loss_stats(per_example_clean_loss, per_example_adv_loss):
    clean = np.asarray(per_example_clean_loss, dtype=np.float64)
    adv = np.asarray(per_example_adv_loss, dtype=np.float64)
    if clean.shape != adv.shape or clean.ndim != 1:
        raise ValueError(f"loss vectors must be 1-D and equal length, got {clean.shape} and {adv.shape}")
    if clean.size == 0:
        raise ValueError("empty batch")
    delta = adv - clean
    return BatchLossStats(delta, float(np.mean(delta)))


def adapt_epsilon(stats, delta_norms, base_eps, eps_min, gamma_cap):
    """Per-example adapted radius; fills ``gamma``, ``fragile`` and ``eps_adapted`` on ``stats``."""
    norms = np.asarray(delta_norms, dtype=np.float64)
    if np.any(norms < 0):
        raise ValueError("delta norms must be non-negative")
    avg = stats.delta_l_avg
    gamma = base_eps * np.abs(stats.delta_l - avg) / max(avg, DELTA_FLOOR)
    gamma = np.minimum(gamma, gamma_cap)
    fragile = stats.delta_l > avg
    eps = np.where(fragile, norms - gamma, norms + gamma)
    eps = np.maximum(eps, eps_min)
    stats.gamma, stats.fragile, stats.eps_adapted = gamma, fragile, eps
    return eps


def amat_epsilon(per_example_adv_loss, delta_norms, base_eps, xi, delta_eps):
    """Loss-margin radius: grow by ``delta_eps`` below ``xi``, otherwise average with the achieved norm."""
    adv = np.asarray(per_example_adv_loss, dtype=np.float64)
    norms = np.asarray(delta_norms, dtype=np.float64)
    return np.where(adv < xi, base_eps + delta_eps, 0.5 * (base_eps + norms))


def total_loss(method, clean_loss_mean=None, adv_loss_mean=None, sync_loss_mean=None, alpha=0.5, beta=1.0):
    """Scalar training objective for a method, from batch-mean components."""
    method = canonical_method(method)

    def need(value, what):
        if value is None:
            raise ValueError(f"{method} needs the {what} loss")
        return value

    if method == STD:
        return need(clean_loss_mean, "clean")
    if method == AT:
        return need(adv_loss_mean, "adversarial")
    if method == AMAT:
        return 0.5 * (need(adv_loss_mean, "adversarial") + need(clean_loss_mean, "clean"))
    sat = alpha * need(adv_loss_mean, "adversarial") + (1.0 - alpha) * need(clean_loss_mean, "clean")
    if method in WITH_SYNC and beta != 0:
        return sat + beta * need(sync_loss_mean, "synchronization")
    return sat


# -- optimisation -------------------------------------------------------------

def adam_step(params, grads, state, lr, names=None):
    """Bias-corrected Adam update; returns ``(new_params, new_state)``.

    Only ``names`` (default: all) are updated; the step counter always advances.
    """
    b1, b2 = state.betas
    new_state = state.copy()
    new_state.step += 1
    t = new_state.step
    new = params.copy()
    for name in (params.names() if names is None else names):
        g = np.asarray(grads[name])
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        m = b1 * new_state.m[name] + (1.0 - b1) * g
        v = b2 * new_state.v[name] + (1.0 - b2) * g * g
        new_state.m[name], new_state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new.entries[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, new_state


def early_stop(history, patience):
    """Return ``(stop, best_epoch)``; epochs are 1-based, ties keep the first best."""
    if not len(history):
        raise ValueError("empty history")
    hist = np.asarray(history, dtype=np.float64)
    best = int(np.argmax(hist))
    return (len(hist) - 1 - best) >= patience, best + 1


# -- one training step ---------------------------------------------------------

def _loss_graph(params, x, x_adv, y, config, method):
    """Graph with clean and adversarial branches sharing parameter leaves."""
    g = Graph()
    pnodes = declare_params(g, params)
    xn = g.input("x", x.shape)
    clean = add_network(g, xn, params.arch, pnodes, prefix="clean/")
    ce_clean = add_cross_entropy(g, clean.prob, y)
    mean_clean = g.mean(ce_clean)
    nodes = {"ce_clean": ce_clean, "prob_clean": clean.prob}
    if method == STD:
        out = mean_clean
    else:
        xa = g.input("x_adv", x_adv.shape)
        adv = add_network(g, xa, params.arch, pnodes, prefix="adv/")
        ce_adv = add_cross_entropy(g, adv.prob, y)
        mean_adv = g.mean(ce_adv)
        nodes.update(ce_adv=ce_adv, prob_adv=adv.prob)
        if method == AT:
            out = mean_adv
        elif method == AMAT:
            out = g.scale(g.add(mean_adv, mean_clean), 0.5)
        else:
            out = g.add(g.scale(mean_adv, config.alpha), g.scale(mean_clean, 1.0 - config.alpha))
            if method in WITH_SYNC and config.beta != 0:
                sync = g.mean(add_sync_loss(g, clean.prob, adv.prob, config.sync_variant))
                out = g.add(out, g.scale(sync, config.beta))
    return g, out, nodes


def per_example_losses(params, x, y):
    return cross_entropy(predict_proba(params, x), y)


def _craft(params, x, y, config, epsilon, counters):
    return attack(params, x, y, config.attack, epsilon=epsilon, seed=config.seed,
                  counters=counters, predict_fn=False)


def train_step(params, x, y, config, state, epoch_idx=0, batch_idx=0, warmup=False):
    """Run one mini-batch update. Returns ``(params, info)`` with telemetry."""
    method = STD if warmup else config.method
    info = {"attack_calls": 0, "fragile": None, "n": len(x)}
    x_adv = None
    if method != STD:
        adv = _craft(params, x, y, config, None, (epoch_idx, batch_idx, 0))
        info["attack_calls"] += 1
        x_adv, norms = adv.x_adv, adv.delta_norms
        new_eps = None
        if method in ADAPTIVE:
            clean_l = per_example_losses(params, x, y)
            adv_l = per_example_losses(params, x_adv, y)
            stats = batch_loss_stats(clean_l, adv_l)
            new_eps = adapt_epsilon(stats, norms, config.attack.epsilon,
                                    config.resolved_eps_min, config.resolved_gamma_cap)
            info["fragile"] = stats.fragile
        elif method == AMAT:
            if state.xi is None:
                state.xi = float(np.median(per_example_losses(params, x, y)))
                log.info("AMAT threshold xi measured on first batch: %.6g", state.xi)
            adv_l = per_example_losses(params, x_adv, y)
            new_eps = amat_epsilon(adv_l, norms, config.attack.epsilon, state.xi, config.resolved_delta_eps)
        if new_eps is not None:
            if config.regenerate == RESCALE:
                x_adv = rescale_perturbation(x, x_adv, config.attack.p, new_eps, config.attack.clamp_range)
            else:
                x_adv = _craft(params, x, y, config, new_eps, (epoch_idx, batch_idx, 1)).x_adv
                info["attack_calls"] += 1

    g, out, nodes = _loss_graph(params, x, x_adv, y, config, method)
    feeds = {"x": x} if x_adv is None else {"x": x, "x_adv": x_adv}
    total = float(g.forward(feeds, params.entries, output=out))
    grads, _ = g.backward(output=out)
    names = [n for n in params.names() if n.startswith("dense")] if warmup else None
    params, state.optimizer = adam_step(params, grads, state.optimizer, config.lr, names=names)

    info["total"] = total
    info["clean"] = g.value(nodes["ce_clean"])
    if x_adv is not None:
        info["adv"] = g.value(nodes["ce_adv"])
        info["sync"] = sync_loss(g.value(nodes["prob_clean"]), g.value(nodes["prob_adv"]), config.sync_variant)
        if info["fragile"] is None:
            info["fragile"] = info["adv"] - info["clean"] > np.mean(info["adv"] - info["clean"])
    return params, info


def batch_order(n, seed, epoch_idx):
    return np.random.default_rng([int(seed), int(epoch_idx)]).permutation(n)


def train_epoch(params, data, config, epoch_idx, state=None):
    """One pass over ``data = (x, y)`` in seeded shuffled mini-batches.

    Returns ``(params, EpochReport)``; the report's ``val_gacc`` is left for
    the caller to fill.
    """
    x, y = data
    if len(x) == 0:
        raise ValueError("empty training data")
    state = state or TrainState(OptimizerState.zeros_like(params))
    warmup = epoch_idx < config.warmup_epochs
    start = time.perf_counter()
    order = batch_order(len(x), config.seed, epoch_idx)
    sums = {"clean": 0.0, "adv": 0.0, "sync": 0.0, "fragile": 0.0, "total": 0.0}
    n_seen = n_batches = calls = 0
    has_adv = False
    for b, at in enumerate(range(0, len(x), config.batch_size)):
        idx = order[at:at + config.batch_size]
        params, info = train_step(params, x[idx], y[idx], config, state, epoch_idx, b, warmup=warmup)
        n_seen += len(idx)
        n_batches += 1
        calls += info["attack_calls"]
        sums["clean"] += float(np.sum(info["clean"]))
        sums["total"] += info["total"]
        if "adv" in info:
            has_adv = True
            sums["adv"] += float(np.sum(info["adv"]))
            sums["sync"] += float(np.sum(info["sync"]))
            sums["fragile"] += float(np.sum(info["fragile"]))
    nan = float("nan")
    report = EpochReport(
        epoch=epoch_idx + 1,
        clean_loss=sums["clean"] / n_seen,
        adv_loss=sums["adv"] / n_seen if has_adv else nan,
        sync_loss=sums["sync"] / n_seen if has_adv else nan,
        fragile_frac=sums["fragile"] / n_seen if has_adv else 0.0,
        seconds=time.perf_counter() - start,
        total_loss=sums["total"] / n_batches,
        attack_calls=calls,
    )
    return params, report


def accuracy_on(params, x, y, batch_size=256):
    if len(x) == 0:
        return float("nan")
    correct = 0
    for at in range(0, len(x), batch_size):
        prob = predict_proba(params, x[at:at + batch_size])
        correct += int(np.sum(np.argmax(prob, axis=1) == y[at:at + batch_size]))
    return correct / len(x)


@dataclass
class TrainResult:
    params: object
    best_params: object
    reports: list
    best_epoch: int
    stopped_early: bool
    xi: float | None = None


def train(params, train_data, config, val_data=None, callback=None):
    """Full run: epochs of :func:`train_epoch` with early stopping on validation accuracy.

    ``best_params`` holds the parameters from the best validation epoch (the
    last epoch when no validation data is given).
    """
    state = TrainState(OptimizerState.zeros_like(params), xi=config.xi)
    reports, history = [], []
    best_params, best_epoch, stopped = params, 0, False
    for epoch in range(config.epochs):
        params, report = train_epoch(params, train_data, config, epoch, state)
        if val_data is not None:
            report.val_gacc = accuracy_on(params, *val_data)
            history.append(report.val_gacc)
            stop, best_epoch = early_stop(history, config.patience)
            if best_epoch == len(history):
                best_params = params
        else:
            stop, best_epoch, best_params = False, epoch + 1, params
        reports.append(report)
        log.info("epoch %d: clean %.4f adv %.4f sync %.4f fragile %.3f val %.4f",
                 report.epoch, report.clean_loss, report.adv_loss, report.sync_loss,
                 report.fragile_frac, report.val_gacc)
        if callback is not None:
            callback(report)
        if stop:
            stopped = True
            break
    return TrainResult(params, best_params, reports, best_epoch, stopped, state.xi)


def write_training_log(reports, path, wall_time=False):
    """Write EpochReport rows; ``seconds`` is 0 unless ``wall_time`` (keeps logs reproducible)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADERS)
        for r in reports:
            writer.writerow([r.epoch, repr(r.clean_loss), repr(r.adv_loss), repr(r.sync_loss),
                             repr(r.fragile_frac), repr(r.val_gacc),
                             repr(round(r.seconds, 3) if wall_time else 0.0)])


def read_training_log(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_HEADERS:
            raise ValueError(f"{path}: unexpected headers {reader.fieldnames}")
        return [EpochReport(int(r["epoch"]), float(r["clean_loss"]), float(r["adv_loss"]),
                            float(r["sync_loss"]), float(r["fragile_frac"]), float(r["val_gacc"]),
                            float(r["seconds"])) for r in reader]


def config_fields():
    return [f.name for f in fields(TrainConfig)]
