"""Gradient-based adversarial attacks: FGSM, iterative FGSM and PGD.

All attacks track the perturbation ``delta = x_adv - x`` explicitly and keep
it inside the L2 or L-infinity ball of the radius in force for each example.
Radii may be a scalar or one value per example.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .models import loss_grad_input, predict

FGSM, IFGSM, PGD = "FGSM", "IFGSM", "PGD"
SIGN, NORMALIZED = "sign", "normalized_gradient"
INF = math.inf


@dataclass(frozen=True)
class AttackSpec:
    """Everything needed to reproduce an attack.

    ``random_start=None`` means "method default" (on for PGD, off otherwise).
    """

    method: str = PGD
    p: float = 2
    epsilon: float = 0.3
    step: float = 0.15
    steps: int = 7
    random_start: bool | None = None
    clamp_range: tuple | None = None
    step_direction: str = SIGN

    def __post_init__(self):
        method = str(self.method).upper()
        if method not in (FGSM, IFGSM, PGD):
            raise ValueError(f"unknown attack method {self.method!r}")
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "p", parse_norm(self.p))
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if method == FGSM:
            object.__setattr__(self, "steps", 1)
            object.__setattr__(self, "random_start", False)
            object.__setattr__(self, "step", self.epsilon if self.epsilon > 0 else self.step)
        elif method == IFGSM:
            object.__setattr__(self, "random_start", False)
        elif self.random_start is None:
            object.__setattr__(self, "random_start", True)
        if self.random_start is None:
            object.__setattr__(self, "random_start", False)
        if self.step <= 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a non-negative integer, got {self.steps}")
        if self.step_direction not in (SIGN, NORMALIZED):
            raise ValueError(f"unknown step direction {self.step_direction!r}")
        if self.clamp_range is not None:
            lo, hi = self.clamp_range
            if lo > hi:
                raise ValueError(f"clamp range {self.clamp_range} is empty")
            object.__setattr__(self, "clamp_range", (float(lo), float(hi)))

    def with_(self, **changes):
        return replace(self, **changes)

    @classmethod
    def from_name(cls, name, epsilon=0.3, step=0.15, clamp_range=(0.0, 1.0)):
        """Parse grid names like ``FGSM``, ``10-IFGSM`` (L-inf) or ``20-PGD`` (L2)."""
        label = name.strip().upper()
        if label == FGSM:
            return cls(FGSM, p=INF, epsilon=epsilon, clamp_range=clamp_range)
        k, _, method = label.partition("-")
        if not k.isdigit() or method not in (IFGSM, PGD):
            raise ValueError(f"cannot parse attack name {name!r}; expected FGSM, k-IFGSM or k-PGD")
        p = INF if method == IFGSM else 2
        return cls(method, p=p, epsilon=epsilon, step=step, steps=int(k), clamp_range=clamp_range)


@dataclass
class AdvBatch:
    """Adversarial batch; ``success`` is None when the predicate was skipped."""

    x_adv: np.ndarray
    delta_norms: np.ndarray
    success: np.ndarray
    epsilon: np.ndarray


def parse_norm(p):
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "linf", "l_inf", "infinity"):
            return INF
        p = p.lstrip("l")
    p = float(p)
    if p not in (2.0, INF):
        raise ValueError(f"only L2 and L-inf balls are supported, got p={p}")
    return INF if p == INF else 2


def sign(t):
    return np.sign(t)


def _flat(t):
    return t.reshape(t.shape[0], -1)


def batch_norms(delta, p):
    """Per-example L_p norm of a batched tensor."""
    flat = _flat(np.asarray(delta))
    if parse_norm(p) == INF:
        return np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(flat))
    return np.sqrt(np.sum(flat * flat, axis=1))


def _per_example(eps, n):
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 0:
        eps = np.full(n, float(eps))
    if eps.shape != (n,):
        raise ValueError(f"expected a scalar or {n} radii, got shape {eps.shape}")
    if np.any(eps < 0):
        raise ValueError("epsilon must be non-negative")
    return eps


def _expand(v, like):
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def project_to_ball(delta, p, epsilon):
    """Project a batch of perturbations onto the L_p ball of radius ``epsilon``.

    ``delta`` is ``[N, ...]``; a 1-D ``delta`` is treated as a single example.
    Points already inside the ball are returned unchanged.
    """
    delta = np.asarray(delta, dtype=np.float64) if np.asarray(delta).dtype.kind != "f" else np.asarray(delta)
    single = delta.ndim == 1
    d = delta[None] if single else delta
    eps = _per_example(epsilon, d.shape[0])
    if parse_norm(p) == INF:
        lim = _expand(eps, d)
        out = np.clip(d, -lim, lim)
    else:
        norms = batch_norms(d, 2)
        outside = norms > eps
        factor = np.ones_like(norms)
        factor[outside] = eps[outside] / norms[outside]
        out = np.where(_expand(outside, d), d * _expand(factor, d), d)
    return out[0] if single else out


def rescale_perturbation(x, x_adv, p, new_epsilon, clamp_range=None):
    """Move each example to distance ``new_epsilon`` from ``x`` along its current perturbation.

    Both norms scale the perturbation uniformly. Zero perturbations stay zero,
    and examples already at the requested radius are returned untouched.
    """
    x = np.asarray(x)
    x_adv = np.asarray(x_adv)
    delta = x_adv - x
    norms = batch_norms(delta, p)
    eps = _per_example(new_epsilon, len(x))
    keep = (norms == 0) | np.isclose(eps, norms, rtol=1e-12, atol=0.0)
    factor = np.where(keep, 1.0, eps / np.where(norms == 0, 1.0, norms))
    out = np.where(_expand(keep, x), np.where(_expand(norms == 0, x), x, x_adv),
                   x + delta * _expand(factor, delta))
    if clamp_range is not None:
        out = np.clip(out, *clamp_range)
    return out


def example_rng(seed, *counters):
    """Counter-based stream: identical draws for any crafting schedule."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed)] + [int(c) for c in counters])))


def _random_start(x, spec, eps, seed, counters):
    noise = np.empty_like(x)
    for i in range(len(x)):
        rng = example_rng(seed, *counters, i)
        noise[i] = rng.uniform(-1.0, 1.0, size=x.shape[1:]) * eps[i]
    return project_to_ball(noise, spec.p, eps)


def _direction(grad, spec):
    if spec.step_direction == SIGN:
        return sign(grad)
    norms = batch_norms(grad, 2)
    safe = np.where(norms > 0, norms, 1.0)
    return grad / _expand(safe, grad)


def _finish(params, x, y, x_adv, spec, eps, predict_fn):
    norms = batch_norms(x_adv - x, spec.p)
    if predict_fn is False:
        return AdvBatch(x_adv, norms, None, eps)
    pred_fn = predict_fn or (lambda xs: predict(params, xs))
    success = pred_fn(x_adv) != pred_fn(x)
    return AdvBatch(x_adv, norms, success, eps)


def _run(params, x, y, spec, epsilon, seed, counters, grad_fn, predict_fn):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if spec.steps == 0:
        raise ValueError("attack needs at least one step")
    grad_fn = grad_fn or (lambda xs: loss_grad_input(params, xs, y)[1])
    eps = _per_example(spec.epsilon if epsilon is None else epsilon, len(x))
    step = eps if spec.method == FGSM else spec.step
    step = _expand(np.asarray(step, dtype=np.float64) * np.ones(len(x)), x)
    delta = _random_start(x, spec, eps, seed, counters) if spec.random_start else np.zeros_like(x)
    x_adv = x + delta
    if spec.clamp_range is not None:
        x_adv = np.clip(x_adv, *spec.clamp_range)
        delta = x_adv - x
    for _ in range(int(spec.steps)):
        grad = grad_fn(x_adv)
        delta = project_to_ball(delta + step * _direction(grad, spec), spec.p, eps)
        x_adv = x + delta
        if spec.clamp_range is not None:
            x_adv = np.clip(x_adv, *spec.clamp_range)
            delta = x_adv - x
    return _finish(params, x, y, x_adv, spec, eps, predict_fn)


def fgsm(params, x, y, spec=None, epsilon=None, grad_fn=None, predict_fn=None):
    """One signed-gradient step of size epsilon, projected onto the ball.

    The projection is a no-op for the L-inf ball.
    """
    spec = spec or AttackSpec(FGSM, p=INF)
    if spec.method != FGSM:
        raise ValueError(f"fgsm called with a {spec.method} spec")
    return _run(params, x, y, spec, epsilon, 0, (), grad_fn, predict_fn)


def iterative_attack(params, x, y, spec, epsilon=None, seed=0, counters=(), grad_fn=None, predict_fn=None):
    """Iterative FGSM or PGD: ``delta <- Proj(delta + step * direction(grad))``.

    ``counters`` (e.g. epoch, batch) index the random-start stream together
    with the example position.
    """
    if spec.method not in (IFGSM, PGD):
        raise ValueError(f"iterative_attack needs IFGSM or PGD, got {spec.method}")
    if spec.steps == 0:
        raise ValueError("iterative attack with steps = 0")
    return _run(params, x, y, spec, epsilon, seed, counters, grad_fn, predict_fn)


def attack(params, x, y, spec, epsilon=None, seed=0, counters=(), grad_fn=None, predict_fn=None):
    """Dispatch on ``spec.method``."""
    if spec.method == FGSM:
        return fgsm(params, x, y, spec, epsilon=epsilon, grad_fn=grad_fn, predict_fn=predict_fn)
    return iterative_attack(params, x, y, spec, epsilon=epsilon, seed=seed, counters=counters,
                            grad_fn=grad_fn, predict_fn=predict_fn)


def attack_dataset(params, x, y, spec, batch_size=128, seed=0):
    """Attack a whole array in batches; returns a concatenated AdvBatch."""
    parts = []
    for b, start in enumerate(range(0, len(x), batch_size)):
        sl = slice(start, start + batch_size)
        parts.append(attack(params, x[sl], y[sl], spec, seed=seed, counters=(b,)))
    return AdvBatch(
        np.concatenate([p.x_adv for p in parts]),
        np.concatenate([p.delta_norms for p in parts]),
        np.concatenate([p.success for p in parts]),
        np.concatenate([p.epsilon for p in parts]),
    )
