"""scikit-learn compatible wrappers around the training and attack routines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

from .attacks import PGD, AttackSpec, attack_dataset
from .models import ArchSpec, ModelParams, build_model, predict_proba, resolve_arch
from .trainers import TrainConfig, train


def check_images(X, input_shape=None):
    """Validate and reshape ``X`` to ``[N, C, H, W]`` float64.

    2-D input is read as ``[N, features]`` (a 1x1xF "image"), 3-D as
    single-channel ``[N, H, W]``.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim == 2:
        X = X.reshape(len(X), 1, 1, X.shape[1])
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ValueError(f"expected 2-D to 4-D input, got {X.ndim}-D")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ValueError(f"X has sample shape {X.shape[1:]}, model expects {tuple(input_shape)}")
    return X


class AdversarialTrainingClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained with STD, AT, SAT, AMAT or DPAAT.

    Parameters mirror :class:`~dpaat.trainers.TrainConfig`; ``arch`` is a
    registered name (``"smallcnn"``, ``"mlp"``), an ``arch_id`` string or an
    :class:`~dpaat.models.ArchSpec`. Pass ``X_val``/``y_val`` to :meth:`fit`
    to enable early stopping.

    Attributes after fitting: ``params_`` (best-validation parameters),
    ``classes_``, ``history_`` (list of EpochReport), ``best_epoch_``, ``xi_``.
    """

    def __init__(self, method="DPAAT", arch="smallcnn", alpha=0.5, beta=1.0, xi=None, delta_eps=None,
                 sync_variant="jsd", lr=3e-4, batch_size=32, epochs=30, warmup_epochs=0, patience=5,
                 attack=None, eps_min=None, gamma_cap=None, regenerate="rescale", random_state=0,
                 model_seed=None, verbose=False):
        self.method = method
        self.arch = arch
        self.alpha = alpha
        self.beta = beta
        self.xi = xi
        self.delta_eps = delta_eps
        self.sync_variant = sync_variant
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.patience = patience
        self.attack = attack
        self.eps_min = eps_min
        self.gamma_cap = gamma_cap
        self.regenerate = regenerate
        self.random_state = random_state
        self.model_seed = model_seed
        self.verbose = verbose

    def train_config(self):
        return TrainConfig(
            method=self.method, alpha=self.alpha, beta=self.beta, xi=self.xi, delta_eps=self.delta_eps,
            sync_variant=self.sync_variant, lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            warmup_epochs=self.warmup_epochs, patience=self.patience, seed=self.random_state,
            attack=self.attack if self.attack is not None else AttackSpec(PGD, p=2, epsilon=0.3, step=0.15, steps=7),
            eps_min=self.eps_min, gamma_cap=self.gamma_cap, regenerate=self.regenerate,
        )

    def _arch_for(self, input_shape, n_classes):
        if isinstance(self.arch, ArchSpec):
            spec = self.arch
        else:
            spec = resolve_arch(self.arch, input_shape=input_shape, n_classes=n_classes)
        if tuple(spec.input_shape) != tuple(input_shape) or spec.n_classes != n_classes:
            raise ValueError(f"architecture {spec.arch_id!r} does not fit input {input_shape} "
                             f"with {n_classes} classes")
        return spec

    def fit(self, X, y, X_val=None, y_val=None, init_params=None):
        X = check_images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        config = self.train_config()
        if init_params is not None:
            params = init_params
        else:
            spec = self._arch_for(X.shape[1:], len(self.classes_))
            seed = self.random_state if self.model_seed is None else self.model_seed
            params = build_model(spec, seed=seed)
        val = None
        if X_val is not None:
            val = (check_images(X_val, X.shape[1:]), self._encode(y_val))
        callback = (lambda r: print(f"[{config.method}] epoch {r.epoch} val={r.val_gacc:.4f}")) if self.verbose else None
        result = train(params, (X, y_idx), config, val, callback=callback)
        self.params_ = result.best_params
        self.last_params_ = result.params
        self.history_ = result.reports
        self.best_epoch_ = result.best_epoch
        self.stopped_early_ = result.stopped_early
        self.xi_ = result.xi
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _encode(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    @classmethod
    def from_params(cls, params, classes=None, **kwargs):
        """Wrap already-trained parameters (e.g. a loaded checkpoint)."""
        est = cls(arch=params.arch, **kwargs)
        est.params_ = params
        est.classes_ = np.arange(params.arch.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = int(np.prod(params.arch.input_shape))
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.params_.arch.input_shape)
        return np.concatenate([predict_proba(self.params_, X[i:i + 256]) for i in range(0, len(X), 256)])

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class AdversarialAttack(TransformerMixin, BaseEstimator):
    """Transformer mapping clean inputs to adversarial examples against ``estimator``.

    ``transform(X, y)`` needs true labels; without ``y`` the estimator's own
    predictions are attacked.
    """

    def __init__(self, estimator=None, method="PGD", p=2, epsilon=0.3, step=0.15, steps=20,
                 random_start=None, clamp_range=(0.0, 1.0), step_direction="sign", random_state=0):
        self.estimator = estimator
        self.method = method
        self.p = p
        self.epsilon = epsilon
        self.step = step
        self.steps = steps
        self.random_start = random_start
        self.clamp_range = clamp_range
        self.step_direction = step_direction
        self.random_state = random_state

    def spec(self):
        return AttackSpec(self.method, p=self.p, epsilon=self.epsilon, step=self.step, steps=self.steps,
                          random_start=self.random_start, clamp_range=self.clamp_range,
                          step_direction=self.step_direction)

    def _params(self):
        est = self.estimator
        if isinstance(est, ModelParams):
            return est, None
        if est is None or not hasattr(est, "params_"):
            raise NotFittedError("AdversarialAttack needs a fitted AdversarialTrainingClassifier")
        return est.params_, est

    def fit(self, X=None, y=None):
        self.spec_ = self.spec()
        self._params()
        return self

    def craft(self, X, y=None, batch_size=128):
        """Return the full AdvBatch (examples, perturbation norms, success flags)."""
        params, est = self._params()
        spec = self.spec()
        X = check_images(X, params.arch.input_shape)
        if y is None:
            y_idx = np.argmax(np.concatenate([predict_proba(params, X[i:i + 256]) for i in range(0, len(X), 256)]), axis=1)
        elif est is not None:
            y_idx = est._encode(y)
        else:
            y_idx = np.asarray(y, dtype=np.int64)
        return attack_dataset(params, X, y_idx, spec, batch_size=batch_size, seed=self.random_state)

    def transform(self, X, y=None):
        return self.craft(X, y).x_adv

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
