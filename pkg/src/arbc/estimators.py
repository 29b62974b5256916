"""scikit-learn style wrappers around the estimators.

Every wrapper follows the ``fit`` / ``predict_proba`` / ``score`` protocol and
exposes the fitted policy as ``policy_``.  ``fit`` accepts either a
:class:`~arbc.core.Dataset` or the pair ``(contexts, actions)``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import bc, kernel_rho, rho
from .core import Dataset
from .errors import DomainError, ShapeError
from .policies import FeatureMap, ParameterSet, Policy


def check_trajectories(X, y=None, expert_logp=None) -> Dataset:
    """Coerce ``X`` (a Dataset, or contexts with actions ``y``) into a validated Dataset."""
    if isinstance(X, Dataset):
        if y is not None:
            raise ShapeError("pass actions either inside the Dataset or as y, not both")
        return X
    if y is None:
        raise ShapeError("actions y are required when X holds contexts")
    contexts = np.asarray(X)
    actions = np.asarray(y)
    if contexts.ndim != 1:
        raise ShapeError("contexts must be one-dimensional")
    if actions.ndim != 2 or actions.shape[0] != contexts.shape[0]:
        raise ShapeError("actions must have shape (n_samples, horizon)")
    if not (np.issubdtype(contexts.dtype, np.integer) and np.issubdtype(actions.dtype, np.integer)):
        raise ShapeError("contexts and actions must be integer arrays")
    return Dataset(contexts, actions, None if expert_logp is None else np.asarray(expert_logp, dtype=float))


class PolicyEstimator(BaseEstimator):
    """Base wrapper; subclasses implement ``_fit(data) -> Policy``."""

    name = "abstract"

    def fit(self, X, y=None, expert_logp=None):
        data = check_trajectories(X, y, expert_logp)
        self.policy_ = self._fit(data)
        self.horizon_ = data.horizon
        return self

    def _fit(self, data: Dataset) -> Policy:
        raise NotImplementedError

    def _check_fitted(self) -> Policy:
        if not hasattr(self, "policy_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")
        return self.policy_

    def predict_proba(self, h: int, contexts, prefixes) -> np.ndarray:
        """Fitted ``pi_h(. | x, a_{1:h-1})`` for each row."""
        return self._check_fitted().conditionals(h, np.asarray(contexts), np.asarray(prefixes))

    def predict(self, h: int, contexts, prefixes) -> np.ndarray:
        """Most likely next action, lowest index on ties."""
        return np.argmax(self.predict_proba(h, contexts, prefixes), axis=1)

    def score(self, X, y=None, expert_logp=None) -> float:
        """Mean trajectory log-likelihood under the fitted policy."""
        data = check_trajectories(X, y, expert_logp)
        return float(self._check_fitted().log_likelihoods(data).sum(axis=1).mean())


class _FiniteClass(PolicyEstimator):
    def _cls(self) -> Sequence[Policy]:
        if self.policy_class is None or len(self.policy_class) == 0:
            raise DomainError(f"{type(self).__name__} needs a nonempty policy_class")
        return self.policy_class

    @property
    def selected_index_(self) -> int:
        pol = self._check_fitted()
        return next(i for i, p in enumerate(self.policy_class) if p is pol)


class LogLossBC(_FiniteClass):
    name = "log_loss"

    def __init__(self, policy_class=None):
        self.policy_class = policy_class

    def _fit(self, data):
        return bc.log_loss_bc_finite(self._cls(), data)


class SmoothedLogLossBC(_FiniteClass):
    name = "smoothed_log_loss"

    def __init__(self, policy_class=None, lam=None):
        self.policy_class = policy_class
        self.lam = lam

    def _fit(self, data):
        return bc.smoothed_log_loss_bc(self._cls(), data, self.lam)


class TrajSmoothedBC(_FiniteClass):
    name = "traj_smoothed"

    def __init__(self, policy_class=None):
        self.policy_class = policy_class

    def _fit(self, data):
        return bc.traj_smoothed_bc(self._cls(), data)


class RhoBC(_FiniteClass):
    name = "rho"

    def __init__(self, policy_class=None, strict=True):
        self.policy_class = policy_class
        self.strict = strict

    def _fit(self, data):
        return rho.rho_bc_finite(self._cls(), data, self.strict)


class SimplifiedRhoBC(_FiniteClass):
    name = "simplified_rho"

    def __init__(self, policy_class=None):
        self.policy_class = policy_class

    def _fit(self, data):
        return rho.simplified_rho_bc(self._cls(), data)


class BoostedLogLossBC(_FiniteClass):
    name = "boosted_log_loss"

    def __init__(self, policy_class=None, delta=0.05, random_state=None):
        self.policy_class = policy_class
        self.delta = delta
        self.random_state = random_state

    def _fit(self, data):
        rng = np.random.default_rng(self.random_state)
        return rho.boosted_log_loss_bc(self._cls(), data, self.delta, rng=rng)


class LayeredRhoBC(PolicyEstimator):
    name = "layered_rho"

    def __init__(self, layer_classes=None):
        self.layer_classes = layer_classes

    def _fit(self, data):
        if not self.layer_classes:
            raise DomainError("LayeredRhoBC needs layer_classes")
        return rho.layered_rho_bc(self.layer_classes, data)


class GradientLogLossBC(PolicyEstimator):
    """Projected gradient ascent on the log-likelihood of a linear-softmax class."""

    name = "gaalm"

    def __init__(self, feature_map: FeatureMap | None = None, param_set: ParameterSet | None = None,
                 n_iterations=None, n_actions=2):
        self.feature_map = feature_map
        self.param_set = param_set
        self.n_iterations = n_iterations
        self.n_actions = n_actions

    def _fit(self, data):
        if self.feature_map is None or self.param_set is None:
            raise DomainError("GradientLogLossBC needs feature_map and param_set")
        return bc.gaalm_policy(data, self.feature_map, self.param_set, self.n_iterations, self.n_actions)

    @property
    def coef_(self) -> np.ndarray:
        return self._check_fitted().theta


class ChunkKR(PolicyEstimator):
    """Chunked kernelized rho-estimator over binary actions."""

    name = "chunk_kr"

    def __init__(self, feature_map: FeatureMap | None = None, K=2, L=1.0, eps=0.1, C_apx=1.0,
                 overrides=None, max_iterations=10 ** 6):
        self.feature_map = feature_map
        self.K = K
        self.L = L
        self.eps = eps
        self.C_apx = C_apx
        self.overrides = overrides
        self.max_iterations = max_iterations

    def _fit(self, data):
        if self.feature_map is None:
            raise DomainError("ChunkKR needs a feature_map")
        return kernel_rho.chunk_kr(data, self.K, self.L, self.eps, self.feature_map, C_apx=self.C_apx,
                                   overrides=self.overrides, max_iterations=self.max_iterations)


ESTIMATORS = {cls.name: cls for cls in (LogLossBC, SmoothedLogLossBC, TrajSmoothedBC, RhoBC, SimplifiedRhoBC,
                                        BoostedLogLossBC, LayeredRhoBC, GradientLogLossBC, ChunkKR)}
FINITE_CLASS_ESTIMATORS = {"log_loss", "smoothed_log_loss", "traj_smoothed", "rho", "simplified_rho",
                           "boosted_log_loss"}


def make_estimator(name: str, **params) -> PolicyEstimator:
    if name not in ESTIMATORS:
        raise DomainError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}")
    return ESTIMATORS[name](**params)
