"""Log-loss behavior cloning: exact finite-class selection, projected gradient
ascent for linear-softmax classes, and the smoothed variants that use expert
densities."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .core import Dataset
from .errors import DomainError, MissingSideInformationError, NumericCapError, NumericError
from .policies import FeatureMap, LinearPolicy, ParameterSet, Policy, StepMixturePolicy

MAX_GAALM_ITERATIONS = 10 ** 7


def _check_class(policy_class: Sequence[Policy]) -> None:
    if len(policy_class) == 0:
        raise DomainError("policy class is empty")


def _check_data(data: Dataset) -> None:
    if len(data) == 0:
        raise DomainError("dataset is empty")


def _expert_logp(data: Dataset) -> np.ndarray:
    if not data.has_expert_densities:
        raise MissingSideInformationError("estimator needs expert per-step densities")
    return data.expert_logp


def trajectory_loglik(policy_class: Sequence[Policy], data: Dataset) -> np.ndarray:
    """``log P^pi(a_{1:H} | x)`` for every policy and trajectory, shape ``(K, n)``."""
    return np.stack([p.log_likelihoods(data).sum(axis=1) for p in policy_class])


def _argmax_first(scores: np.ndarray) -> int:
    # np.argmax returns the lowest index on ties and when every entry is -inf
    return int(np.argmax(scores))


def log_loss_scores(policy_class: Sequence[Policy], data: Dataset) -> np.ndarray:
    """Total log-likelihood of ``data`` under each policy; ``-inf`` marks a zero density."""
    _check_class(policy_class)
    _check_data(data)
    return trajectory_loglik(policy_class, data).sum(axis=1)


def log_loss_bc_finite(policy_class: Sequence[Policy], data: Dataset) -> Policy:
    """Maximum likelihood over a finite class, ties to the lowest index."""
    return policy_class[_argmax_first(log_loss_scores(policy_class, data))]


def smoothed_log_loss_scores(policy_class: Sequence[Policy], data: Dataset, lam: float | None = None) -> np.ndarray:
    _check_class(policy_class)
    _check_data(data)
    star = _expert_logp(data)
    n, H = data.actions.shape
    lam = 1.0 / (H * H * n) if lam is None else float(lam)
    if not 0.0 < lam <= 1.0:
        raise DomainError("lambda must lie in (0, 1]")
    out = np.empty(len(policy_class))
    for k, p in enumerate(policy_class):
        lp = p.log_likelihoods(data)
        with np.errstate(divide="ignore"):
            mixed = np.logaddexp(np.log1p(-lam) + lp if lam < 1 else np.full_like(lp, -np.inf), math.log(lam) + star)
        out[k] = mixed.sum()
    return out


def smoothed_log_loss_bc(policy_class: Sequence[Policy], data: Dataset, lam: float | None = None) -> Policy:
    """Maximize ``sum log((1 - lam) pi_h + lam pi*_h)``; default ``lam = 1/(H^2 n)``.

    Returns the selected class member. Use :func:`smoothed_mixture` for the
    per-step mixture with the expert.
    """
    return policy_class[_argmax_first(smoothed_log_loss_scores(policy_class, data, lam))]


def smoothed_mixture(pi_hat: Policy, pi_star: Policy, lam: float) -> StepMixturePolicy:
    return StepMixturePolicy([pi_hat, pi_star], [1.0 - lam, lam])


def traj_smoothed_scores(policy_class: Sequence[Policy], data: Dataset) -> np.ndarray:
    _check_class(policy_class)
    _check_data(data)
    star = _expert_logp(data).sum(axis=1)
    return np.logaddexp(trajectory_loglik(policy_class, data), star[None, :]).sum(axis=1)


def traj_smoothed_bc(policy_class: Sequence[Policy], data: Dataset) -> Policy:
    """Maximize ``sum_i log(P^pi(o_i) + P^pi*(o_i))`` over the class."""
    return policy_class[_argmax_first(traj_smoothed_scores(policy_class, data))]


# ----------------------------------------------------------------------------
# gradient ascent for linear-softmax classes


class LinearLogLik:
    """Empirical log-likelihood of an autoregressive linear model.

    Identical states are merged, so one evaluation costs ``O(S A d)`` with
    ``S`` the number of distinct (context, prefix) states in the data.
    """

    def __init__(self, data: Dataset, feature_map: FeatureMap, n_actions: int):
        _check_data(data)
        n, H = data.actions.shape
        self.n, self.H = n, H
        action_feats, observed, weights = [], [], []
        for h in range(1, H + 1):
            keys = np.concatenate([data.contexts[:, None], data.actions[:, :h]], axis=1)
            uniq, counts = np.unique(keys, axis=0, return_counts=True)
            F = feature_map.action_features(h, uniq[:, 0], uniq[:, 1:h], n_actions)
            action_feats.append(F)
            observed.append(F[np.arange(len(uniq)), uniq[:, h]])
            weights.append(counts.astype(np.float64))
        self.F = np.concatenate(action_feats)
        self.obs = np.concatenate(observed)
        self.w = np.concatenate(weights)
        self.obs_sum = (self.w[:, None] * self.obs).sum(axis=0)

    def value(self, theta: np.ndarray) -> float:
        logits = self.F @ theta
        m = logits.max(axis=1)
        lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        return float(self.w @ (self.obs @ theta - lse))

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        logits = self.F @ theta
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        expected = np.einsum("sa,sad->sd", p, self.F)
        return self.obs_sum - self.w @ expected


def default_gaalm_iterations(B: float, H: int, n: int) -> int:
    return int(math.ceil(2.0 * B ** 4 * H * H * n * n))


def gaalm(data: Dataset, feature_map: FeatureMap, param_set: ParameterSet, T: int | None = None,
          n_actions: int = 2, max_iterations: int = MAX_GAALM_ITERATIONS) -> np.ndarray:
    """Projected gradient ascent on the log-likelihood, returning the iterate average.

    Starts at ``theta = 0`` with step ``1 / (2 n H sqrt(T))``. ``T`` defaults to
    ``2 B^4 H^2 n^2``; a value above ``max_iterations`` raises
    :class:`NumericCapError`.
    """
    obj = LinearLogLik(data, feature_map, n_actions)
    n, H = obj.n, obj.H
    if T is None:
        T = default_gaalm_iterations(feature_map.B, H, n)
    if T < 1:
        raise DomainError("T must be >= 1")
    if T > max_iterations:
        raise NumericCapError(f"gaalm needs T={T} iterations, above the cap {max_iterations}")
    eta = 1.0 / (2.0 * n * H * math.sqrt(T))
    theta = np.zeros(feature_map.dim)
    total = np.zeros(feature_map.dim)
    for _ in range(T):
        total += theta
        g = obj.gradient(theta)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in gaalm")
        theta = param_set.project(theta + eta * g)
    return param_set.project(total / T)


def gaalm_policy(data: Dataset, feature_map: FeatureMap, param_set: ParameterSet, T: int | None = None,
                 n_actions: int = 2) -> LinearPolicy:
    theta = gaalm(data, feature_map, param_set, T, n_actions)
    return LinearPolicy(theta, feature_map, param_set, n_actions, data.horizon)
