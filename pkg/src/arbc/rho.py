"""Finite-class rho-estimators built on the bounded antisymmetric loss ``tau``."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .bc import _check_class, _check_data, _expert_logp, log_loss_bc_finite, trajectory_loglik
from .core import Dataset
from .errors import DomainError, InsufficientDataError, RatioUndefinedError
from .policies import LayeredPolicy, Policy


def tau(x):
    """``tau(x) = 2 / (1 + sqrt(x)) - 1`` for ``x > 0``; accepts scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise DomainError("tau is defined for positive arguments only")
    out = tau_log(np.log(arr))
    return float(out) if np.ndim(out) == 0 else out


def tau_log(log_ratio):
    """``tau(exp(log_ratio))`` computed as ``-tanh(log_ratio / 4)``.

    Infinite log-ratios map to the limits ``-1`` and ``+1``; ``nan`` (from a
    ``0/0`` ratio) maps to ``0``.
    """
    r = np.asarray(log_ratio, dtype=np.float64)
    out = -np.tanh(r / 4.0)
    return np.where(np.isnan(r), 0.0, out)


def fold_count(delta: float) -> int:
    """``ceil(2 ln(2/delta))`` rounded up to an even integer, at least 2."""
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must lie in (0, 1)")
    k = max(2, math.ceil(2.0 * math.log(2.0 / delta)))
    return k + (k % 2)


def pairwise_tau_table(loglik: np.ndarray) -> np.ndarray:
    """``table[j, k] = sum_i tau(P_j(o_i) / P_k(o_i))`` from per-trajectory log-likelihoods ``(K, n)``."""
    K = loglik.shape[0]
    table = np.empty((K, K))
    with np.errstate(invalid="ignore"):
        for j in range(K):
            table[j] = tau_log(loglik[j][None, :] - loglik).sum(axis=1)
    return table


def minmax_select(table: np.ndarray) -> int:
    """Row with the smallest maximum, ties to the lowest index."""
    return int(np.argmin(table.max(axis=1)))


def rho_loss_table(policy_class: Sequence[Policy], data: Dataset, strict: bool = True) -> np.ndarray:
    _check_class(policy_class)
    _check_data(data)
    ll = trajectory_loglik(policy_class, data)
    if strict and np.any(np.isneginf(ll)):
        k = int(np.argwhere(np.isneginf(ll))[0, 0])
        raise RatioUndefinedError(f"policy {k} assigns zero density to an observed trajectory")
    return pairwise_tau_table(ll)


def rho_bc_finite(policy_class: Sequence[Policy], data: Dataset, strict: bool = True) -> Policy:
    """``argmin_pi max_pi' sum_i tau(P^pi(o_i) / P^pi'(o_i))`` over a finite class.

    With ``strict=False`` zero densities are allowed and ratios take their
    limiting values (``tau(0/q) = 1``, ``tau(p/0) = -1``, ``tau(0/0) = 0``).
    """
    return policy_class[minmax_select(rho_loss_table(policy_class, data, strict))]


def layered_rho_bc(layer_classes: Sequence[Sequence[Policy]], data: Dataset) -> LayeredPolicy:
    """Independent per-step rho selection; step ``h`` uses only the step-``h`` conditionals.

    Zero densities follow the limiting convention of ``rho_bc_finite(strict=False)``.
    """
    _check_data(data)
    if len(layer_classes) != data.horizon:
        raise DomainError("need one class per step")
    parts = []
    for h, cls in enumerate(layer_classes, start=1):
        _check_class(cls)
        ll = np.stack([layer_loglik(p, data, h) for p in cls])
        parts.append(cls[minmax_select(pairwise_tau_table(ll))])
    return LayeredPolicy(parts)


def layer_loglik(policy: Policy, data: Dataset, h: int) -> np.ndarray:
    """Step-``h`` log-density of each trajectory under ``policy``."""
    rows = np.arange(len(data))
    p = policy.conditionals(h, data.contexts, data.actions[:, : h - 1])
    with np.errstate(divide="ignore"):
        return np.log(p[rows, data.actions[:, h - 1]])


def simplified_rho_scores(policy_class: Sequence[Policy], data: Dataset) -> np.ndarray:
    _check_class(policy_class)
    _check_data(data)
    star = _expert_logp(data).sum(axis=1)
    ll = trajectory_loglik(policy_class, data)
    if np.any(np.isneginf(ll)):
        raise RatioUndefinedError("an in-class policy assigns zero density to an observed trajectory")
    with np.errstate(invalid="ignore"):
        return tau_log(ll - star[None, :]).sum(axis=1)


def simplified_rho_bc(policy_class: Sequence[Policy], data: Dataset) -> Policy:
    """``argmin_pi sum_i tau(P^pi(o_i) / P^pi*(o_i))`` using expert densities."""
    return policy_class[int(np.argmin(simplified_rho_scores(policy_class, data)))]


def boosted_log_loss_bc(policy_class: Sequence[Policy], data: Dataset, delta: float,
                        base_fitter: Callable[[Sequence[Policy], Dataset], Policy] = log_loss_bc_finite,
                        rng: np.random.Generator | None = None) -> Policy:
    """Fit ``base_fitter`` on ``K/2`` disjoint folds and pick among the fits by rho on the rest.

    ``K = fold_count(delta)``. The data are shuffled with ``rng`` (when given)
    and split into ``K`` contiguous equal folds; a remainder of fewer than ``K``
    trajectories is dropped.
    """
    K = fold_count(delta)
    n = len(data)
    if n < 2 * K:
        raise InsufficientDataError(f"boosting with K={K} folds needs n >= {2 * K}, got {n}")
    if rng is not None:
        data = data.shuffled(rng)
    size = n // K
    folds = [data.subset(np.arange(k * size, (k + 1) * size)) for k in range(K)]
    candidates = [base_fitter(policy_class, folds[k]) for k in range(K // 2)]
    held_out = Dataset.concat(folds[K // 2:])
    return rho_bc_finite(candidates, held_out, strict=False)
