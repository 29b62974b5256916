"""Noisy-parity constructions and the toy learning-to-parity pipeline.

Signs are encoded as symbols: action ``0`` is ``+1`` and action ``1`` is
``-1``.  A context ``x`` in ``{-1, 1}^n`` is the integer whose big-endian bit
``i`` is set exactly when ``x_i = -1``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import comb
from scipy.stats import binom

from .core import DEFAULT_CAP, AutoregressiveMdp, Dataset, sample_dataset
from .errors import DomainError, InfeasibleError, NumericCapError, NumericError
from .policies import FeatureMap, L1Ball, Policy, register_feature_map, register_policy

DEFAULT_C = 8.0
DEFAULT_SMALL_C = 0.125
SAMPLE_BUDGET = 10 ** 7
NEG_TOL = 1e-12


def signs_to_actions(signs: np.ndarray) -> np.ndarray:
    return ((1 - np.asarray(signs, dtype=np.int64)) // 2).astype(np.int64)


def actions_to_signs(actions: np.ndarray) -> np.ndarray:
    return 1 - 2 * np.asarray(actions, dtype=np.int64)


def context_signs(codes: np.ndarray, n: int) -> np.ndarray:
    """``(len(codes), n)`` array of ``+-1`` coordinates."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    bits = (codes[:, None] >> np.arange(n - 1, -1, -1)) & 1
    return 1 - 2 * bits


def signs_to_context(x: np.ndarray) -> int:
    bits = (1 - np.asarray(x, dtype=np.int64)) // 2
    return int(bits @ (1 << np.arange(bits.size - 1, -1, -1)))


def parity(codes: np.ndarray, n: int, S: Sequence[int]) -> np.ndarray:
    """``prod_{i in S} x_i`` for each context code."""
    x = context_signs(codes, n)
    idx = list(S)
    return np.prod(x[:, idx], axis=1) if idx else np.ones(x.shape[0], dtype=np.int64)


def _check_secret(n: int, S: Sequence[int]) -> tuple:
    S = tuple(sorted(int(i) for i in S))
    if n < 1 or any(not 0 <= i < n for i in S) or len(set(S)) != len(S):
        raise DomainError("secret must be a set of distinct indices in [0, n)")
    return S


@register_policy("noisy_parity")
class NoisyParityPolicy(Policy):
    """Each step emits ``prod_{i in S} x_i`` flipped with probability ``1/2 - eta``."""

    def __init__(self, n: int, S: Sequence[int], eta: float, horizon: int):
        if not 0.0 <= eta < 0.5:
            raise DomainError("eta must lie in [0, 1/2)")
        super().__init__(2, horizon)
        self.n = int(n)
        self.S = _check_secret(self.n, S)
        self.eta = float(eta)

    def conditionals(self, h, contexts, prefixes):
        sign = parity(contexts, self.n, self.S)
        p_plus = 0.5 + self.eta * sign
        return np.stack([p_plus, 1.0 - p_plus], axis=1)

    def to_dict(self):
        return {"type": self.tag, "n": self.n, "S": list(self.S), "eta": self.eta, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n"]), d["S"], float(d["eta"]), int(d["horizon"]))

    def sample_signs(self, x_code: int, N: int, rng: np.random.Generator) -> np.ndarray:
        """``N`` conditional draws of the sign string given context ``x_code``."""
        sign = int(parity(np.array([x_code]), self.n, self.S)[0])
        flip = rng.random((N, self.horizon)) < 0.5 - self.eta
        return np.where(flip, -sign, sign)


def noisy_parity_policy(n: int, S: Sequence[int], eta: float, H: int) -> NoisyParityPolicy:
    return NoisyParityPolicy(n, S, eta, H)


def parity_mdp(n: int, H: int) -> AutoregressiveMdp:
    m = 2 ** n
    return AutoregressiveMdp(np.full(m, 1.0 / m), 2, H)


@dataclass
class ParityInstance:
    n: int
    S: tuple
    eta: float
    horizon: int
    degree: int = 1

    def __post_init__(self):
        self.S = _check_secret(self.n, self.S)
        if not 0.0 <= self.eta < 0.5:
            raise DomainError("eta must lie in [0, 1/2)")
        if not 0 <= self.degree <= self.n:
            raise DomainError("degree must lie in [0, n]")

    @property
    def mdp(self) -> AutoregressiveMdp:
        return parity_mdp(self.n, self.horizon)

    @property
    def expert(self) -> NoisyParityPolicy:
        return NoisyParityPolicy(self.n, self.S, self.eta, self.horizon)

    def features(self) -> "VeroneseFeatureMap":
        return veronese_features(self.n, self.degree)

    def sample(self, N: int, rng: np.random.Generator) -> Dataset:
        return sample_dataset(self.mdp, self.expert, N, rng)

    def to_dict(self) -> dict:
        return {"kind": "parity", "n": self.n, "S": list(self.S), "eta": self.eta,
                "horizon": self.horizon, "degree": self.degree}


@register_feature_map("veronese")
class VeroneseFeatureMap(FeatureMap):
    """``phi(x, a_{1:h})_T = a_h prod_{i in T} x_i`` over subsets ``|T| <= t``.

    Subsets are ordered by size, then lexicographically.  Entries are ``+-1``,
    so ``||phi||_2 = sqrt(d)`` and ``|<theta, phi>| <= 1`` on the unit l1 ball.
    """

    def __init__(self, n: int, t: int, cap: int = DEFAULT_CAP):
        if n < 1 or not 0 <= t <= n:
            raise DomainError("need n >= 1 and 0 <= t <= n")
        d = int(sum(comb(n, i, exact=True) for i in range(t + 1)))
        if d > cap:
            raise NumericCapError(f"{d} Veronese features exceed the cap {cap}")
        self.n, self.t = int(n), int(t)
        self.subsets = [T for k in range(t + 1) for T in itertools.combinations(range(n), k)]
        mask = np.zeros((d, n), dtype=bool)
        for j, T in enumerate(self.subsets):
            mask[j, list(T)] = True
        self._mask = mask
        super().__init__(d, math.sqrt(d), 1.0, math.sqrt(d))

    def monomials(self, contexts: np.ndarray) -> np.ndarray:
        x = context_signs(contexts, self.n)
        return np.prod(np.where(self._mask[None, :, :], x[:, None, :], 1), axis=2).astype(np.float64)

    def features(self, h, contexts, actions):
        actions = np.asarray(actions, dtype=np.int64).reshape(np.size(contexts), h)
        a_h = actions_to_signs(actions[:, h - 1])
        return a_h[:, None] * self.monomials(contexts)

    def params(self):
        return {"n": self.n, "t": self.t}

    def parameter_set(self) -> L1Ball:
        return L1Ball(1.0)


def veronese_features(n: int, t: int) -> VeroneseFeatureMap:
    return VeroneseFeatureMap(n, t)


# ----------------------------------------------------------------------------
# binary symmetric channel factoring


def _ratio_ok(num: np.ndarray, den: np.ndarray, bound: float) -> bool:
    both_zero = (num == 0) & (den == 0)
    if np.any((num > 0) & (den == 0)):
        return False
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(both_zero, 1.0, num / np.where(den == 0, 1.0, den))
    return bool(np.all(r <= bound * (1 + 1e-12)))


def factor_bsc_matrix(p_minus, p_plus, eta: float) -> np.ndarray:
    """Columns ``q(-1), q(+1)`` with ``(1-eta) q(b) + eta q(-b) = p(b)``.

    Requires both density ratios bounded by ``(1 - eta) / eta``.
    """
    if not 0.0 < eta < 0.5:
        raise DomainError("eta must lie in (0, 1/2)")
    P = np.stack([np.asarray(p_minus, dtype=np.float64), np.asarray(p_plus, dtype=np.float64)], axis=1)
    if np.any(P < 0) or np.max(np.abs(P.sum(axis=0) - 1.0)) > 1e-10:
        raise DomainError("p(-1) and p(+1) must be distributions")
    bound = (1.0 - eta) / eta
    if not (_ratio_ok(P[:, 1], P[:, 0], bound) and _ratio_ok(P[:, 0], P[:, 1], bound)):
        raise DomainError(f"density ratio exceeds (1 - eta) / eta = {bound}")
    M = np.array([[1.0 - eta, -eta], [-eta, 1.0 - eta]]) / (1.0 - 2.0 * eta)
    Q = P @ M
    if np.any(Q < -NEG_TOL):
        raise NumericError("factored distribution has a negative entry")
    Q = np.clip(Q, 0.0, None)
    return Q / Q.sum(axis=0, keepdims=True)


def factor_bsc(p_minus, p_plus, b_noisy: int, eta: float, rng: np.random.Generator) -> int:
    """Sample an index from ``q(b_noisy)``; for ``b_noisy = (-1)^xi b`` with
    ``xi ~ Ber(eta)`` the output is distributed as ``p(b)``."""
    if b_noisy not in (-1, 1):
        raise DomainError("noisy bit must be +-1")
    Q = factor_bsc_matrix(p_minus, p_plus, eta)
    q = Q[:, 0 if b_noisy == -1 else 1]
    return int(rng.choice(q.size, p=q))


def factor_bsc_marginal(p_minus, p_plus, b: int, eta: float) -> np.ndarray:
    """Exact output law of :func:`factor_bsc` when the true bit is ``b``."""
    Q = factor_bsc_matrix(p_minus, p_plus, eta)
    same, other = (0, 1) if b == -1 else (1, 0)
    return (1.0 - eta) * Q[:, same] + eta * Q[:, other]


# ----------------------------------------------------------------------------
# spreading one noisy label over H steps


def spread_bias(gamma: float, H: int, C: float = DEFAULT_C) -> float:
    return gamma / (C * math.sqrt(H))


def count_window(gamma: float, H: int) -> np.ndarray:
    half = math.sqrt(H) / gamma
    k = np.arange(H + 1)
    return np.abs(k - H / 2.0) <= half + 1e-12


def truncated_counts(gamma: float, H: int, C: float = DEFAULT_C) -> tuple[np.ndarray, np.ndarray]:
    """Binomial count laws ``Bin(H, 1/2 -+ bias)`` restricted to ``|k - H/2| <= sqrt(H)/gamma``."""
    if not 0.0 < gamma < 1.0:
        raise DomainError("gamma must lie in (0, 1)")
    if C <= 0:
        raise DomainError("C must be positive")
    bias = spread_bias(gamma, H, C)
    if bias >= 0.5:
        raise DomainError("bias gamma / (C sqrt(H)) must be below 1/2")
    win = count_window(gamma, H)
    if not win.any():
        raise InfeasibleError("count window is empty")
    k = np.arange(H + 1)
    out = []
    for p in (0.5 - bias, 0.5 + bias):
        f = np.where(win, binom.pmf(k, H, p), 0.0)
        out.append(f / f.sum())
    return out[0], out[1]


def truncation_mass(gamma: float, H: int, C: float = DEFAULT_C) -> float:
    """Mass of ``Bin(H, 1/2 + bias)`` outside the window."""
    win = count_window(gamma, H)
    k = np.arange(H + 1)
    return float(binom.pmf(k[~win], H, 0.5 + spread_bias(gamma, H, C)).sum())


def truncation_bound(gamma: float, c: float = DEFAULT_SMALL_C) -> float:
    return 2.0 * math.exp(-c / gamma ** 2)


def spread_count_law(gamma: float, H: int, parity_sign: int, C: float = DEFAULT_C) -> np.ndarray:
    """Exact law of the count of ``+1`` entries emitted by :func:`spread_signal`."""
    p_minus, p_plus = truncated_counts(gamma, H, C)
    try:
        return factor_bsc_marginal(p_minus, p_plus, parity_sign, 0.25)
    except DomainError as exc:
        raise DomainError(f"construction constant C={C} too small: {exc}") from exc


def spread_signal(x, y_noisy: int, gamma: float, H: int, rng: np.random.Generator,
                  C: float = DEFAULT_C) -> np.ndarray:
    """Turn one label with flip rate 1/4 into ``H`` signs with per-bit bias ``gamma / (C sqrt(H))``.

    ``x`` is passed through untouched by the construction; it is accepted so
    the call mirrors the sample it transforms.
    """
    p_minus, p_plus = truncated_counts(gamma, H, C)
    try:
        k = factor_bsc(p_minus, p_plus, int(y_noisy), 0.25, rng)
    except DomainError as exc:
        raise DomainError(f"construction constant C={C} too small: {exc}") from exc
    out = -np.ones(H, dtype=np.int64)
    out[rng.permutation(H)[:k]] = 1
    return out


# ----------------------------------------------------------------------------
# decoding and the toy distinguisher


def majority_samples(delta: float, gamma: float, C: float = DEFAULT_C) -> int:
    if not 0.0 < delta < 1.0 or gamma <= 0:
        raise DomainError("need delta in (0, 1) and gamma > 0")
    return int(math.ceil(6.0 * C * C * math.log(1.0 / delta) / gamma ** 2))


Sampler = Callable[[int, int, np.random.Generator], np.ndarray]


def hellinger_to_secret(sampler: Sampler, x: int, delta: float, gamma: float, rng: np.random.Generator,
                        C: float = DEFAULT_C, budget: int = SAMPLE_BUDGET) -> int:
    """Majority sign over ``N = 6 C^2 log(1/delta) / gamma^2`` conditional draws.

    ``sampler(x, N, rng)`` returns an ``(N, H)`` array of signs.  Ties go to ``+1``.
    """
    N = majority_samples(delta, gamma, C)
    y = np.asarray(sampler(x, N, rng))
    if y.ndim != 2 or y.shape[0] != N:
        raise DomainError("sampler must return an (N, H) sign array")
    if y.size > budget:
        raise NumericCapError(f"{y.size} sampled signs exceed the budget {budget}")
    return 1 if y.sum() >= 0 else -1


def policy_sampler(policy: Policy) -> Sampler:
    """Conditional sign sampler built from any binary policy."""

    def sample(x: int, N: int, rng: np.random.Generator) -> np.ndarray:
        if isinstance(policy, NoisyParityPolicy):
            return policy.sample_signs(x, N, rng)
        ctx = np.full(N, x)
        acts = np.zeros((N, policy.horizon), dtype=np.int64)
        for h in range(1, policy.horizon + 1):
            p = policy.conditionals(h, ctx, acts[:, : h - 1])
            acts[:, h - 1] = (rng.random(N) >= p[:, 0]).astype(np.int64)
        return actions_to_signs(acts)

    return sample


def uniform_sampler(H: int) -> Sampler:
    def sample(x: int, N: int, rng: np.random.Generator) -> np.ndarray:
        return np.where(rng.random((N, H)) < 0.5, 1, -1)

    return sample


@dataclass
class DemoConfig:
    n: int = 4
    S: tuple = (0, 2)
    degree: int = 2
    horizon: int = 16
    gamma: float = 0.3
    delta: float = 0.01
    C: float = DEFAULT_C
    train_size: int = 200
    trials: int = 200
    learner: str = "cheat"
    gaalm_iterations: int = 500
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n > 6 or self.degree > 2:
            raise DomainError("the demo is limited to n <= 6 and t <= 2")
        self.S = _check_secret(self.n, self.S)
        if self.learner not in LEARNERS:
            raise DomainError(f"unknown demo learner {self.learner!r}; choose from {sorted(LEARNERS)}")


def _cheat(cfg: DemoConfig, data: Dataset, oracle: str) -> Policy:
    eta = spread_bias(cfg.gamma, cfg.horizon, cfg.C) if oracle == "parity" else 0.0
    return NoisyParityPolicy(cfg.n, cfg.S, eta, cfg.horizon)


def _uniform(cfg: DemoConfig, data: Dataset, oracle: str) -> Policy:
    return NoisyParityPolicy(cfg.n, (), 0.0, cfg.horizon)


def _gaalm(cfg: DemoConfig, data: Dataset, oracle: str) -> Policy:
    from .bc import gaalm_policy

    fm = veronese_features(cfg.n, cfg.degree)
    return gaalm_policy(data, fm, fm.parameter_set(), T=cfg.gaalm_iterations, n_actions=2)


LEARNERS = {"cheat": _cheat, "uniform": _uniform, "gaalm": _gaalm}


def _oracle_pair(cfg: DemoConfig, oracle: str, rng: np.random.Generator) -> tuple[int, int]:
    x = int(rng.integers(2 ** cfg.n))
    if oracle == "uniform":
        return x, int(rng.choice([-1, 1]))
    sign = int(parity(np.array([x]), cfg.n, cfg.S)[0])
    return x, -sign if rng.random() < 0.25 else sign


def lpn_reduction_demo(config: DemoConfig | dict, rng: np.random.Generator) -> dict:
    """Toy distinguisher: spread labels, fit, decode a fresh context, compare with its label.

    Reports the frequency of agreement under the parity oracle and under the
    uniform oracle.  Parameters are tiny and not those of the asymptotic
    hardness argument; the report says so.
    """
    cfg = config if isinstance(config, DemoConfig) else DemoConfig(**config)
    fit = LEARNERS[cfg.learner]
    report = {"config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()},
              "toy_regime": True,
              "note": "toy parameters; far from the regime of the asymptotic reduction"}
    for oracle in ("parity", "uniform"):
        hits = 0
        for _ in range(cfg.trials):
            xs, acts = np.empty(cfg.train_size, dtype=np.int64), np.empty((cfg.train_size, cfg.horizon), dtype=np.int64)
            for i in range(cfg.train_size):
                x, y = _oracle_pair(cfg, oracle, rng)
                xs[i] = x
                acts[i] = signs_to_actions(spread_signal(x, y, cfg.gamma, cfg.horizon, rng, cfg.C))
            policy = fit(cfg, Dataset(xs, acts), oracle)
            x_test, y_test = _oracle_pair(cfg, oracle, rng)
            y_hat = hellinger_to_secret(policy_sampler(policy), x_test, cfg.delta, cfg.gamma, rng, cfg.C)
            hits += int(y_hat == y_test)
        report[f"{oracle}_frequency"] = hits / cfg.trials
    report["thresholds"] = {"parity_at_least": 5 / 8, "uniform_at_most": 0.5}
    return report
