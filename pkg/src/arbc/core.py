"""Autoregressive MDPs, exact trajectory enumeration, sampling and metrics.

Contexts are the integers ``0..m-1`` and actions the integers ``0..A-1``.
A prefix ``a_{1:h-1}`` is addressed by its big-endian base-``A`` code, so the
row of a step table for state ``(x, a_{1:h-1})`` is ``x * A**(h-1) + code``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DomainError,
    EnumerationTooLargeError,
    InvalidPolicyError,
    ShapeError,
)

DEFAULT_CAP = 2 ** 24
MASS_TOL = 1e-10
NORMALIZATION_TOL = 1e-8
SYMBOLS = "0123456789abcdefghijklmnopqrstuvwxyz"


def prefix_codes(prefixes: np.ndarray, n_actions: int) -> np.ndarray:
    """Big-endian base-``n_actions`` code of each row of ``prefixes``."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    if prefixes.ndim != 2:
        raise ShapeError("prefixes must be a 2-d integer array")
    code = np.zeros(prefixes.shape[0], dtype=np.int64)
    for k in range(prefixes.shape[1]):
        code = code * n_actions + prefixes[:, k]
    return code


def all_strings(length: int, n_actions: int) -> np.ndarray:
    """Every action string of ``length`` in code order, shape ``(A**length, length)``."""
    if length == 0:
        return np.zeros((1, 0), dtype=np.int64)
    codes = np.arange(n_actions ** length, dtype=np.int64)
    out = np.empty((codes.size, length), dtype=np.int64)
    for k in range(length - 1, -1, -1):
        out[:, k] = codes % n_actions
        codes = codes // n_actions
    return out


def encode_actions(actions: Sequence[int]) -> str:
    return "".join(SYMBOLS[int(a)] for a in actions)


def decode_actions(text: str) -> tuple[int, ...]:
    return tuple(SYMBOLS.index(c) for c in text)


@dataclass(frozen=True)
class AutoregressiveMdp:
    """H-step autoregressive MDP with finite contexts and deterministic concatenation.

    Parameters
    ----------
    mu : array_like
        Context weights; context ``i`` has probability ``mu[i]``.
    n_actions : int
        Alphabet size, at least 2.
    horizon : int
        Number of steps ``H``.
    labels : tuple of str, optional
        Display names for contexts.
    """

    mu: np.ndarray
    n_actions: int
    horizon: int
    labels: tuple = ()

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        if mu.size == 0 or np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
            raise DomainError("mu must be a nonnegative vector summing to 1")
        if self.horizon < 1:
            raise DomainError("horizon must be >= 1")
        if self.n_actions < 2:
            raise DomainError("alphabet size must be >= 2")
        if self.labels and len(self.labels) != mu.size:
            raise ShapeError("one label per context required")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_contexts(self) -> int:
        return self.mu.size

    @property
    def contexts(self) -> np.ndarray:
        return np.arange(self.n_contexts)

    def table_size(self) -> int:
        return self.n_contexts * self.n_actions ** self.horizon

    def check_cap(self, cap: int = DEFAULT_CAP) -> None:
        if self.table_size() > cap:
            raise EnumerationTooLargeError(
                f"{self.n_contexts} x {self.n_actions}^{self.horizon} exceeds cap {cap}"
            )

    def to_dict(self) -> dict:
        out = {"mu": self.mu.tolist(), "n_actions": self.n_actions, "horizon": self.horizon}
        if self.labels:
            out["labels"] = list(self.labels)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AutoregressiveMdp":
        return cls(np.array(d["mu"]), int(d["n_actions"]), int(d["horizon"]), tuple(d.get("labels", ())))


@dataclass(frozen=True)
class Trajectory:
    context: int
    actions: tuple
    expert_logdensities: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        if self.expert_logdensities is not None:
            lp = tuple(float(v) for v in self.expert_logdensities)
            if len(lp) != len(self.actions):
                raise ShapeError("expert_logdensities must have one entry per step")
            if any(v > 0 for v in lp):
                raise DomainError("log-densities must be <= 0")
            object.__setattr__(self, "expert_logdensities", lp)

    def to_json(self) -> str:
        rec = {"context": int(self.context), "actions": encode_actions(self.actions)}
        if self.expert_logdensities is not None:
            rec["expert_logdensities"] = list(self.expert_logdensities)
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        rec = json.loads(line)
        return cls(int(rec["context"]), decode_actions(rec["actions"]), rec.get("expert_logdensities"))


@dataclass(frozen=True)
class Dataset:
    """Array form of ``n`` trajectories.

    ``contexts`` has shape ``(n,)``, ``actions`` shape ``(n, H)`` and the
    optional ``expert_logp`` holds per-step ``log pi*_h(a_h | s_h)``.
    """

    contexts: np.ndarray
    actions: np.ndarray
    expert_logp: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.contexts, dtype=np.int64).reshape(-1)
        a = np.asarray(self.actions, dtype=np.int64)
        if a.ndim != 2 or a.shape[0] != x.size:
            raise ShapeError("actions must have shape (n, H) matching contexts")
        object.__setattr__(self, "contexts", x)
        object.__setattr__(self, "actions", a)
        if self.expert_logp is not None:
            lp = np.asarray(self.expert_logp, dtype=np.float64)
            if lp.shape != a.shape:
                raise ShapeError("expert_logp must match actions")
            if np.any(lp > 0):
                raise DomainError("log-densities must be <= 0")
            object.__setattr__(self, "expert_logp", lp)

    def __len__(self) -> int:
        return self.contexts.size

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def has_expert_densities(self) -> bool:
        return self.expert_logp is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        lp = None if self.expert_logp is None else self.expert_logp[idx]
        return Dataset(self.contexts[idx], self.actions[idx], lp)

    def shuffled(self, rng: np.random.Generator) -> "Dataset":
        return self.subset(rng.permutation(len(self)))

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        lps = [p.expert_logp for p in parts]
        lp = None if any(v is None for v in lps) else np.concatenate(lps)
        return cls(np.concatenate([p.contexts for p in parts]), np.concatenate([p.actions for p in parts]), lp)

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(len(self)):
            lp = None if self.expert_logp is None else self.expert_logp[i]
            yield Trajectory(int(self.contexts[i]), self.actions[i], lp)

    @classmethod
    def from_trajectories(cls, trajs: Iterable[Trajectory]) -> "Dataset":
        trajs = list(trajs)
        if not trajs:
            raise DomainError("no trajectories")
        lps = [t.expert_logdensities for t in trajs]
        lp = None if any(v is None for v in lps) else np.array(lps, dtype=np.float64)
        return cls(np.array([t.context for t in trajs]), np.array([t.actions for t in trajs]), lp)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for t in self:
                fh.write(t.to_json() + "\n")

    @classmethod
    def read(cls, path) -> "Dataset":
        with open(path) as fh:
            return cls.from_trajectories(Trajectory.from_json(line) for line in fh if line.strip())


def validate_dataset(data: Dataset, mdp: AutoregressiveMdp) -> Dataset:
    """Check that ``data`` indexes into ``mdp``; returns it unchanged."""
    if data.horizon != mdp.horizon:
        raise ShapeError(f"dataset horizon {data.horizon} != MDP horizon {mdp.horizon}")
    if len(data) and (data.contexts.min() < 0 or data.contexts.max() >= mdp.n_contexts):
        raise ShapeError("context id out of range")
    if data.actions.size and (data.actions.min() < 0 or data.actions.max() >= mdp.n_actions):
        raise ShapeError("action symbol out of range")
    return data


@dataclass(frozen=True)
class SeqDistribution:
    """Dense table of ``P(x, a_{1:H})`` with shape ``(m, A**H)``."""

    table: np.ndarray
    mdp: AutoregressiveMdp | None = None

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise ShapeError("table must be 2-d (contexts x strings)")
        if np.any(t < 0) or abs(t.sum() - 1.0) > MASS_TOL:
            raise DomainError("table must be a probability distribution")
        if self.mdp is not None:
            if t.shape != (self.mdp.n_contexts, self.mdp.n_actions ** self.mdp.horizon):
                raise ShapeError("table shape does not match the MDP")
            if np.max(np.abs(t.sum(axis=1) - self.mdp.mu)) > MASS_TOL:
                raise DomainError("per-context mass must equal mu")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def shape(self):
        return self.table.shape

    def conditional(self, x: int) -> np.ndarray:
        row = self.table[x]
        s = row.sum()
        return row / s if s > 0 else row


def _as_table(p) -> np.ndarray:
    return p.table if isinstance(p, SeqDistribution) else np.asarray(p, dtype=np.float64)


def _pair(p, q):
    a, b = _as_table(p), _as_table(q)
    if a.shape != b.shape:
        raise ShapeError(f"index sets differ: {a.shape} vs {b.shape}")
    return a, b


def hellinger_squared(p, q) -> float:
    """Unnormalized squared Hellinger distance ``sum (sqrt p - sqrt q)^2`` in ``[0, 2]``."""
    a, b = _pair(p, q)
    return float(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))


def tv_distance(p, q) -> float:
    a, b = _pair(p, q)
    return float(0.5 * np.sum(np.abs(a - b)))


def prefix_marginals(mdp: AutoregressiveMdp, policy, cap: int = DEFAULT_CAP) -> list[np.ndarray]:
    """Marginals of ``(x, a_{1:h})`` for ``h = 0..H``; entry ``h`` has shape ``(m, A**h)``."""
    mdp.check_cap(cap)
    m, A = mdp.n_contexts, mdp.n_actions
    out = [mdp.mu.reshape(m, 1).copy()]
    for h in range(1, mdp.horizon + 1):
        step = checked_step_table(policy, h, mdp).reshape(m, A ** (h - 1), A)
        out.append((out[-1][:, :, None] * step).reshape(m, A ** h))
    return out


def checked_step_table(policy, h: int, mdp: AutoregressiveMdp) -> np.ndarray:
    table = np.asarray(policy.step_table(h, mdp.n_contexts), dtype=np.float64)
    _check_conditionals(table)
    return table


def _check_conditionals(p: np.ndarray) -> None:
    if not np.all(np.isfinite(p)) or np.any(p < -NORMALIZATION_TOL):
        raise InvalidPolicyError("conditional has negative or non-finite entries")
    if p.size and np.max(np.abs(p.sum(axis=-1) - 1.0)) > NORMALIZATION_TOL:
        raise InvalidPolicyError("conditional does not sum to 1")


def exact_seq_distribution(mdp: AutoregressiveMdp, policy, cap: int = DEFAULT_CAP) -> SeqDistribution:
    """Enumerate ``P^pi`` over every (context, action string) pair."""
    return SeqDistribution(prefix_marginals(mdp, policy, cap)[-1], mdp)


def sample_dataset(mdp: AutoregressiveMdp, policy, n: int, rng: np.random.Generator) -> Dataset:
    """Draw ``n`` i.i.d. trajectories from ``P^pi``.

    Expert log-densities are recorded when the policy exposes densities.
    """
    x = rng.choice(mdp.n_contexts, size=n, p=mdp.mu)
    acts = np.zeros((n, mdp.horizon), dtype=np.int64)
    logp = np.zeros((n, mdp.horizon))
    rows = np.arange(n)
    for h in range(1, mdp.horizon + 1):
        p = np.asarray(policy.conditionals(h, x, acts[:, : h - 1]), dtype=np.float64)
        _check_conditionals(p)
        cdf = np.cumsum(p, axis=1)
        u = rng.random(n) * cdf[:, -1]
        a = np.minimum((u[:, None] >= cdf).sum(axis=1), mdp.n_actions - 1)
        acts[:, h - 1] = a
        with np.errstate(divide="ignore"):
            logp[:, h - 1] = np.log(p[rows, a])
    exposes = getattr(policy, "exposes_density", True)
    return Dataset(x, acts, np.minimum(logp, 0.0) if exposes else None)


def sample_trajectory(mdp: AutoregressiveMdp, policy, rng: np.random.Generator) -> Trajectory:
    return next(iter(sample_dataset(mdp, policy, 1, rng)))


def log_likelihoods(policy, data: Dataset) -> np.ndarray:
    """Per-step ``log pi_h(a_h | s_h)`` with shape ``(n, H)``; zeros give ``-inf``."""
    n, H = data.actions.shape
    out = np.empty((n, H))
    rows = np.arange(n)
    for h in range(1, H + 1):
        p = np.asarray(policy.conditionals(h, data.contexts, data.actions[:, : h - 1]))
        with np.errstate(divide="ignore"):
            out[:, h - 1] = np.log(p[rows, data.actions[:, h - 1]])
    return out


@dataclass(frozen=True)
class RewardFunction:
    """Per-step rewards ``r_h(s, a)`` stored as step tables, with declared bound ``R``.

    ``tables[h-1]`` has shape ``(m * A**(h-1), A)``.  Construction enumerates
    every trajectory and asserts that its total lies in ``[0, R]``.
    """

    tables: tuple
    bound: float
    mdp: AutoregressiveMdp = field(repr=False, default=None)

    def __post_init__(self):
        mdp = self.mdp
        m, A = mdp.n_contexts, mdp.n_actions
        tabs = []
        for h, t in enumerate(self.tables, start=1):
            t = np.asarray(t, dtype=np.float64)
            if t.shape != (m * A ** (h - 1), A):
                raise ShapeError(f"reward table for step {h} has shape {t.shape}")
            tabs.append(t)
        if len(tabs) != mdp.horizon:
            raise ShapeError("one reward table per step required")
        object.__setattr__(self, "tables", tuple(tabs))
        totals = self.trajectory_totals()
        if totals.min() < -1e-12 or totals.max() > self.bound + 1e-12:
            raise DomainError("trajectory rewards must lie in [0, R]")

    def trajectory_totals(self) -> np.ndarray:
        m, A = self.mdp.n_contexts, self.mdp.n_actions
        acc = np.zeros((m, 1))
        for h, t in enumerate(self.tables, start=1):
            acc = (acc[:, :, None] + t.reshape(m, A ** (h - 1), A)).reshape(m, A ** h)
        return acc

    @classmethod
    def from_callback(cls, mdp: AutoregressiveMdp, fn: Callable, bound: float) -> "RewardFunction":
        """``fn(h, x, prefix, a)`` with ``prefix`` a tuple of length ``h-1``."""
        m, A = mdp.n_contexts, mdp.n_actions
        tabs = []
        for h in range(1, mdp.horizon + 1):
            pre = all_strings(h - 1, A)
            t = np.empty((m * pre.shape[0], A))
            for x in range(m):
                for c, p in enumerate(pre):
                    for a in range(A):
                        t[x * pre.shape[0] + c, a] = fn(h, x, tuple(p), a)
            tabs.append(t)
        return cls(tuple(tabs), float(bound), mdp)

    @classmethod
    def terminal(cls, mdp: AutoregressiveMdp, table, bound: float) -> "RewardFunction":
        """Reward paid only at step ``H``: ``table[x, code(a_{1:H})]``."""
        m, A, H = mdp.n_contexts, mdp.n_actions, mdp.horizon
        table = np.asarray(table, dtype=np.float64).reshape(m, A ** H)
        tabs = [np.zeros((m * A ** (h - 1), A)) for h in range(1, H)]
        tabs.append(table.reshape(m * A ** (H - 1), A))
        return cls(tuple(tabs), float(bound), mdp)

    @classmethod
    def zero(cls, mdp: AutoregressiveMdp, bound: float = 1.0) -> "RewardFunction":
        return cls.terminal(mdp, np.zeros((mdp.n_contexts, mdp.n_actions ** mdp.horizon)), bound)


def policy_value(mdp: AutoregressiveMdp, policy, reward: RewardFunction, cap: int = DEFAULT_CAP) -> float:
    """``J(pi; r) = E^pi[sum_h r_h]`` by exact enumeration."""
    marg = prefix_marginals(mdp, policy, cap)
    m, A = mdp.n_contexts, mdp.n_actions
    total = 0.0
    for h in range(1, mdp.horizon + 1):
        r = reward.tables[h - 1].reshape(m, A ** (h - 1), A).reshape(m, A ** h)
        total += float(np.sum(marg[h] * r))
    return total


def expert_variance(mdp: AutoregressiveMdp, pi_star, reward: RewardFunction, cap: int = DEFAULT_CAP) -> float:
    """``sum_h E[(V_h(s_h) - Q_h(s_h, a_h))^2]`` under ``pi_star`` by backward induction."""
    marg = prefix_marginals(mdp, pi_star, cap)
    m, A, H = mdp.n_contexts, mdp.n_actions, mdp.horizon
    v_next = np.zeros((m, A ** H))
    total = 0.0
    for h in range(H, 0, -1):
        pi = checked_step_table(pi_star, h, mdp).reshape(m, A ** (h - 1), A)
        q = reward.tables[h - 1].reshape(m, A ** (h - 1), A) + v_next.reshape(m, A ** (h - 1), A)
        v = np.sum(pi * q, axis=2)
        # marg[h] already carries the action probability pi(a | s)
        dev = (v[:, :, None] - q) ** 2
        total += float(np.sum(marg[h].reshape(m, A ** (h - 1), A) * dev))
        v_next = v
    return max(total, 0.0)


def worst_case_regret(p_star, p_hat) -> tuple[float, RewardFunction | np.ndarray]:
    """Supremum of ``J(pi*; r) - J(pi_hat; r)`` over 1-bounded rewards, with its witness.

    The witness is the terminal indicator ``1{p_star > p_hat}``.  It is returned
    as a :class:`RewardFunction` when ``p_star`` carries its MDP, else as a table.
    """
    a, b = _pair(p_star, p_hat)
    ind = (a > b).astype(np.float64)
    value = tv_distance(a, b)
    mdp = p_star.mdp if isinstance(p_star, SeqDistribution) else None
    witness = RewardFunction.terminal(mdp, ind, 1.0) if mdp is not None else ind
    return value, witness
