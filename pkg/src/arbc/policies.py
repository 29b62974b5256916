"""Policy classes, feature maps, parameter sets and class-level diagnostics."""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .core import (
    DEFAULT_CAP,
    AutoregressiveMdp,
    Dataset,
    SeqDistribution,
    all_strings,
    checked_step_table,
    exact_seq_distribution,
    hellinger_squared,
    log_likelihoods,
    prefix_codes,
    prefix_marginals,
    sample_dataset,
)
from .errors import DomainError, InvalidPolicyError, ShapeError

POLICY_TYPES: dict[str, type] = {}
FEATURE_MAPS: dict[str, type] = {}


def register_policy(tag: str):
    def deco(cls):
        POLICY_TYPES[tag] = cls
        cls.tag = tag
        return cls
    return deco


def register_feature_map(name: str):
    def deco(cls):
        FEATURE_MAPS[name] = cls
        cls.name = name
        return cls
    return deco


class Policy:
    """Conditional-density interface shared by every policy type.

    Subclasses implement :meth:`conditionals`, returning ``pi_h(. | x, a_{1:h-1})``
    for a batch of states as an ``(n, A)`` array.
    """

    exposes_density = True

    def __init__(self, n_actions: int, horizon: int):
        self.n_actions = int(n_actions)
        self.horizon = int(horizon)

    def conditionals(self, h: int, contexts: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def conditional(self, h: int, context: int, prefix: Sequence[int] = ()) -> np.ndarray:
        prefix = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
        if prefix.shape[1] != h - 1:
            raise ShapeError(f"step {h} needs a prefix of length {h - 1}")
        return self.conditionals(h, np.array([context]), prefix)[0]

    def step_table(self, h: int, n_contexts: int) -> np.ndarray:
        """Conditionals for every state at step ``h``, shape ``(m * A**(h-1), A)``."""
        pre = all_strings(h - 1, self.n_actions)
        x = np.repeat(np.arange(n_contexts), pre.shape[0])
        return self.conditionals(h, x, np.tile(pre, (n_contexts, 1)))

    def log_likelihoods(self, data: Dataset) -> np.ndarray:
        return log_likelihoods(self, data)

    def to_dict(self) -> dict:
        raise NotImplementedError(f"{type(self).__name__} is not serializable")


@register_policy("tabular")
class TabularPolicy(Policy):
    """Explicit conditional tables; ``tables[h-1]`` has shape ``(m * A**(h-1), A)``."""

    def __init__(self, tables: Sequence[np.ndarray], n_actions: int):
        tabs = [np.asarray(t, dtype=np.float64) for t in tables]
        super().__init__(n_actions, len(tabs))
        m = None
        for h, t in enumerate(tabs, start=1):
            if t.ndim != 2 or t.shape[1] != n_actions or t.shape[0] % n_actions ** (h - 1):
                raise ShapeError(f"table for step {h} has shape {t.shape}")
            rows = t.shape[0] // n_actions ** (h - 1)
            if m is not None and rows != m:
                raise ShapeError("tables disagree on the number of contexts")
            m = rows
            if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-12:
                raise InvalidPolicyError(f"step {h} rows must be distributions")
            t.setflags(write=False)
        self.tables = tuple(tabs)
        self.n_contexts = m

    def conditionals(self, h, contexts, prefixes):
        rows = np.asarray(contexts) * self.n_actions ** (h - 1) + prefix_codes(prefixes, self.n_actions)
        return self.tables[h - 1][rows]

    def step_table(self, h, n_contexts):
        if n_contexts != self.n_contexts:
            raise ShapeError("context count mismatch")
        return self.tables[h - 1]

    @classmethod
    def from_function(cls, mdp: AutoregressiveMdp, fn: Callable) -> "TabularPolicy":
        """``fn(h, x, prefix_tuple)`` returns the conditional over actions."""
        tabs = []
        for h in range(1, mdp.horizon + 1):
            pre = all_strings(h - 1, mdp.n_actions)
            tabs.append(np.array([fn(h, x, tuple(p)) for x in range(mdp.n_contexts) for p in pre], dtype=float))
        return cls(tabs, mdp.n_actions)

    @classmethod
    def uniform(cls, mdp: AutoregressiveMdp) -> "TabularPolicy":
        A = mdp.n_actions
        return cls([np.full((mdp.n_contexts * A ** (h - 1), A), 1.0 / A) for h in range(1, mdp.horizon + 1)], A)

    @classmethod
    def deterministic(cls, mdp: AutoregressiveMdp, strings: Sequence[Sequence[int]], off_path=None) -> "TabularPolicy":
        """Play ``strings[x]`` on context ``x``; off-path states play ``off_path`` (default: the same symbol)."""
        A = mdp.n_actions

        def fn(h, x, prefix):
            out = np.zeros(A)
            target = strings[x][h - 1]
            if off_path is not None and tuple(prefix) != tuple(strings[x][: h - 1]):
                target = off_path
            out[target] = 1.0
            return out

        return cls.from_function(mdp, fn)

    @classmethod
    def from_sequence_table(cls, mdp: AutoregressiveMdp, seq: np.ndarray, fill: np.ndarray | None = None) -> "TabularPolicy":
        """Autoregressive factorization of per-context sequence distributions ``seq[x, code]``.

        Rows whose prefix has zero mass take ``fill`` (uniform by default).
        """
        m, A, H = mdp.n_contexts, mdp.n_actions, mdp.horizon
        seq = np.asarray(seq, dtype=np.float64).reshape(m, A ** H)
        fill = np.full(A, 1.0 / A) if fill is None else np.asarray(fill, dtype=float)
        levels = [seq]
        for _ in range(H):
            levels.append(levels[-1].reshape(m, -1, A).sum(axis=2))
        levels = levels[::-1]
        tabs = []
        for h in range(1, H + 1):
            joint = levels[h].reshape(m * A ** (h - 1), A)
            mass = joint.sum(axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                cond = np.where(mass > 0, joint / np.where(mass > 0, mass, 1.0), fill)
            cond = cond / cond.sum(axis=1, keepdims=True)
            tabs.append(cond)
        return cls(tabs, A)

    def to_dict(self):
        return {"type": self.tag, "n_actions": self.n_actions, "tables": [t.tolist() for t in self.tables]}

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(t, dtype=float) for t in d["tables"]], int(d["n_actions"]))


@register_policy("step_mixture")
class StepMixturePolicy(Policy):
    """Per-step mixture ``sum_k w_k pi_{k,h}`` of several policies."""

    def __init__(self, policies: Sequence[Policy], weights: Sequence[float]):
        w = np.asarray(weights, dtype=np.float64)
        if len(policies) != w.size or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise DomainError("weights must be a distribution over the policies")
        super().__init__(policies[0].n_actions, policies[0].horizon)
        self.policies = tuple(policies)
        self.weights = w

    def conditionals(self, h, contexts, prefixes):
        return sum(w * p.conditionals(h, contexts, prefixes) for w, p in zip(self.weights, self.policies))

    def to_dict(self):
        return {"type": self.tag, "weights": self.weights.tolist(), "policies": [policy_to_dict(p) for p in self.policies]}

    @classmethod
    def from_dict(cls, d):
        return cls([policy_from_dict(p) for p in d["policies"]], d["weights"])


@register_policy("layered")
class LayeredPolicy(Policy):
    """Takes step ``h`` from ``parts[h-1]``; used to assemble per-layer selections."""

    def __init__(self, parts: Sequence[Policy]):
        super().__init__(parts[0].n_actions, len(parts))
        self.parts = tuple(parts)

    def conditionals(self, h, contexts, prefixes):
        return self.parts[h - 1].conditionals(h, contexts, prefixes)

    def to_dict(self):
        return {"type": self.tag, "parts": [policy_to_dict(p) for p in self.parts]}

    @classmethod
    def from_dict(cls, d):
        return cls([policy_from_dict(p) for p in d["parts"]])


def trajectory_mixture(mdp: AutoregressiveMdp, policies: Sequence[Policy], weights: Sequence[float]) -> TabularPolicy:
    """Policy whose trajectory law is ``sum_k w_k P^{pi_k}``."""
    w = np.asarray(weights, dtype=np.float64)
    seq = sum(wk * exact_seq_distribution(mdp, p).table for wk, p in zip(w, policies))
    mu = np.where(mdp.mu > 0, mdp.mu, 1.0)
    return TabularPolicy.from_sequence_table(mdp, seq / mu[:, None])


# ----------------------------------------------------------------------------
# feature maps and parameter sets


class FeatureMap:
    """Features ``phi(x, a_{1:h})`` with declared norm bounds.

    Attributes
    ----------
    dim : int
    B : float
        Bound on feature and parameter Euclidean norms.
    B_dot : float
        Bound on ``|<theta, phi>|`` for in-set parameters.
    L : float or None
        Shared bound used by the kernel estimator.
    """

    name = "abstract"

    def __init__(self, dim: int, B: float, B_dot: float, L: float | None = None):
        self.dim = int(dim)
        self.B = float(B)
        self.B_dot = float(B_dot)
        self.L = None if L is None else float(L)

    def features(self, h: int, contexts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Rows ``phi(x_i, a_{i,1:h})``; ``actions`` has shape ``(n, h)``."""
        raise NotImplementedError

    def action_features(self, h: int, contexts: np.ndarray, prefixes: np.ndarray, n_actions: int) -> np.ndarray:
        """``phi(x, a_{1:h-1}, a)`` for every action ``a``, shape ``(n, A, d)``."""
        contexts = np.asarray(contexts)
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(contexts.size, h - 1)
        out = np.empty((contexts.size, n_actions, self.dim))
        for a in range(n_actions):
            full = np.concatenate([prefixes, np.full((contexts.size, 1), a, dtype=np.int64)], axis=1)
            out[:, a, :] = self.features(h, contexts, full)
        return out

    def __call__(self, context: int, actions: Sequence[int]) -> np.ndarray:
        acts = np.asarray(actions, dtype=np.int64).reshape(1, -1)
        return self.features(acts.shape[1], np.array([context]), acts)[0]

    def params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params()}


@register_feature_map("table")
class TableFeatureMap(FeatureMap):
    """Arbitrary features looked up by state: ``tables[h-1][x * A**h + code(a_{1:h})]``."""

    def __init__(self, tables: Sequence[np.ndarray], n_actions: int, B=None, B_dot=None, L=None):
        tabs = [np.asarray(t, dtype=np.float64) for t in tables]
        dim = tabs[0].shape[1]
        norm = max(float(np.max(np.linalg.norm(t, axis=1))) for t in tabs)
        B = norm if B is None else B
        super().__init__(dim, B, B * B if B_dot is None else B_dot, L)
        self.tables = tuple(tabs)
        self.n_actions = int(n_actions)

    def features(self, h, contexts, actions):
        rows = np.asarray(contexts) * self.n_actions ** h + prefix_codes(actions, self.n_actions)
        return self.tables[h - 1][rows]

    def params(self):
        return {"tables": [t.tolist() for t in self.tables], "n_actions": self.n_actions,
                "B": self.B, "B_dot": self.B_dot, "L": self.L}

    @classmethod
    def from_function(cls, mdp: AutoregressiveMdp, fn: Callable, **bounds) -> "TableFeatureMap":
        """``fn(x, actions_tuple)`` returns the feature vector."""
        tabs = []
        for h in range(1, mdp.horizon + 1):
            strings = all_strings(h, mdp.n_actions)
            tabs.append(np.array([fn(x, tuple(s)) for x in range(mdp.n_contexts) for s in strings], dtype=float))
        return cls(tabs, mdp.n_actions, **bounds)


def feature_map_from_dict(d: dict) -> FeatureMap:
    d = dict(d)
    name = d.pop("name")
    if name not in FEATURE_MAPS:
        raise DomainError(f"unknown feature map {name!r}")
    cls = FEATURE_MAPS[name]
    if name == "table":
        return cls([np.array(t) for t in d.pop("tables")], **d)
    return cls(**d)


class ParameterSet:
    kind = "abstract"

    def project(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, theta: np.ndarray, tol: float = 1e-9) -> bool:
        raise NotImplementedError

    def bounding_box(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class EuclideanBall(ParameterSet):
    kind = "l2_ball"

    def __init__(self, radius: float):
        self.radius = float(radius)

    def project(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        nrm = np.linalg.norm(theta)
        return theta if nrm <= self.radius else theta * (self.radius / nrm)

    def contains(self, theta, tol=1e-9):
        return bool(np.linalg.norm(theta) <= self.radius + tol)

    def bounding_box(self, dim):
        return np.full(dim, -self.radius), np.full(dim, self.radius)

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius}


class L1Ball(ParameterSet):
    kind = "l1_ball"

    def __init__(self, radius: float):
        self.radius = float(radius)

    def project(self, theta):
        # sorted-threshold projection onto the l1 ball
        theta = np.asarray(theta, dtype=np.float64)
        v = np.abs(theta)
        if v.sum() <= self.radius:
            return theta.copy()
        u = np.sort(v)[::-1]
        css = np.cumsum(u)
        k = np.arange(1, u.size + 1)
        rho = np.nonzero(u * k > css - self.radius)[0][-1]
        thr = (css[rho] - self.radius) / (rho + 1.0)
        return np.sign(theta) * np.maximum(v - thr, 0.0)

    def contains(self, theta, tol=1e-9):
        return bool(np.abs(theta).sum() <= self.radius + tol)

    def bounding_box(self, dim):
        return np.full(dim, -self.radius), np.full(dim, self.radius)

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius}


class Box(ParameterSet):
    kind = "box"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.lo > self.hi):
            raise DomainError("box needs lo <= hi")

    def project(self, theta):
        return np.clip(np.asarray(theta, dtype=np.float64), self.lo, self.hi)

    def contains(self, theta, tol=1e-9):
        theta = np.asarray(theta)
        return bool(np.all(theta >= self.lo - tol) and np.all(theta <= self.hi + tol))

    def bounding_box(self, dim):
        return np.broadcast_to(self.lo, (dim,)).copy(), np.broadcast_to(self.hi, (dim,)).copy()

    def to_dict(self):
        return {"kind": self.kind, "lo": self.lo.tolist(), "hi": self.hi.tolist()}


def parameter_set_from_dict(d: dict) -> ParameterSet:
    kind = d["kind"]
    if kind == "l2_ball":
        return EuclideanBall(d["radius"])
    if kind == "l1_ball":
        return L1Ball(d["radius"])
    if kind == "box":
        return Box(d["lo"], d["hi"])
    raise DomainError(f"unknown parameter set {kind!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@register_policy("linear")
class LinearPolicy(Policy):
    """Autoregressive linear-softmax policy ``pi_theta(a | s) ~ exp(<theta, phi(s, a)>)``."""

    def __init__(self, theta, feature_map: FeatureMap, param_set: ParameterSet, n_actions: int, horizon: int):
        super().__init__(n_actions, horizon)
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.size != feature_map.dim:
            raise ShapeError(f"theta has {theta.size} entries, features have {feature_map.dim}")
        self.theta = theta
        self.feature_map = feature_map
        self.param_set = param_set

    def conditionals(self, h, contexts, prefixes):
        feats = self.feature_map.action_features(h, contexts, prefixes, self.n_actions)
        if feats.shape[-1] != self.theta.size:
            raise ShapeError("feature dimension mismatch")
        return _softmax(feats @ self.theta)

    def to_dict(self):
        return {"type": self.tag, "theta": self.theta.tolist(), "feature_map": self.feature_map.to_dict(),
                "param_set": self.param_set.to_dict(), "n_actions": self.n_actions, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["theta"], dtype=float), feature_map_from_dict(d["feature_map"]),
                   parameter_set_from_dict(d["param_set"]), int(d["n_actions"]), int(d["horizon"]))


def linear_conditional(policy: LinearPolicy, context: int, prefix: Sequence[int]) -> np.ndarray:
    """Softmax of ``<theta, phi(x, prefix . a)>`` over actions ``a``."""
    return policy.conditional(len(prefix) + 1, context, prefix)


def density_lower_bound(feature_map: FeatureMap, alphabet_size: int) -> float:
    """``1 / (|A| exp(2 B_dot))``, a floor on every in-set conditional density."""
    return 1.0 / (alphabet_size * math.exp(2.0 * feature_map.B_dot))


def check_feature_map(feature_map: FeatureMap, mdp: AutoregressiveMdp, param_set: ParameterSet,
                      rng: np.random.Generator, n_samples: int = 200) -> None:
    """Spot-check the declared ``B`` and ``B_dot`` on random states and parameters."""
    for _ in range(n_samples):
        h = int(rng.integers(1, mdp.horizon + 1))
        x = int(rng.integers(mdp.n_contexts))
        acts = rng.integers(mdp.n_actions, size=h)
        phi = feature_map(x, acts)
        if np.linalg.norm(phi) > feature_map.B + 1e-9:
            raise DomainError(f"feature norm {np.linalg.norm(phi)} exceeds B={feature_map.B}")
        theta = param_set.project(rng.normal(size=feature_map.dim) * feature_map.B)
        if abs(theta @ phi) > feature_map.B_dot + 1e-9:
            raise DomainError(f"inner product exceeds B_dot={feature_map.B_dot}")


class ThetaGrid:
    """Finite grid over a parameter set, used as a best-in-class oracle.

    The grid takes ``points_per_axis`` evenly spaced values on each axis of the
    set's bounding box and keeps the points inside the set.
    """

    def __init__(self, feature_map: FeatureMap, param_set: ParameterSet, n_actions: int, horizon: int,
                 points_per_axis: int = 33):
        if feature_map.dim > 3:
            raise DomainError("theta grids are limited to d <= 3")
        lo, hi = param_set.bounding_box(feature_map.dim)
        axes = [np.linspace(l, u, points_per_axis) for l, u in zip(lo, hi)]
        pts = np.array(list(itertools.product(*axes)))
        keep = np.array([param_set.contains(p) for p in pts])
        self.points = pts[keep]
        self.feature_map = feature_map
        self.param_set = param_set
        self.n_actions = n_actions
        self.horizon = horizon
        self.points_per_axis = points_per_axis

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i) -> LinearPolicy:
        return LinearPolicy(self.points[i], self.feature_map, self.param_set, self.n_actions, self.horizon)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def class_hellinger(mdp: AutoregressiveMdp, policy_class, p_star: SeqDistribution, cap: int = DEFAULT_CAP) -> np.ndarray:
    return np.array([hellinger_squared(exact_seq_distribution(mdp, p, cap), p_star) for p in policy_class])


def best_in_class(mdp: AutoregressiveMdp, policy_class, p_star: SeqDistribution, cap: int = DEFAULT_CAP):
    """Exact minimizer of squared Hellinger distance over a finite class or grid.

    Returns ``(policy, hell_sq)``; ties go to the lowest index.
    """
    if len(policy_class) == 0:
        raise DomainError("empty policy class")
    vals = class_hellinger(mdp, policy_class, p_star, cap)
    k = int(np.argmin(vals))
    return policy_class[k], float(vals[k])


def w_boundedness(pi_star: Policy, policy_class, mdp: AutoregressiveMdp, cap: int = DEFAULT_CAP) -> float:
    """Largest ratio ``pi*_h(a|s) / pi_h(a|s)`` over the class and reachable states.

    States are reachable when they carry positive mass under ``P^{pi*}``.
    ``0/0`` counts as 0; a positive expert density over a zero in-class
    density yields ``inf``.
    """
    marg = prefix_marginals(mdp, pi_star, cap)
    worst = 0.0
    for h in range(1, mdp.horizon + 1):
        reach = marg[h - 1].reshape(-1) > 0
        ps = checked_step_table(pi_star, h, mdp)[reach]
        for pi in policy_class:
            pt = checked_step_table(pi, h, mdp)[reach]
            pos = ps > 0
            if np.any(pos & (pt <= 0)):
                return math.inf
            if np.any(pos):
                worst = max(worst, float(np.max(ps[pos] / pt[pos])))
    return worst


class ExpertOracle:
    """Expert access: a trajectory sampler plus optional per-step density queries."""

    def __init__(self, policy: Policy | None = None, sampler: Callable | None = None, mdp: AutoregressiveMdp | None = None):
        if policy is None and sampler is None:
            raise DomainError("need a policy or a sampler")
        self.policy = policy
        self._sampler = sampler
        self.mdp = mdp

    @property
    def has_density(self) -> bool:
        return self.policy is not None

    def density(self, h: int, context: int, prefix: Sequence[int]) -> np.ndarray:
        if self.policy is None:
            raise DomainError("this expert exposes no densities")
        return self.policy.conditional(h, context, prefix)

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        if self._sampler is not None:
            return self._sampler(n, rng)
        return sample_dataset(self.mdp, self.policy, n, rng)

    def spot_check(self, rng: np.random.Generator, n_checks: int = 50) -> None:
        if self.policy is None or self.mdp is None:
            return
        for _ in range(n_checks):
            h = int(rng.integers(1, self.mdp.horizon + 1))
            x = int(rng.integers(self.mdp.n_contexts))
            p = self.density(h, x, rng.integers(self.mdp.n_actions, size=h - 1))
            if np.any(p < 0) or abs(p.sum() - 1) > 1e-10:
                raise InvalidPolicyError("expert density is not a distribution")


def policy_to_dict(policy: Policy) -> dict:
    return policy.to_dict()


def policy_from_dict(d: dict) -> Policy:
    tag = d["type"]
    if tag not in POLICY_TYPES:
        raise DomainError(f"unknown policy type {tag!r}")
    return POLICY_TYPES[tag].from_dict(d)
