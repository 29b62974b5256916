"""Adversarial constructions: two-policy log-loss failure MDPs and the
iterative-learner consistency game."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import AutoregressiveMdp, Dataset, SeqDistribution, exact_seq_distribution, hellinger_squared, sample_dataset
from .errors import DomainError, InsufficientDataError, ProtocolViolationError, ShapeError
from .policies import Policy, TabularPolicy, best_in_class, policy_from_dict, register_policy, w_boundedness

METADATA_TOL = 1e-9
MAX_GAME_HORIZON = 6

A_SYM, B_SYM = 0, 1


@dataclass
class InstanceBundle:
    """An MDP, a finite policy class, the expert, and declared metadata.

    ``metadata`` carries at least ``W`` and ``best_in_class``; both are
    recomputed by the exact oracles when the bundle is built.
    """

    name: str
    mdp: AutoregressiveMdp
    policy_class: list
    expert: Policy
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        meta = self.metadata
        p_star = self.expert_distribution()
        _, value = best_in_class(self.mdp, self.policy_class, p_star)
        if abs(value - meta["best_in_class"]) > METADATA_TOL:
            raise DomainError(f"declared best-in-class {meta['best_in_class']} but oracle gives {value}")
        w = w_boundedness(self.expert, self.policy_class, self.mdp)
        declared = meta["W"]
        if not math.isclose(w, declared, rel_tol=METADATA_TOL, abs_tol=METADATA_TOL):
            raise DomainError(f"declared W={declared} but the class is {w}-bounded")

    def expert_distribution(self) -> SeqDistribution:
        return exact_seq_distribution(self.mdp, self.expert)

    def hellinger(self, policy: Policy) -> float:
        return hellinger_squared(exact_seq_distribution(self.mdp, policy), self.expert_distribution())

    def check_sample_size(self, n: int) -> None:
        need = self.metadata.get("min_n")
        if need is not None and n < need:
            raise InsufficientDataError(f"{self.name} needs n >= {need}, got {n}")

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        self.check_sample_size(n)
        return sample_dataset(self.mdp, self.expert, n, rng)

    @property
    def good(self) -> Policy:
        return self.policy_class[self.metadata["good_index"]]

    @property
    def bad(self) -> Policy:
        return self.policy_class[self.metadata["bad_index"]]

    def to_dict(self) -> dict:
        return {"kind": "finite", "name": self.name, "mdp": self.mdp.to_dict(),
                "class": [p.to_dict() for p in self.policy_class], "expert": self.expert.to_dict(),
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceBundle":
        return cls(d["name"], AutoregressiveMdp.from_dict(d["mdp"]), [policy_from_dict(p) for p in d["class"]],
                   policy_from_dict(d["expert"]), dict(d["metadata"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def _constant_strings(H: int, symbols: Sequence[int]) -> list:
    return [[s] * H for s in symbols]


def _step_policy(mdp: AutoregressiveMdp, rows: dict) -> TabularPolicy:
    """Tabular policy from ``rows[x](h) -> [p(a), p(b)]`` ignoring the prefix."""
    return TabularPolicy.from_function(mdp, lambda h, x, prefix: rows[x](h))


def _ranking(hell: list) -> dict:
    good = int(np.argmin(hell))
    return {"best_in_class": hell[good], "good_index": good, "bad_index": 1 - good}


def _check_W(W: float) -> None:
    if not W >= 2:
        raise DomainError("W must be >= 2")


def _a_policy(mdp, leak_ctx, plain_ctxs, W):
    rows = {x: (lambda h: [1.0, 0.0]) for x in plain_ctxs}
    rows[leak_ctx] = lambda h: [1.0 - 1.0 / W, 1.0 / W]
    return _step_policy(mdp, rows)


def _b_policy(mdp, split_ctx, a_ctxs, b_ctx):
    rows = {x: (lambda h: [1.0, 0.0]) for x in a_ctxs}
    rows[split_ctx] = lambda h: [0.8, 0.2] if h == 1 else [1.0, 0.0]
    rows[b_ctx] = lambda h: [0.0, 1.0]
    return _step_policy(mdp, rows)


def split_hellinger() -> float:
    """Squared distance between ``a^H`` and the 4/5 - 1/5 first-step split."""
    return 2.0 - 2.0 * math.sqrt(0.8)


def leak_hellinger(H: int, W: float) -> float:
    """Squared distance between ``b^H`` and i.i.d. ``b`` with probability ``1/W``."""
    return 2.0 - 2.0 * W ** (-H / 2.0)


def make_delta_instance(H: int, W: float, delta: float) -> InstanceBundle:
    """Two contexts ``(x, y)`` with ``mu(y) = 2 delta / (H ln W)``.

    The expert plays ``a^H`` on ``x`` and ``b^H`` on ``y``.  The good policy
    leaks ``b`` with probability ``1/W`` per step on ``y``; the bad policy
    splits its first step on ``x`` as 4/5 - 1/5.
    """
    _check_W(W)
    if not 0.0 < delta < 0.5:
        raise DomainError("delta must lie in (0, 1/2)")
    if H < 1:
        raise DomainError("H must be >= 1")
    rho_y = 2.0 * delta / (H * math.log(W))
    if rho_y >= 1.0:
        raise DomainError("context weight 2 delta / (H ln W) must be below 1")
    mdp = AutoregressiveMdp(np.array([1.0 - rho_y, rho_y]), 2, H, ("x", "y"))
    expert = TabularPolicy.deterministic(mdp, _constant_strings(H, [A_SYM, B_SYM]))
    pi_a = _a_policy(mdp, 1, [0], W)
    pi_b = _b_policy(mdp, 0, [], 1)
    hell = [rho_y * leak_hellinger(H, W), (1.0 - rho_y) * split_hellinger()]
    meta = {"W": float(W), "delta": float(delta), "n0": int(math.ceil(H * math.log(W))),
            "log": "natural", "context_weight_y": rho_y, "hellinger": hell,
            **_ranking(hell)}
    return InstanceBundle(f"delta(H={H},W={W:g},delta={delta:g})", mdp, [pi_a, pi_b], expert, meta)


def _three_context(H: int, W: float, eps: float, name: str, extra: dict) -> InstanceBundle:
    mass_x = H * math.log(W) * eps
    mass_bot = 1.0 - eps - mass_x
    if mass_bot < -1e-12:
        raise DomainError("eps must satisfy eps < 1 / (1 + H ln W)")
    mass_bot = max(mass_bot, 0.0)
    mu = np.array([mass_bot, mass_x, eps])
    mu = mu / mu.sum()
    mdp = AutoregressiveMdp(mu, 2, H, ("bot", "x", "y"))
    expert = TabularPolicy.deterministic(mdp, _constant_strings(H, [A_SYM, A_SYM, B_SYM]))
    pi_a = _a_policy(mdp, 2, [0, 1], W)
    pi_b = _b_policy(mdp, 1, [0], 2)
    hell = [float(mu[2] * leak_hellinger(H, W)), float(mu[1] * split_hellinger())]
    meta = {"W": float(W), "eps": float(eps), "min_n": int(math.ceil(8.0 / eps)), "log": "natural",
            "hellinger": hell, **_ranking(hell), **extra}
    return InstanceBundle(name, mdp, [pi_a, pi_b], expert, meta)


def make_h_instance(H: int, W: float, eps: float) -> InstanceBundle:
    """Contexts ``(bot, x, y)`` with ``mu(y) = eps`` and ``mu(x) = H ln(W) eps``.

    Sampling through the bundle enforces ``n >= 8 / eps``.
    """
    _check_W(W)
    if H < 1:
        raise DomainError("H must be >= 1")
    if not 0.0 < eps < 1.0 / (1.0 + H * math.log(W)):
        raise DomainError("eps must lie in (0, 1 / (1 + H ln W))")
    return _three_context(H, W, eps, f"h(H={H},W={W:g},eps={eps:g})", {})


def make_unbounded_instance(H: int, eps: float) -> InstanceBundle:
    """The three-context instance with ``W = exp((1/eps - 1) / H)``, leaving ``bot`` massless."""
    if H < 1:
        raise DomainError("H must be >= 1")
    if not 0.0 < eps < 0.5:
        raise DomainError("eps must lie in (0, 1/2)")
    W = math.exp((1.0 / eps - 1.0) / H)
    return _three_context(H, W, eps, f"unbounded(H={H},eps={eps:g})", {"unbounded": True})


# ----------------------------------------------------------------------------
# consistency game

BOTTOM = 2


def _bits(code: int, H: int) -> np.ndarray:
    return (code >> np.arange(H - 1, -1, -1)) & 1


@register_policy("guess")
class GuessPolicy(Policy):
    """Policy of the game class: step ``h`` follows guess ``gammas[h-1]``.

    Step ``h`` plays bit ``h`` of its guess when the context differs from the
    guess and the prefix agrees with the guess; otherwise it plays ``BOTTOM``.
    """

    def __init__(self, gammas: Sequence[int], horizon: int):
        super().__init__(3, horizon)
        if len(gammas) != horizon:
            raise ShapeError("one guess per step required")
        self.gammas = tuple(int(g) for g in gammas)
        self._bits = [_bits(g, horizon) for g in self.gammas]

    def conditionals(self, h, contexts, prefixes):
        g = self.gammas[h - 1]
        bits = self._bits[h - 1]
        contexts = np.asarray(contexts)
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(contexts.size, h - 1)
        follow = (contexts != g) & np.all(prefixes == bits[: h - 1], axis=1)
        act = np.where(follow, bits[h - 1], BOTTOM)
        out = np.zeros((contexts.size, 3))
        out[np.arange(contexts.size), act] = 1.0
        return out

    def to_dict(self):
        return {"type": self.tag, "gammas": list(self.gammas), "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d):
        return cls(d["gammas"], int(d["horizon"]))


@register_policy("secret")
class SecretPolicy(Policy):
    """Expert ``pi^z``: plays the fixed string ``z`` on every context."""

    def __init__(self, z: int, horizon: int):
        super().__init__(3, horizon)
        self.z = int(z)
        self._bits = _bits(z, horizon)

    def conditionals(self, h, contexts, prefixes):
        out = np.zeros((np.size(contexts), 3))
        out[:, self._bits[h - 1]] = 1.0
        return out

    def to_dict(self):
        return {"type": self.tag, "z": self.z, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["z"]), int(d["horizon"]))


@dataclass(frozen=True)
class GameLayer:
    """Member ``f_{h, gamma}`` of layer class ``h``; materialized on demand."""

    h: int
    gamma: int


class ExpertView:
    """The expert as seen by an iterative learner at step ``h``: steps ``1..h`` only."""

    def __init__(self, expert: SecretPolicy, h: int):
        self._expert = expert
        self.h = h
        self.horizon = expert.horizon

    def _check(self, k: int) -> None:
        if not 1 <= k <= self.h:
            raise ProtocolViolationError(f"step {k} of the expert is not visible at step {self.h}")

    def conditionals(self, k: int, contexts, prefixes) -> np.ndarray:
        self._check(k)
        return self._expert.conditionals(k, contexts, prefixes)

    def sample_step(self, contexts, prefixes, rng: np.random.Generator) -> np.ndarray:
        """Draw ``a_h ~ pi*_h(. | x, prefix)`` for each row."""
        p = self.conditionals(self.h, contexts, prefixes)
        u = rng.random(p.shape[0])
        return np.minimum((u[:, None] >= np.cumsum(p, axis=1)).sum(axis=1), p.shape[1] - 1)


@dataclass
class ConsistencyGame:
    """Uniform contexts over ``{0,1}^H`` (big-endian codes), actions ``{0, 1, BOTTOM}``.

    Layer class ``h`` has one member per guess ``gamma`` in ``{0,1}^H``; no
    parameters are shared across layers.
    """

    horizon: int

    def __post_init__(self):
        if not 1 <= self.horizon <= MAX_GAME_HORIZON:
            raise DomainError(f"game horizon must lie in [1, {MAX_GAME_HORIZON}]")

    @property
    def n_guesses(self) -> int:
        return 2 ** self.horizon

    @property
    def mdp(self) -> AutoregressiveMdp:
        m = self.n_guesses
        return AutoregressiveMdp(np.full(m, 1.0 / m), 3, self.horizon)

    def layer(self, h: int, gamma: int) -> GameLayer:
        if not 1 <= h <= self.horizon or not 0 <= gamma < self.n_guesses:
            raise DomainError("no such layer member")
        return GameLayer(h, gamma)

    def policy(self, gammas: Sequence[int]) -> GuessPolicy:
        return GuessPolicy(gammas, self.horizon)

    def expert(self, z: int) -> SecretPolicy:
        return SecretPolicy(z, self.horizon)

    def sample_secret(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n_guesses))

    def hellinger(self, gammas: Sequence[int], z: int) -> float:
        """Exact squared Hellinger distance by enumeration."""
        mdp = self.mdp
        return hellinger_squared(exact_seq_distribution(mdp, self.policy(gammas)),
                                 exact_seq_distribution(mdp, self.expert(z)))

    def closed_form(self, gammas: Sequence[int], z: int) -> float:
        """``2`` if some guess disagrees with ``z`` on its first ``h`` bits, else
        ``2^{1-H}`` times the number of distinct guesses."""
        H = self.horizon
        zb = _bits(z, H)
        for h, g in enumerate(gammas, start=1):
            if np.any(_bits(g, H)[:h] != zb[:h]):
                return 2.0
        return 2.0 * len(set(int(g) for g in gammas)) / 2 ** H

    def min_in_class(self, z: int) -> float:
        """Value of the all-``z`` assignment, the class minimum."""
        return self.hellinger([z] * self.horizon, z)

    def constant_subclass(self) -> list:
        return [self.policy([g] * self.horizon) for g in range(self.n_guesses)]

    def to_dict(self) -> dict:
        return {"kind": "consistency", "horizon": self.horizon}


def make_consistency_game(H: int) -> ConsistencyGame:
    return ConsistencyGame(H)


Learner = Callable[[int, ExpertView, tuple, dict], object]


@dataclass
class GameStats:
    values: np.ndarray
    guesses: list
    secrets: list
    min_in_class: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def ratio(self) -> float:
        return self.mean / self.min_in_class

    def summary(self) -> dict:
        return {"trials": int(self.values.size), "mean": self.mean, "min_in_class": self.min_in_class,
                "ratio": self.ratio, "mismatch_rate": float(np.mean(self.values >= 2.0 - 1e-12))}


def _as_guess(game: ConsistencyGame, h: int, out) -> int:
    if isinstance(out, GameLayer):
        if out.h != h:
            raise ProtocolViolationError(f"learner returned a layer-{out.h} member at step {h}")
        out = out.gamma
    if isinstance(out, (bool, np.bool_)) or not isinstance(out, (int, np.integer)):
        raise ProtocolViolationError(f"learner returned {out!r}, not a member of layer class {h}")
    if not 0 <= int(out) < game.n_guesses:
        raise ProtocolViolationError(f"guess {out} is outside the layer class")
    return int(out)


def run_iterative_learner(game: ConsistencyGame, learner: Learner, trials: int,
                          rng: np.random.Generator, verify_every: int = 0) -> GameStats:
    """Play ``trials`` rounds: draw ``z``, let the learner commit step by step, score exactly.

    ``learner(h, view, history, state)`` returns a guess code (or a
    :class:`GameLayer`) for step ``h``; ``history`` holds its earlier guesses
    and ``state`` is a per-trial dict with keys ``rng`` and ``game``.  Values
    come from the closed form; every ``verify_every``-th trial (and always the
    first) is re-scored by exact enumeration.
    """
    if trials < 1:
        raise DomainError("trials must be >= 1")
    H = game.horizon
    values, guesses, secrets = np.empty(trials), [], []
    z0 = None
    for t in range(trials):
        z = game.sample_secret(rng)
        expert = game.expert(z)
        state = {"rng": rng, "game": game, "_secret": z}
        history: tuple = ()
        for h in range(1, H + 1):
            history = history + (_as_guess(game, h, learner(h, ExpertView(expert, h), history, state)),)
        v = game.closed_form(history, z)
        if t == 0 or (verify_every and t % verify_every == 0):
            exact = game.hellinger(history, z)
            if abs(exact - v) > 1e-12:
                raise AssertionError(f"closed form {v} disagrees with enumeration {exact}")
        values[t] = v
        guesses.append(history)
        secrets.append(z)
        z0 = z if z0 is None else z0
    return GameStats(values, guesses, secrets, game.min_in_class(z0))


def omniscient_learner(h: int, view: ExpertView, history: tuple, state: dict) -> int:
    """Cheating reference learner that guesses the secret at every step."""
    return state["_secret"]


def layerwise_log_loss_learner(n_samples: int | None = None) -> Learner:
    """Iterative simulation of per-step log-loss minimization on ``n_samples`` trajectories.

    At step ``h`` the learner extends its simulated trajectories with fresh
    expert actions and picks the guess maximizing the step-``h`` log-likelihood
    (lowest code on ties).
    """

    def learner(h: int, view: ExpertView, history: tuple, state: dict) -> int:
        game: ConsistencyGame = state["game"]
        rng = state["rng"]
        H, m = game.horizon, game.n_guesses
        n = m if n_samples is None else n_samples
        if h == 1:
            state["x"] = rng.integers(m, size=n)
            state["acts"] = np.zeros((n, 0), dtype=np.int64)
        x, acts = state["x"], state["acts"]
        a = view.sample_step(x, acts, rng)
        codes = np.arange(m)
        bits = (codes[:, None] >> np.arange(H - 1, -1, -1)) & 1
        follow = (x[None, :] != codes[:, None]) & np.all(acts[None, :, :] == bits[:, None, : h - 1], axis=2)
        predicted = np.where(follow, bits[:, h - 1][:, None], BOTTOM)
        scores = np.where(np.all(predicted == a[None, :], axis=1), 0.0, -np.inf)
        state["acts"] = np.concatenate([acts, a[:, None]], axis=1)
        return int(np.argmax(scores))

    return learner


def game_log_loss_fit(game: ConsistencyGame, data: Dataset) -> GuessPolicy:
    """Layerwise maximum likelihood over the game class from a fixed dataset."""
    H, m = game.horizon, game.n_guesses
    gammas = []
    for h in range(1, H + 1):
        layer = [game.policy([g] * H) for g in range(m)]
        ll = np.stack([p.log_likelihoods(data)[:, h - 1].sum() for p in layer])
        gammas.append(int(np.argmax(ll)))
    return game.policy(gammas)


def game_best_in_class(game: ConsistencyGame, z: int) -> tuple:
    """Exact best over the constant-guess subclass, which contains the class minimizer."""
    return best_in_class(game.mdp, game.constant_subclass(), exact_seq_distribution(game.mdp, game.expert(z)))




# ----------------------------------------------------------------------------
# misspecified linear-softmax instance


@dataclass
class LinearInstance:
    """Autoregressive linear instance with a tabular expert outside the class."""

    name: str
    mdp: AutoregressiveMdp
    feature_map: object
    param_set: object
    expert: Policy
    metadata: dict = field(default_factory=dict)

    def grid(self, points_per_axis: int = 41):
        from .policies import ThetaGrid

        return ThetaGrid(self.feature_map, self.param_set, self.mdp.n_actions, self.mdp.horizon, points_per_axis)

    def expert_distribution(self) -> SeqDistribution:
        return exact_seq_distribution(self.mdp, self.expert)

    def hellinger(self, policy: Policy) -> float:
        return hellinger_squared(exact_seq_distribution(self.mdp, policy), self.expert_distribution())

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        return sample_dataset(self.mdp, self.expert, n, rng)

    def to_dict(self) -> dict:
        return {"kind": "linear", "H": self.mdp.horizon, **self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearInstance":
        return make_misspecified_linear_instance(int(d["H"]), tuple(d["weights"]), float(d["scale"]),
                                                 float(d["radius"]), float(d["mixed_prob"]))


def make_misspecified_linear_instance(H: int = 4, weights: Sequence[float] = (0.78, 0.02, 0.2),
                                      scale: float = 0.3, radius: float = 10.0,
                                      mixed_prob: float = 0.7) -> LinearInstance:
    """Three contexts sharing a two-dimensional linear-softmax class.

    Features are ``phi(x, a_{1:h}) = s_h v_x`` with ``s_h = +1`` for action
    ``0`` and ``-1`` for action ``1``, where ``v = (scale, 0)``, ``(1, 0)`` and
    ``(0, 1)``.  The expert plays ``0^H`` on the common context, ``1^H`` on
    the rare one and i.i.d. ``0`` with probability ``mixed_prob`` on the third.
    The first two contexts share one parameter pulling in opposite directions,
    so maximum likelihood trades accuracy on the common context for coverage of
    the rare one.
    """
    from .policies import EuclideanBall, TableFeatureMap

    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,):
        raise ShapeError("three context weights required")
    if not 0.0 < scale <= 1.0 or radius <= 0 or not 0.0 < mixed_prob < 1.0:
        raise DomainError("need scale in (0, 1], radius > 0 and mixed_prob in (0, 1)")
    mdp = AutoregressiveMdp(w, 2, H, ("common", "rare", "mixed"))
    v = np.array([[scale, 0.0], [1.0, 0.0], [0.0, 1.0]])
    fm = TableFeatureMap.from_function(mdp, lambda x, acts: (1 - 2 * acts[-1]) * v[x], B=1.0, B_dot=radius, L=1.0)
    rows = {0: [1.0, 0.0], 1: [0.0, 1.0], 2: [mixed_prob, 1.0 - mixed_prob]}
    expert = TabularPolicy.from_function(mdp, lambda h, x, prefix: rows[x])
    meta = {"weights": w.tolist(), "scale": scale, "radius": radius, "mixed_prob": mixed_prob}
    return LinearInstance(f"misspecified-linear(H={H})", mdp, fm, EuclideanBall(radius), expert, meta)


__all__ = [
    "InstanceBundle", "make_delta_instance", "make_h_instance", "make_unbounded_instance",
    "ConsistencyGame", "GameLayer", "GuessPolicy", "SecretPolicy", "ExpertView", "GameStats",
    "make_consistency_game", "run_iterative_learner", "omniscient_learner", "layerwise_log_loss_learner",
    "game_log_loss_fit", "game_best_in_class",
    "LinearInstance", "make_misspecified_linear_instance",
]
