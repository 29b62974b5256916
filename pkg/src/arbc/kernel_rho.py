"""Kernelized rho-estimation for binary autoregressive linear models.

The estimator relaxes the rho min-max program to the RKHS of the product
kernel ``K(u, u') = prod_h 1 / (1 - <u_h, u'_h> / 2)`` and solves the resulting
convex-concave program in coefficient space by projected gradient
descent-ascent.  Chunking applies it to blocks of ``K`` consecutive steps.

Anchors that share a context are merged and carried with a multiplicity
weight.  With ``D`` the diagonal of multiplicities and ``S`` the Gram matrix
of distinct anchors, the full Gram matrix is ``E S E^T`` and its square root
acts on the span of ``E`` as ``(D^{1/2} S D^{1/2})^{1/2}``; every quantity the
algorithm touches lives in that span, so the reduction is exact.
"""
from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

from .core import Dataset, all_strings, prefix_codes
from .errors import DomainError, InfeasibleError, NumericCapError, NumericError, ShapeError
from .policies import FeatureMap, Policy, feature_map_from_dict, register_policy, policy_from_dict

GRAM_CAP = 2 ** 24
B_CAP = 1e6
RANK_TOL = 1e-10
PSD_TOL = 1e-8
EPS_PROJ_FLOOR = 1e-12
RESIDUAL_TOL = 1e-9
GAP_REL_TOL = 1e-13
ACTIVE_SET_FACTOR = 4
MEMBER_TOL = 1e-12


# ----------------------------------------------------------------------------
# joint features and kernel


def joint_features(feature_map: FeatureMap, contexts: np.ndarray, prefixes: np.ndarray,
                   strings: np.ndarray, L: float | None = None, normalize: bool = True) -> np.ndarray:
    """Joint feature ``u`` of every (context, prefix) row and chunk string.

    Returns shape ``(n, S, K, d)`` for ``n`` rows and ``S`` strings of length
    ``K``.  Entry ``[i, s, j]`` is
    ``phi(x_i, p_i . s_{1:j-1} . (1 - s_j)) - phi(x_i, p_i . s_{1:j})``,
    divided by ``2 L`` when ``normalize`` is set.  Binary alphabets only.
    """
    contexts = np.asarray(contexts, dtype=np.int64)
    prefixes = np.asarray(prefixes, dtype=np.int64).reshape(contexts.size, -1)
    strings = np.asarray(strings, dtype=np.int64)
    n, p = prefixes.shape
    S, K = strings.shape
    out = np.empty((n, S, K, feature_map.dim))
    scale = 1.0
    if normalize:
        L = feature_map.L if L is None else L
        L = feature_map.B if L is None else L
        scale = 1.0 / (2.0 * L)
    for s in range(S):
        for j in range(K):
            head = np.broadcast_to(strings[s, :j], (n, j))
            taken = np.concatenate([prefixes, head, np.full((n, 1), strings[s, j])], axis=1)
            other = taken.copy()
            other[:, -1] = 1 - strings[s, j]
            h = p + j + 1
            out[:, s, j] = scale * (feature_map.features(h, contexts, other) - feature_map.features(h, contexts, taken))
    return out


def kernel_matrix(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Kernel values between joint features ``U (n1, K, d)`` and ``V (n2, K, d)``."""
    inner = np.einsum("ikd,jkd->ijk", U, V)
    if inner.size and inner.max() >= 2.0:
        raise NumericError("kernel diverges: an inner product reached 2")
    return np.prod(1.0 / (1.0 - 0.5 * inner), axis=2)


def kernel_eval(u: np.ndarray, u_prime: np.ndarray) -> float:
    """``prod_h 1 / (1 - <u_h, u'_h> / 2)`` for two joint features of shape ``(K, d)``."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(u_prime, dtype=np.float64))
    if u.shape != v.shape:
        raise ShapeError("joint features must have equal shapes")
    return float(kernel_matrix(u[None], v[None])[0, 0])


class GramMatrix:
    """Symmetric PSD kernel table with cached eigendecomposition.

    Parameters
    ----------
    sigma : ndarray (N, N)
    weights : ndarray (N,), optional
        Anchor multiplicities.  Roots then refer to ``D^{1/2} sigma D^{1/2}``.
    group_size : int
        Number of consecutive anchors per sample (``|A|^K``).
    """

    def __init__(self, sigma: np.ndarray, weights: np.ndarray | None = None, group_size: int = 1,
                 rank_tol: float = RANK_TOL):
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ShapeError("Gram matrix must be square")
        if not np.all(np.isfinite(sigma)):
            raise NumericError("Gram matrix has non-finite entries")
        scale = max(1.0, float(np.abs(sigma).max(initial=0.0)))
        if np.abs(sigma - sigma.T).max(initial=0.0) > 1e-10 * scale:
            raise NumericError("Gram matrix is not symmetric")
        self.sigma = sigma
        self.weights = np.ones(sigma.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
        self.group_size = int(group_size)
        sw = np.sqrt(self.weights)
        M = sw[:, None] * sigma * sw[None, :]
        evals, evecs = np.linalg.eigh(0.5 * (M + M.T))
        lmax = max(float(evals.max(initial=0.0)), 0.0)
        if evals.size and evals.min() < -PSD_TOL * max(1.0, lmax):
            raise NumericError(f"Gram matrix is not PSD: min eigenvalue {evals.min():.3e}")
        self.eigvals = evals
        self.eigvecs = evecs
        keep = evals > rank_tol * lmax if lmax > 0 else np.zeros(evals.size, dtype=bool)
        self.rank = int(keep.sum())
        self._vr = evecs[:, keep]
        self._lr = evals[keep]

    @property
    def size(self) -> int:
        return self.sigma.shape[0]

    @property
    def min_eigenvalue(self) -> float:
        return float(self.eigvals.min())

    def sqrt(self) -> np.ndarray:
        lam = np.clip(self.eigvals, 0.0, None)
        return (self.eigvecs * np.sqrt(lam)) @ self.eigvecs.T

    def pinv_sqrt(self) -> np.ndarray:
        return (self._vr / np.sqrt(self._lr)) @ self._vr.T

    def span_projector(self) -> np.ndarray:
        return self._vr @ self._vr.T

    def reduced_root(self) -> np.ndarray:
        """``D^{-1/2} V_r Lambda_r^{1/2}``: maps reduced coordinates to anchor values."""
        return (self._vr * np.sqrt(self._lr)) / np.sqrt(self.weights)[:, None]

    def reduced_coefficients(self, w: np.ndarray) -> np.ndarray:
        """Per-anchor kernel coefficients ``D^{1/2} V_r Lambda_r^{-1/2} w``."""
        return np.sqrt(self.weights) * (self._vr @ (w / np.sqrt(self._lr)))


def gram_matrix(samples: Dataset, feature_map: FeatureMap, chunk_horizon: int, start: int = 0,
                L: float | None = None, normalize: bool = True, cap: int = GRAM_CAP) -> GramMatrix:
    """Full Gram matrix over anchors ``(i, a)`` for every sample and chunk string.

    Sample ``i`` contributes the context ``(x_i, a_{i, 1:start})``; anchors are
    ordered by sample, then by string code.
    """
    strings = all_strings(chunk_horizon, 2)
    N = len(samples) * strings.shape[0]
    if N * N > cap:
        raise NumericCapError(f"Gram matrix with {N} anchors exceeds cap {cap}")
    U = joint_features(feature_map, samples.contexts, samples.actions[:, :start], strings, L, normalize)
    U = U.reshape(N, chunk_horizon, feature_map.dim)
    return GramMatrix(kernel_matrix(U, U), group_size=strings.shape[0])


# ----------------------------------------------------------------------------
# projections


def project_delta_gamma(z: np.ndarray, gamma: float) -> np.ndarray:
    """l1-closest member of ``{mu in simplex : mu >= gamma}`` to ``z``.

    Coordinates below ``gamma`` are raised to it; a remaining deficit goes to
    the largest coordinate and an excess is removed from the largest
    coordinates in turn, never pushing one below ``gamma``.  Ties go to the
    lowest index.  Members of ``Delta_gamma`` (sum within ``1e-12``) are
    returned unchanged.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("cannot round a non-finite vector")
    N = z.size
    if gamma < 0 or gamma * N > 1 + 1e-12:
        raise InfeasibleError(f"floor gamma={gamma} is infeasible for {N} outcomes")
    if z.min(initial=gamma) >= gamma and abs(z.sum() - 1.0) <= MEMBER_TOL:
        return z.copy()
    mu = np.maximum(z, gamma)
    order = np.argsort(-mu, kind="stable")
    gap = 1.0 - mu.sum()
    if gap > 0:
        mu[order[0]] += gap
    elif gap < 0:
        excess = -gap
        for k in order:
            if excess <= 0:
                break
            cut = mu[k] - gamma
            if excess < cut:
                mu[k] -= excess
                break
            mu[k] = gamma
            excess -= cut
    return mu


def l1_cost(z: np.ndarray, mu: np.ndarray) -> float:
    return float(np.abs(np.asarray(z) - np.asarray(mu)).sum())


@dataclass
class ProjectionReport:
    sweeps: int
    gap: float
    residual: float


class HalfspaceProjector:
    """Euclidean projection onto ``{y : A y >= b}``.

    The default ``method="active_set"`` runs a primal active-set method from
    a feasible point (the previous projection, else a linear program) and
    falls back to Dykstra sweeps when it stalls.  ``method="dykstra"`` uses
    sweeps only.

    For halfspaces Dykstra's alternating projections reduce to cyclic dual
    coordinate ascent on multipliers ``lam >= 0`` with ``y = q + A^T lam``.
    Sweeps visit only violated constraints and those with positive
    multipliers.  After each sweep the current active set is solved exactly
    and kept when it satisfies the optimality conditions.  Termination
    requires constraint residual ``<= residual_tol * s`` and duality gap
    ``lam . (A y - b) <= eps_proj / 2 + 1e-13 * s**2`` with
    ``s = 1 + |q|``; the gap bounds the excess squared distance over the
    exact projection.
    """

    def __init__(self, A: np.ndarray, b: np.ndarray, eps_proj: float = 1e-10,
                 residual_tol: float = RESIDUAL_TOL, max_sweeps: int = 100_000, method: str = "active_set"):
        if method not in ("active_set", "dykstra"):
            raise DomainError("method must be 'active_set' or 'dykstra'")
        self.method = method
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        # identical constraint rows: keep the tightest
        key = np.round(A, 14)
        _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        tight = np.full(first.size, -np.inf)
        np.maximum.at(tight, inv, b)
        norms = np.linalg.norm(A[first], axis=1)
        nonzero = norms > 0
        if np.any(~nonzero & (tight > residual_tol)):
            raise InfeasibleError("a zero constraint row demands a positive value")
        self.A = A[first][nonzero]
        self.b = tight[nonzero]
        self.norm2 = norms[nonzero] ** 2
        self.eps_proj = max(float(eps_proj), EPS_PROJ_FLOOR)
        self.residual_tol = residual_tol
        self.max_sweeps = max_sweeps
        self._lam = np.zeros(self.b.size)
        self._last_y: np.ndarray | None = None
        self.last_report: ProjectionReport | None = None

    def _certified(self, y, lam, scale=1.0):
        s = self.A @ y - self.b
        resid = max(0.0, float(-s.min(initial=0.0)))
        gap = float(lam @ s)
        ok = resid <= self.residual_tol * scale and abs(gap) <= 0.5 * self.eps_proj + GAP_REL_TOL * scale ** 2
        return ok, resid, gap

    def _polish(self, q, lam):
        act = np.nonzero(lam > 0)[0]
        if act.size == 0:
            return None
        Aa = self.A[act]
        sol, *_ = np.linalg.lstsq(Aa @ Aa.T, self.b[act] - Aa @ q, rcond=None)
        if np.any(sol < 0):
            return None
        new = np.zeros_like(lam)
        new[act] = sol
        return new

    def _feasible_point(self, n):
        if self._last_y is not None:
            return self._last_y
        res = linprog(np.zeros(n), A_ub=-self.A, b_ub=-self.b, bounds=[(None, None)] * n, method="highs")
        if res.status == 2:
            raise InfeasibleError("constraint set is empty")
        if res.status != 0:
            return None
        return np.asarray(res.x)

    def _active_set(self, q, scale):
        """Primal active-set iterations from a feasible point; ``None`` when they stall."""
        x = self._feasible_point(q.size)
        if x is None:
            return None
        x = x.copy()
        tol = 0.1 * self.residual_tol * scale
        work: list[int] = []
        lam = np.zeros(self.b.size)
        unit = self.A / np.sqrt(self.norm2)[:, None]
        full_step = False
        for _ in range(ACTIVE_SET_FACTOR * (self.b.size + q.size + 1)):
            g = q - x
            if work:
                mult, *_ = np.linalg.lstsq(unit[work].T, g, rcond=None)
                p = g - unit[work].T @ mult
            else:
                mult = np.zeros(0)
                p = g
            # after a full step x minimizes on the working face up to rounding
            if full_step or np.linalg.norm(p) <= 1e-13 * scale:
                full_step = False
                if work and mult.max() > tol:
                    del work[int(np.argmax(mult))]
                    continue
                lam[:] = 0.0
                lam[work] = np.maximum(-mult, 0.0) / np.sqrt(self.norm2[work])
                return x, lam
            Ap = unit @ p
            slack = (self.A @ x - self.b) / np.sqrt(self.norm2)
            alpha, block = 1.0, -1
            cand = np.nonzero(Ap < -1e-12 * np.linalg.norm(p))[0]
            cand = cand[~np.isin(cand, work)]
            if cand.size:
                steps = np.maximum(slack[cand], 0.0) / -Ap[cand]
                j = int(np.argmin(steps))
                if steps[j] < 1.0:
                    alpha, block = float(steps[j]), int(cand[j])
            x = x + alpha * p
            if block >= 0:
                work.append(block)
            else:
                full_step = True
        return None

    def project(self, q: np.ndarray, warm_start: bool = True) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        scale = 1.0 + float(np.linalg.norm(q))
        if self.method == "active_set":
            out = self._active_set(q, scale)
            if out is not None:
                y, lam = out
                ok, resid, gap = self._certified(y, lam, scale)
                ok = ok and np.linalg.norm(y - q - self.A.T @ lam) <= self.residual_tol * scale
                if ok:
                    self._lam, self._last_y = lam, y
                    self.last_report = ProjectionReport(0, gap, resid)
                    return y
                warm_start, self._lam = True, lam
        lam = self._lam.copy() if warm_start else np.zeros(self.b.size)
        y = q + self.A.T @ lam
        for sweep in range(1, self.max_sweeps + 1):
            s = self.A @ y - self.b
            for k in np.nonzero((s < 0) | (lam > 0))[0]:
                a = self.A[k]
                new = max(0.0, lam[k] - (a @ y - self.b[k]) / self.norm2[k])
                d = new - lam[k]
                if d != 0.0:
                    y += d * a
                    lam[k] = new
            ok, resid, gap = self._certified(y, lam, scale)
            if not ok:
                polished = self._polish(q, lam)
                if polished is not None:
                    y2 = q + self.A.T @ polished
                    ok2, resid2, gap2 = self._certified(y2, polished, scale)
                    if ok2:
                        lam, y, ok, resid, gap = polished, y2, ok2, resid2, gap2
            if ok:
                self._lam = lam
                if np.all(self.A @ y >= self.b):
                    self._last_y = y
                self.last_report = ProjectionReport(sweep, gap, resid)
                return y
        raise NumericCapError(f"projection did not certify within {self.max_sweeps} sweeps")


def y_constraints(root: np.ndarray, group_size: int, gamma: float, eps_apx: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``(A, b)`` of ``{y : A y >= b}`` describing the set Y for anchor map ``root``.

    ``root @ y`` gives the anchor values; consecutive blocks of ``group_size``
    anchors belong to one sample and must sum into ``[1 - eps_apx, 1 + eps_apx]``.
    """
    N = root.shape[0]
    if N % group_size:
        raise ShapeError("anchor count is not a multiple of the group size")
    sums = root.reshape(N // group_size, group_size, -1).sum(axis=1)
    A = np.concatenate([root, sums, -sums])
    b = np.concatenate([np.full(N, gamma), np.full(len(sums), 1.0 - eps_apx), np.full(len(sums), -1.0 - eps_apx)])
    return A, b


def certify_nonempty(A: np.ndarray, b: np.ndarray, root: np.ndarray, group_size: int) -> np.ndarray:
    """A point of ``{y : A y >= b}``: the uniform-policy coefficients when representable, else by LP."""
    target = np.full(root.shape[0], 1.0 / group_size)
    y, *_ = np.linalg.lstsq(root, target, rcond=None)
    if np.all(A @ y - b >= -RESIDUAL_TOL):
        return y
    res = linprog(np.zeros(A.shape[1]), A_ub=-A, b_ub=-b, bounds=[(None, None)] * A.shape[1], method="highs")
    if res.status != 0:
        raise InfeasibleError("constraint set Y is empty for these gamma / eps_apx")
    return res.x


def project_onto_Y(q: np.ndarray, gram: GramMatrix, gamma: float, eps_apx: float, eps_proj: float = 1e-10) -> np.ndarray:
    """Approximate Euclidean projection of ``q`` onto
    ``{y : (S y)_{i,a} >= gamma, sum_a (S y)_{i,a} in [1 - eps_apx, 1 + eps_apx]}``
    with ``S`` the symmetric square root of ``gram``.
    """
    root = gram.sqrt()
    A, b = y_constraints(root, gram.group_size, gamma, eps_apx)
    certify_nonempty(A, b, root, gram.group_size)
    return HalfspaceProjector(A, b, eps_proj).project(q, warm_start=False)


# ----------------------------------------------------------------------------
# saddle-point solver


@dataclass
class SaddleProblem:
    """Projected gradient iteration ``x <- Proj(x - eta g(x))`` for a monotone field ``g``."""

    vector_field: Callable[[np.ndarray], np.ndarray]
    project: Callable[[np.ndarray], np.ndarray]
    dim: int
    T: int
    eta: float
    R: float | None = None
    L: float | None = None


@dataclass
class SaddleResult:
    average: np.ndarray
    iterates: list = field(default_factory=list)
    last: np.ndarray | None = None

    def split(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.average[:k], self.average[k:]


def pgd_saddle(problem: SaddleProblem, keep_iterates: bool = True) -> SaddleResult:
    """Start at ``Proj(0)``, take ``T - 1`` projected steps and average all ``T`` iterates."""
    if problem.T < 1:
        raise DomainError("T must be >= 1")
    x = problem.project(np.zeros(problem.dim))
    total = x.copy()
    iterates = [x.copy()] if keep_iterates else []
    for _ in range(problem.T - 1):
        g = problem.vector_field(x)
        if not np.all(np.isfinite(g)):
            raise NumericError("vector field returned a non-finite value")
        x = problem.project(x - problem.eta * g)
        total += x
        if keep_iterates:
            iterates.append(x.copy())
    return SaddleResult(total / problem.T, iterates, x)


def tau_prime(r: np.ndarray) -> np.ndarray:
    s = np.sqrt(r)
    return -1.0 / ((1.0 + s) ** 2 * s)


# ----------------------------------------------------------------------------
# kernel policy


@register_policy("kernel")
class KernelPolicy(Policy):
    """Chunk policy ``x, a_{1:start} -> Delta_gamma(A^K)`` defined by kernel coefficients.

    The chunk distribution at a context is the ``Delta_gamma`` rounding of
    ``sum_j alpha_j K(anchor_j, u(x, a))`` over strings ``a``; per-step
    conditionals are ratios of its marginals.  Steps ``start + 1 .. start + K``
    are served.
    """

    def __init__(self, anchors: np.ndarray, alpha: np.ndarray, gamma: float, feature_map: FeatureMap,
                 start: int = 0, L: float | None = None, normalize: bool = True, metadata: dict | None = None):
        anchors = np.asarray(anchors, dtype=np.float64)
        K = anchors.shape[1]
        super().__init__(2, start + K)
        self.anchors = anchors
        self.alpha = np.asarray(alpha, dtype=np.float64)
        if self.alpha.shape != (anchors.shape[0],):
            raise ShapeError("one coefficient per anchor required")
        if gamma * 2 ** K > 1 + 1e-12:
            raise InfeasibleError("gamma too large for the chunk")
        self.gamma = float(gamma)
        self.feature_map = feature_map
        self.start = int(start)
        self.chunk = K
        self.L = L
        self.normalize = normalize
        self.metadata = dict(metadata or {})
        self._strings = all_strings(K, 2)
        self._cache: dict = {}
        self._lock = threading.Lock()

    def raw_scores(self, context: int, prefix: Sequence[int] = ()) -> np.ndarray:
        pre = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
        U = joint_features(self.feature_map, np.array([context]), pre, self._strings, self.L, self.normalize)[0]
        return kernel_matrix(U, self.anchors) @ self.alpha

    def chunk_distribution(self, context: int, prefix: Sequence[int] = ()) -> np.ndarray:
        key = (int(context), tuple(int(a) for a in prefix))
        if len(key[1]) != self.start:
            raise ShapeError(f"chunk context needs a prefix of length {self.start}")
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        mu = project_delta_gamma(self.raw_scores(*key), self.gamma)
        mu.setflags(write=False)
        with self._lock:
            self._cache.setdefault(key, mu)
        return self._cache[key]

    def conditionals(self, h, contexts, prefixes):
        j = h - self.start
        if not 1 <= j <= self.chunk:
            raise DomainError(f"step {h} is outside this chunk")
        contexts = np.asarray(contexts, dtype=np.int64)
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(contexts.size, h - 1)
        keys = np.concatenate([contexts[:, None], prefixes[:, : self.start]], axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        inner = prefix_codes(prefixes[:, self.start:], 2)
        out = np.empty((contexts.size, 2))
        for u, row in enumerate(uniq):
            mu = self.chunk_distribution(row[0], row[1:])
            marg = mu.reshape(2 ** (j - 1), 2, 2 ** (self.chunk - j)).sum(axis=2)
            cond = marg / marg.sum(axis=1, keepdims=True)
            sel = inv == u
            out[sel] = cond[inner[sel]]
        return out

    def to_dict(self):
        return {"type": self.tag, "anchors": self.anchors.tolist(), "alpha": self.alpha.tolist(),
                "gamma": self.gamma, "feature_map": self.feature_map.to_dict(), "start": self.start,
                "L": self.L, "normalize": self.normalize}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["anchors"], dtype=float), np.array(d["alpha"], dtype=float), d["gamma"],
                   feature_map_from_dict(d["feature_map"]), d["start"], d["L"], d["normalize"])


@register_policy("chunked")
class ChunkedPolicy(Policy):
    """Concatenation of chunk policies covering steps ``1..H``."""

    def __init__(self, chunks: Sequence[KernelPolicy], metadata: dict | None = None):
        super().__init__(2, chunks[-1].start + chunks[-1].chunk)
        self.chunks = tuple(chunks)
        self.metadata = dict(metadata or {})
        self._owner = []
        for c, kp in enumerate(self.chunks):
            self._owner.extend([c] * kp.chunk)

    def conditionals(self, h, contexts, prefixes):
        return self.chunks[self._owner[h - 1]].conditionals(h, contexts, prefixes)

    def to_dict(self):
        return {"type": self.tag, "chunks": [c.to_dict() for c in self.chunks], "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        return cls([policy_from_dict(c) for c in d["chunks"]], d.get("metadata"))


def kernel_policy_conditional(kp: KernelPolicy, context: int, prefix: Sequence[int] = ()) -> np.ndarray:
    return kp.chunk_distribution(context, prefix)


# ----------------------------------------------------------------------------
# estimators


@dataclass
class KernelRhoParams:
    B: float
    gamma: float
    eps_apx: float
    eps_opt: float
    C: float = 1.0
    T: int | None = None
    eta: float | None = None
    eps_proj: float | None = None

    def resolved(self, chunk: int, max_iterations: int) -> "KernelRhoParams":
        T = self.T
        if T is None:
            T_real = 4 * self.C ** 2 * 2.0 ** (2 * chunk + 2) * self.B / (self.gamma ** 3 * self.eps_opt ** 2)
            if not math.isfinite(T_real) or T_real > max_iterations:
                raise NumericCapError(f"default iteration count {T_real:.3e} exceeds cap {max_iterations}; pass T")
            T = int(math.ceil(T_real))
        if T > max_iterations:
            raise NumericCapError(f"T={T} exceeds cap {max_iterations}")
        eta = self.eta
        if eta is None:
            eta = self.B * self.gamma ** 1.5 * 2.0 ** (-chunk - 1) * math.sqrt(2.0 / T)
        eps_proj = self.eps_proj
        if eps_proj is None:
            eps_proj = 1.0 / (16.0 * self.B * float(T) ** 4)
        eps_proj = max(eps_proj, EPS_PROJ_FLOOR)
        return KernelRhoParams(self.B, self.gamma, self.eps_apx, self.eps_opt, self.C, T, eta, eps_proj)


def capped_B(value: float) -> float:
    if not math.isfinite(value) or value > B_CAP:
        warnings.warn(f"norm budget B={value:.3e} capped at {B_CAP:.0e}", RuntimeWarning, stacklevel=3)
        return B_CAP
    return value


def default_B(horizon: int, L: float, eps: float, C_apx: float = 1.0) -> float:
    """``(L^2 H 2^{3H+2} e^{2 L^2 H + 1} / eps)^{C_apx L^2 H}``, capped at ``B_CAP``."""
    H = horizon
    log_B = C_apx * L * L * H * (math.log(L * L * H) + (3 * H + 2) * math.log(2) + 2 * L * L * H + 1 - math.log(eps))
    return max(capped_B(math.exp(log_B) if log_B < 700 else math.inf), 1.0)


def default_gamma(horizon: int, L: float) -> float:
    return math.exp(-2 * L * L * horizon - 1) * 2.0 ** (-horizon)


def default_eps_apx(horizon: int, L: float, eps: float) -> float:
    return math.exp(-3 * L * L * horizon - 2) * 2.0 ** (-1.5 * horizon) * eps


def chunk_defaults(chunk: int, horizon: int, L: float, eps: float, C_apx: float = 1.0,
                   skip: Sequence[str] = ()) -> dict:
    """Chunk parameters: the single-fit formulas at the chunk horizon with ``eps / H``.

    Names in ``skip`` are left out (and not evaluated).
    """
    e = eps / horizon
    formulas = {
        "B": lambda: default_B(chunk, L, e, C_apx),
        "gamma": lambda: default_gamma(chunk, L),
        "eps_apx": lambda: default_eps_apx(chunk, L, e),
        "eps_opt": lambda: e,
    }
    return {k: f() for k, f in formulas.items() if k not in skip}


def _chunk_data(data: Dataset, start: int, stop: int):
    keys = np.concatenate([data.contexts[:, None], data.actions[:, :start]], axis=1)
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    codes = prefix_codes(data.actions[:, start:stop], 2)
    return uniq, inv.reshape(-1), counts, codes


def kernelized_rho(data: Dataset, feature_map: FeatureMap, B: float, gamma: float, eps_apx: float,
                   eps_opt: float, *, start: int = 0, stop: int | None = None, T: int | None = None,
                   eta: float | None = None, eps_proj: float | None = None, C: float = 1.0,
                   L: float | None = None, normalize: bool = True, max_iterations: int = 10 ** 6,
                   cap: int = GRAM_CAP) -> KernelPolicy:
    """Kernelized rho-estimator for the chunk of steps ``start + 1 .. stop``.

    The chunk context of sample ``i`` is ``(x_i, a_{i,1:start})``.  ``T``,
    ``eta`` and ``eps_proj`` default to the closed-form choices driven by
    ``B``, ``gamma``, ``eps_opt`` and ``C``; an iteration count above
    ``max_iterations`` raises :class:`NumericCapError`.
    """
    if len(data) == 0:
        raise DomainError("dataset is empty")
    stop = data.horizon if stop is None else stop
    Kc = stop - start
    if Kc < 1:
        raise DomainError("empty chunk")
    if np.any(data.actions > 1):
        raise DomainError("kernelized rho supports binary alphabets only")
    if min(B, gamma, eps_apx, eps_opt) <= 0:
        raise DomainError("B, gamma, eps_apx and eps_opt must be positive")
    params = KernelRhoParams(B, gamma, eps_apx, eps_opt, C, T, eta, eps_proj).resolved(Kc, max_iterations)
    n = len(data)
    G_strings = 2 ** Kc
    uniq, inv, counts, codes = _chunk_data(data, start, stop)
    m = uniq.shape[0]
    N = m * G_strings
    if N * N > cap:
        raise NumericCapError(f"{N} distinct anchors exceed the Gram cap {cap}")
    strings = all_strings(Kc, 2)
    U = joint_features(feature_map, uniq[:, 0], uniq[:, 1:], strings, L, normalize).reshape(N, Kc, feature_map.dim)
    gram = GramMatrix(kernel_matrix(U, U), weights=np.repeat(counts, G_strings).astype(np.float64), group_size=G_strings)
    root = gram.reduced_root()
    r = root.shape[1]
    A, b = y_constraints(root, G_strings, params.gamma, params.eps_apx)
    certify_nonempty(A, b, root, G_strings)

    obs = inv * G_strings + codes
    obs_u, obs_w = np.unique(obs, return_counts=True)
    Z = root[obs_u]
    wts = obs_w / n

    def field_(x):
        za, zb = Z @ x[:r], Z @ x[r:]
        if np.any(za <= 0) or np.any(zb <= 0):
            raise NumericError("iterate left the positive orthant of anchor values")
        ratio = za / zb
        tp = tau_prime(ratio) * wts
        ga = Z.T @ (tp / zb)
        gb = Z.T @ (tp * za / zb ** 2)
        return np.concatenate([ga, gb])

    pa = HalfspaceProjector(A, b, params.eps_proj)
    pb = HalfspaceProjector(A, b, params.eps_proj)

    def proj(x):
        return np.concatenate([pa.project(x[:r]), pb.project(x[r:])])

    problem = SaddleProblem(field_, proj, 2 * r, params.T, params.eta)
    result = pgd_saddle(problem, keep_iterates=False)
    alpha_bar = result.average[:r]
    coef = gram.reduced_coefficients(alpha_bar)
    meta = {"B": params.B, "gamma": params.gamma, "eps_apx": params.eps_apx, "eps_opt": params.eps_opt,
            "C": params.C, "T": params.T, "eta": params.eta, "eps_proj": params.eps_proj,
            "anchors": N, "rank": gram.rank, "start": start, "stop": stop}
    return KernelPolicy(U, coef, params.gamma, feature_map, start, L, normalize, meta)


def chunk_kr(data: Dataset, K: int, L: float, eps: float, feature_map: FeatureMap, *,
             C_apx: float = 1.0, overrides: dict | None = None, max_iterations: int = 10 ** 6,
             cap: int = GRAM_CAP) -> ChunkedPolicy:
    """Fit one kernelized rho-estimator per chunk of ``K`` steps and chain them.

    When ``K`` does not divide ``H`` the last chunk has ``H mod K`` steps and
    the policy metadata records it.  ``overrides`` replaces any of ``B``,
    ``gamma``, ``eps_apx``, ``eps_opt``, ``C``, ``T``, ``eta``, ``eps_proj``.
    """
    H = data.horizon
    if not 1 <= K <= H:
        raise DomainError("chunk size must lie in [1, H]")
    overrides = dict(overrides or {})
    unknown = set(overrides) - {"B", "gamma", "eps_apx", "eps_opt", "C", "T", "eta", "eps_proj"}
    if unknown:
        raise DomainError(f"unknown overrides {sorted(unknown)}")
    bounds = list(range(0, H, K))
    chunks = []
    for c, start in enumerate(bounds):
        stop = min(start + K, H)
        kw = chunk_defaults(stop - start, H, L, eps, C_apx, skip=tuple(overrides))
        kw.update(overrides)
        try:
            chunks.append(kernelized_rho(data, feature_map, kw.pop("B"), kw.pop("gamma"), kw.pop("eps_apx"),
                                         kw.pop("eps_opt"), start=start, stop=stop, L=L,
                                         max_iterations=max_iterations, cap=cap, **kw))
        except (NumericCapError, InfeasibleError, NumericError, DomainError) as exc:
            raise type(exc)(f"chunk {c} (steps {start + 1}..{stop}): {exc}") from exc
    meta = {"K": K, "H": H, "remainder": H % K, "L": L, "eps": eps}
    return ChunkedPolicy(chunks, meta)
