import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from arbc.core import AutoregressiveMdp, Dataset, all_strings, exact_seq_distribution, sample_dataset, tv_distance
from arbc.errors import InfeasibleError, NumericError
from arbc.kernel_rho import (
    GramMatrix, HalfspaceProjector, KernelPolicy, SaddleProblem, chunk_kr, gram_matrix, joint_features,
    kernel_eval, kernel_matrix, kernel_policy_conditional, kernelized_rho, l1_cost, pgd_saddle,
    project_delta_gamma, project_onto_Y, y_constraints,
)
from arbc.policies import EuclideanBall, LinearPolicy, TableFeatureMap, TabularPolicy, policy_from_dict


def ball_vectors(rng, shape, radius):
    v = rng.normal(size=shape)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norms * radius * rng.uniform(0, 1, size=norms.shape)


def series_kernel(u, v, degree=200):
    """Explicit monomial feature map truncated at ``degree``, one factor per step."""
    total = 1.0
    for uh, vh in zip(u, v):
        acc = 0.0
        d = len(uh)
        for k in range(degree + 1):
            for alpha in itertools.combinations_with_replacement(range(d), k):
                counts = np.bincount(np.array(alpha, dtype=int), minlength=d)
                coef = math.factorial(k) / np.prod([math.factorial(c) for c in counts]) / 2 ** k
                acc += coef * np.prod(uh ** counts) * np.prod(vh ** counts)
        total *= acc
    return total


def grid_l1_oracle(z, gamma, step=1e-3):
    """Exact minimum l1 cost over the grid simplex with floor gamma, by min-plus recursion on the budget."""
    units = int(round(1 / step))
    lo = int(math.ceil(gamma / step - 1e-9))
    levels = np.arange(units + 1)
    best = np.full(units + 1, np.inf)
    best[0] = 0.0
    for zi in z:
        cost = np.where(levels >= lo, np.abs(levels * step - zi), np.inf)
        nxt = np.full(units + 1, np.inf)
        for s in np.nonzero(np.isfinite(best))[0]:
            upto = units - s
            cand = best[s] + cost[: upto + 1]
            nxt[s: s + upto + 1] = np.minimum(nxt[s: s + upto + 1], cand)
        best = nxt
    return best[units]


def brute_force_projection(A, b, q):
    """Projection onto {A y >= b} by enumerating active subsets and checking KKT."""
    m = A.shape[0]
    best = None
    for size in range(0, m + 1):
        for S in itertools.combinations(range(m), size):
            S = list(S)
            if S:
                AS = A[S]
                lam, *_ = np.linalg.lstsq(AS @ AS.T, b[S] - AS @ q, rcond=None)
                y = q + AS.T @ lam
                if np.any(lam < -1e-10) or np.abs(AS @ y - b[S]).max() > 1e-9:
                    continue
            else:
                y = q.copy()
            if np.all(A @ y >= b - 1e-9):
                d = np.linalg.norm(y - q)
                if best is None or d < best[0] - 1e-12:
                    best = (d, y)
        if best is not None:
            return best[1]
    return None


def simplex_projection(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1
    k = np.nonzero(u - css / np.arange(1, v.size + 1) > 0)[0][-1]
    return np.maximum(v - css[k] / (k + 1), 0)


def sign_map(mdp, dim=1, L=1.0):
    def fn(x, acts):
        v = np.zeros(dim)
        v[0] = 0.5 if acts[-1] == 0 else -0.5
        if dim > 1:
            v[1] = 0.4 * (x - 0.5) * (1 if acts[-1] == 0 else -1)
        return v
    return TableFeatureMap.from_function(mdp, fn, B=1.0, B_dot=1.0, L=L)


class TestKernel:
    """Closed-form kernel and its Gram matrices."""

    def test_zero_features(self):
        assert kernel_eval(np.zeros((3, 2)), np.zeros((3, 2))) == 1.0

    def test_unit_inner_product(self):
        u = np.array([[1.0, 0.0]])
        assert kernel_eval(u, u) == pytest.approx(2.0)

    def test_divergence_guard(self):
        u = np.array([[math.sqrt(2.0), 0.0]])
        with pytest.raises(NumericError):
            kernel_eval(u, u)

    def test_series_oracle(self, rng):
        for _ in range(20):
            K = int(rng.integers(1, 4))
            u, v = ball_vectors(rng, (K, 2), 0.9), ball_vectors(rng, (K, 2), 0.9)
            np.testing.assert_allclose(kernel_eval(u, v), series_kernel(u, v, degree=120), rtol=1e-6, atol=1e-6)

    def test_joint_feature_norms(self, rng):
        mdp = AutoregressiveMdp([0.5, 0.5], 2, 3)
        fm = sign_map(mdp, 2)
        U = joint_features(fm, np.array([0, 1]), np.zeros((2, 1)), all_strings(2, 2))
        assert U.shape == (2, 4, 2, 2)
        assert np.linalg.norm(U, axis=-1).max() <= 1.0 + 1e-12

    def test_random_grams_psd(self, rng):
        for _ in range(50):
            n, K = int(rng.integers(1, 21)), int(rng.integers(1, 5))
            U = ball_vectors(rng, (n, K, 3), 1.0)
            g = GramMatrix(kernel_matrix(U, U))
            assert g.min_eigenvalue >= -1e-8
            np.testing.assert_allclose(g.sigma, g.sigma.T, atol=1e-10)
            S = g.sqrt()
            np.testing.assert_allclose(S @ S, g.sigma, atol=1e-7 * max(1.0, np.abs(g.sigma).max()))

    def test_single_anchor(self):
        mdp = AutoregressiveMdp([1.0], 2, 1)
        fm = sign_map(mdp)
        g = gram_matrix(Dataset([0], [[0]]), fm, 1)
        assert g.size == 2
        diag = np.diag(g.sigma)
        assert np.all(diag >= 1.0)
        u = joint_features(fm, np.array([0]), np.zeros((1, 0)), np.array([[0]]))[0, 0]
        np.testing.assert_allclose(diag[0], 1 / (1 - 0.5 * u[0] @ u[0]))

    def test_pinv_root_and_span(self, rng):
        U = ball_vectors(rng, (6, 2, 2), 1.0)
        U = np.concatenate([U, U[:2]])
        g = GramMatrix(kernel_matrix(U, U))
        P = g.span_projector()
        np.testing.assert_allclose(g.sqrt() @ g.pinv_sqrt(), P, atol=1e-7)
        assert g.rank <= 6


class TestDeltaGamma:
    """l1 rounding onto the floored simplex."""

    def test_already_inside(self):
        z = np.array([0.3, 0.3, 0.4])
        np.testing.assert_array_equal(project_delta_gamma(z, 0.2), z)

    def test_two_points(self):
        mu = project_delta_gamma(np.array([0.5, 0.1]), 0.2)
        np.testing.assert_allclose(mu, [0.8, 0.2], atol=1e-15)
        np.testing.assert_allclose(l1_cost([0.5, 0.1], mu), 0.4, atol=1e-15)
        np.testing.assert_allclose(grid_l1_oracle([0.5, 0.1], 0.2), 0.4, atol=1e-12)

    def test_zero_vector(self):
        np.testing.assert_allclose(project_delta_gamma(np.zeros(4), 0.25), np.full(4, 0.25))

    def test_infeasible(self):
        with pytest.raises(InfeasibleError):
            project_delta_gamma(np.zeros(4), 0.3)

    def test_grid_oracle(self, rng):
        # grid-valued inputs have a grid-valued optimum, so the exhaustive grid is exact
        for _ in range(100):
            N = int(rng.choice([2, 4, 8]))
            gamma = np.round(rng.uniform(0, 1 / N) * rng.integers(0, 2), 3)
            z = np.round(rng.uniform(-0.3, 0.8, size=N), 3)
            mu = project_delta_gamma(z, gamma)
            assert abs(l1_cost(z, mu) - grid_l1_oracle(z, gamma)) <= 2e-3

    def test_never_worse_than_grid(self, rng):
        for _ in range(30):
            N = int(rng.choice([2, 4, 8]))
            gamma = rng.uniform(0, 1 / N)
            z = rng.uniform(-0.3, 0.8, size=N)
            assert l1_cost(z, project_delta_gamma(z, gamma)) <= grid_l1_oracle(z, gamma) + 1e-12

    @given(st.integers(0, 2 ** 32 - 1))
    def test_membership_and_idempotence(self, seed):
        rng = np.random.default_rng(seed)
        N = int(rng.choice([2, 4, 8, 16]))
        gamma = rng.uniform(0, 1 / N)
        mu = project_delta_gamma(rng.normal(size=N), gamma)
        assert mu.min() >= gamma - 1e-15
        np.testing.assert_allclose(mu.sum(), 1.0, atol=1e-12)
        np.testing.assert_array_equal(project_delta_gamma(mu, gamma), mu)


def random_y_instance(rng, n, K):
    U = ball_vectors(rng, (n * 2 ** K, K, 2), 1.0)
    g = GramMatrix(kernel_matrix(U, U), group_size=2 ** K)
    gamma = rng.uniform(0.01, 0.5) / 2 ** K
    return g, gamma, rng.uniform(0.05, 0.3)


class TestProjection:
    """Projection onto the constraint set Y."""

    def test_point_inside(self, rng):
        g, gamma, eps = random_y_instance(rng, 2, 1)
        A, b = y_constraints(g.sqrt(), g.group_size, gamma, eps)
        y0 = np.linalg.lstsq(g.sqrt(), np.full(g.size, 1 / g.group_size), rcond=None)[0]
        assert np.all(A @ y0 >= b)
        np.testing.assert_allclose(project_onto_Y(y0, g, gamma, eps), y0, atol=1e-10)

    def test_single_halfspace(self, rng):
        for _ in range(20):
            a, q = rng.normal(size=5), rng.normal(size=5)
            b = a @ q + rng.uniform(0.1, 2)
            y = HalfspaceProjector(a[None], np.array([b])).project(q)
            np.testing.assert_allclose(y, q + (b - a @ q) / (a @ a) * a, atol=1e-10)

    def test_against_active_subset_oracle(self, rng):
        checked = 0
        while checked < 15:
            n, K = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            g, gamma, eps = random_y_instance(rng, n, K)
            root = g.sqrt()
            A, b = y_constraints(root, g.group_size, gamma, eps)
            q = rng.normal(size=g.size) * 2
            oracle = brute_force_projection(A, b, q)
            if oracle is None:
                continue
            for method in ("active_set", "dykstra"):
                y = HalfspaceProjector(A, b, 1e-12, method=method).project(q)
                assert np.linalg.norm(y - oracle) <= 1e-4
                assert np.all(A @ y - b >= -1e-9 * (1 + np.linalg.norm(q)))
            checked += 1

    @given(st.integers(0, 2 ** 32 - 1))
    def test_residuals(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(30, 6))
        x0 = rng.normal(size=6)
        b = A @ x0 - rng.uniform(0, 1, size=30)
        q = rng.normal(size=6) * 5
        proj = HalfspaceProjector(A, b, 1e-12)
        y = proj.project(q)
        scale = 1 + np.linalg.norm(q)
        assert (A @ y - b).min() >= -1e-9 * scale
        # any feasible point on the segment toward x0 is no closer than y
        for t in np.linspace(0, 1, 6):
            z = y + t * (x0 - y)
            assert np.linalg.norm(z - q) >= np.linalg.norm(y - q) - 1e-7 * scale

    def test_empty_set(self):
        A = np.array([[1.0], [-1.0]])
        b = np.array([1.0, 0.0])
        with pytest.raises(InfeasibleError):
            HalfspaceProjector(A, b).project(np.zeros(1))


def game_value(M):
    """max_x min_y x^T M y over simplices by linear programming."""
    m, k = M.shape
    c = np.zeros(m + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-M.T, np.ones((k, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(k), A_eq=np.hstack([np.ones((1, m)), [[0.0]]]), b_eq=[1.0],
                  bounds=[(0, None)] * m + [(None, None)], method="highs")
    return -res.fun


def matrix_game_gap(M, T, seed=0):
    """Run the solver on min_x max_y x^T M y; return (gap of averages, 5 R L / sqrt T, value of averages)."""
    m, k = M.shape
    R = 2.0
    L = np.sqrt(2.0) * np.abs(M).max() * math.sqrt(max(m, k))

    def field(z):
        x, y = z[:m], z[m:]
        return np.concatenate([M @ y, -M.T @ x])

    def proj(z):
        return np.concatenate([simplex_projection(z[:m]), simplex_projection(z[m:])])

    res = pgd_saddle(SaddleProblem(field, proj, m + k, T, R / (L * math.sqrt(T)), R, L), keep_iterates=False)
    x, y = res.split(m)
    gap = float((x @ M).max() - (M @ y).min())
    return gap, 5 * R * L / math.sqrt(T), x, y


class TestSaddle:
    """Projected gradient descent-ascent with averaging."""

    def test_bilinear(self):
        T = 10_000
        box = lambda z: np.clip(z, -1, 1)
        res = pgd_saddle(SaddleProblem(lambda z: np.array([z[1], -z[0]]), box, 2, T, 1 / math.sqrt(T)))
        x, y = res.average
        gap = abs(y) + abs(x)  # max_y' x y' - min_x' x' y on the box
        assert gap <= 5 / math.sqrt(T)
        assert all(np.all(np.abs(it) <= 1) for it in res.iterates)

    def test_quadratic(self):
        T = 10_000
        box = lambda z: np.clip(z, -1, 1)
        field = lambda z: np.array([2 * (z[0] - 0.3), 2 * (z[1] + 0.2)])
        res = pgd_saddle(SaddleProblem(field, box, 2, T, 0.01), keep_iterates=False)
        np.testing.assert_allclose(res.average, [0.3, -0.2], atol=0.05)

    def test_matrix_games(self, rng):
        for _ in range(5):
            M = rng.uniform(-1, 1, size=(4, 4))
            gap, bound, x, y = matrix_game_gap(M, 2_000)
            assert gap <= bound
            v = -game_value(-M)
            # the averages bracket the exact value of min_x max_y x^T M y
            assert (M @ y).min() - 1e-12 <= v <= (x @ M).max() + 1e-12
            assert (x @ M).max() - v <= bound

    def test_non_finite_field(self):
        prob = SaddleProblem(lambda z: np.array([np.nan]), lambda z: z, 1, 3, 0.1)
        with pytest.raises(NumericError):
            pgd_saddle(prob)


class TestKernelPolicy:
    """Rounded kernel chunk distributions and their conditionals."""

    def _policy(self, rng, gamma, K=2):
        mdp = AutoregressiveMdp([0.5, 0.5], 2, K)
        fm = sign_map(mdp, 2)
        U = joint_features(fm, np.array([0]), np.zeros((1, 0)), all_strings(K, 2))[0]
        return KernelPolicy(U, rng.normal(size=U.shape[0]), gamma, fm), mdp

    def test_single_anchor_profile(self):
        mdp = AutoregressiveMdp([0.5, 0.5], 2, 2)
        fm = sign_map(mdp, 2)
        U = joint_features(fm, np.array([0]), np.zeros((1, 0)), all_strings(2, 2))[0]
        alpha = np.zeros(4)
        alpha[1] = 1.0
        kp = KernelPolicy(U, alpha, 0.01, fm)
        mu = kernel_policy_conditional(kp, 0)
        np.testing.assert_allclose(mu, project_delta_gamma(kernel_matrix(U, U[1:2])[:, 0], 0.01))
        np.testing.assert_allclose(mu.sum(), 1.0, atol=1e-12)

    def test_collapsed_floor(self, rng):
        kp, _ = self._policy(rng, 0.25)
        np.testing.assert_allclose(kernel_policy_conditional(kp, 1), np.full(4, 0.25))

    @given(st.integers(0, 2 ** 32 - 1))
    def test_marginal_consistency(self, seed):
        rng = np.random.default_rng(seed)
        kp, mdp = self._policy(rng, rng.uniform(0, 0.125), K=3)
        for x in (0, 1):
            mu = kernel_policy_conditional(kp, x)
            assert mu.min() >= kp.gamma - 1e-15
            chained = np.ones(8)
            for s, string in enumerate(all_strings(3, 2)):
                for h in range(1, 4):
                    chained[s] *= kp.conditional(h, x, string[: h - 1])[string[h - 1]]
            np.testing.assert_allclose(chained, mu, atol=1e-10)

    def test_round_trip(self, rng):
        kp, mdp = self._policy(rng, 0.05)
        back = policy_from_dict(kp.to_dict())
        np.testing.assert_allclose(exact_seq_distribution(mdp, back).table, exact_seq_distribution(mdp, kp).table)


FAST = dict(B=10.0, gamma=1e-3, eps_apx=0.05, T=400, eta=1.0)


class TestEstimators:
    """Kernelized rho and its chunked driver."""

    def test_full_chunk_is_single_fit(self, rng):
        mdp = AutoregressiveMdp([0.5, 0.5], 2, 2)
        fm = sign_map(mdp, 2)
        data = sample_dataset(mdp, TabularPolicy.uniform(mdp), 60, rng)
        single = kernelized_rho(data, fm, FAST["B"], FAST["gamma"], FAST["eps_apx"], 0.1, T=FAST["T"],
                                eta=FAST["eta"], L=1.0)
        chunked = chunk_kr(data, 2, 1.0, 0.1, fm, overrides=dict(FAST, eps_opt=0.1))
        np.testing.assert_array_equal(chunked.chunks[0].alpha, single.alpha)
        np.testing.assert_array_equal(exact_seq_distribution(mdp, chunked).table,
                                      exact_seq_distribution(mdp, single).table)

    def test_uniform_expert_per_step(self, rng):
        mdp = AutoregressiveMdp([0.5, 0.5], 2, 2)
        fm = sign_map(mdp, 2)
        data = sample_dataset(mdp, TabularPolicy.uniform(mdp), 2000, rng)
        pol = chunk_kr(data, 1, 1.0, 0.1, fm, overrides=FAST)
        for h in (1, 2):
            table = pol.step_table(h, 2)
            assert 0.5 * np.abs(table - 0.5).sum(axis=1).max() <= 0.05
        assert pol.metadata["remainder"] == 0

    def test_well_specified_chunk(self, rng):
        mdp = AutoregressiveMdp([0.5, 0.5], 2, 2)
        fm = sign_map(mdp, 1)
        star = LinearPolicy([1.0], fm, EuclideanBall(1.0), 2, 2)
        data = sample_dataset(mdp, star, 1000, rng)
        pol = chunk_kr(data, 2, 1.0, 0.1, fm, overrides=dict(FAST, T=1000))
        h2 = exact_seq_distribution(mdp, pol)
        from arbc.core import hellinger_squared
        assert hellinger_squared(h2, exact_seq_distribution(mdp, star)) <= 3 * 0.0 + 0.05

    def test_duplicated_samples(self, rng):
        mdp = AutoregressiveMdp([0.5, 0.5], 2, 2)
        fm = sign_map(mdp, 2)
        data = sample_dataset(mdp, TabularPolicy.uniform(mdp), 40, rng)
        twice = Dataset.concat([data, data])
        a = chunk_kr(data, 2, 1.0, 0.1, fm, overrides=FAST)
        b = chunk_kr(twice, 2, 1.0, 0.1, fm, overrides=FAST)
        np.testing.assert_allclose(exact_seq_distribution(mdp, a).table, exact_seq_distribution(mdp, b).table,
                                   atol=1e-10)

    def test_remainder_chunk(self, rng):
        mdp = AutoregressiveMdp([0.5, 0.5], 2, 3)
        fm = sign_map(mdp, 2)
        pol = chunk_kr(sample_dataset(mdp, TabularPolicy.uniform(mdp), 50, rng), 2, 1.0, 0.1, fm, overrides=FAST)
        assert [c.chunk for c in pol.chunks] == [2, 1]
        assert pol.metadata["remainder"] == 1
        t = exact_seq_distribution(mdp, pol).table
        np.testing.assert_allclose(t.sum(), 1.0, atol=1e-12)

    def test_default_iterations_capped(self, rng):
        from arbc.errors import NumericCapError
        mdp = AutoregressiveMdp([1.0], 2, 2)
        data = sample_dataset(mdp, TabularPolicy.uniform(mdp), 10, rng)
        with pytest.warns(RuntimeWarning), pytest.raises(NumericCapError, match="chunk 0"):
            chunk_kr(data, 2, 1.0, 0.1, sign_map(mdp))

    def test_infeasible_floor(self, rng):
        mdp = AutoregressiveMdp([1.0], 2, 2)
        data = sample_dataset(mdp, TabularPolicy.uniform(mdp), 10, rng)
        with pytest.raises(InfeasibleError):
            chunk_kr(data, 2, 1.0, 0.1, sign_map(mdp), overrides=dict(FAST, gamma=0.3))
