import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from arbc.bc import log_loss_bc_finite
from arbc.errors import DomainError, ShapeError
from arbc.estimators import (
    ESTIMATORS, FINITE_CLASS_ESTIMATORS, ChunkKR, GradientLogLossBC, LayeredRhoBC, LogLossBC, RhoBC,
    check_trajectories, make_estimator,
)
from arbc.instances import make_delta_instance, make_misspecified_linear_instance
from arbc.rho import rho_bc_finite


@pytest.fixture
def bundle():
    return make_delta_instance(8, 4, 0.1)


class TestProtocol:
    """fit / predict_proba / score on every estimator."""

    @pytest.mark.parametrize("name", sorted(FINITE_CLASS_ESTIMATORS))
    def test_finite_estimators(self, name, bundle, rng):
        data = bundle.sample(bundle.metadata.get("min_n") or 200, rng)
        model = make_estimator(name, policy_class=bundle.policy_class)
        with pytest.raises(NotFittedError):
            model.predict_proba(1, [0], np.zeros((1, 0), dtype=int))
        assert model.fit(data) is model
        assert model.policy_ is bundle.policy_class[model.selected_index_]
        p = model.predict_proba(1, data.contexts, data.actions[:, :0])
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert model.predict(1, data.contexts, data.actions[:, :0]).shape == (len(data),)
        assert np.isfinite(model.score(data)) or model.score(data) == -np.inf

    def test_arrays_match_dataset(self, bundle, rng):
        data = bundle.sample(300, rng)
        a = LogLossBC(bundle.policy_class).fit(data)
        b = LogLossBC(bundle.policy_class).fit(data.contexts, data.actions)
        assert a.selected_index_ == b.selected_index_
        assert a.policy_ is log_loss_bc_finite(bundle.policy_class, data)
        np.testing.assert_allclose(a.score(data), b.score(data.contexts, data.actions), rtol=0, atol=0)

    def test_rho_matches_function(self, bundle, rng):
        data = bundle.sample(300, rng)
        assert RhoBC(bundle.policy_class).fit(data).policy_ is rho_bc_finite(bundle.policy_class, data)

    def test_layered(self, bundle, rng):
        data = bundle.sample(300, rng)
        model = LayeredRhoBC([bundle.policy_class] * 8).fit(data)
        p = model.predict_proba(3, data.contexts[:5], data.actions[:5, :2])
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        with pytest.raises(DomainError):
            LayeredRhoBC().fit(data)

    def test_linear_estimators(self, rng):
        li = make_misspecified_linear_instance(3)
        data = li.sample(200, rng)
        g = GradientLogLossBC(li.feature_map, li.param_set, n_iterations=200).fit(data)
        assert li.param_set.contains(g.coef_)
        c = ChunkKR(li.feature_map, K=3, overrides=dict(B=10.0, gamma=1e-3, eps_apx=0.05, T=200, eta=1.0)).fit(data)
        assert 0.0 <= li.hellinger(c.policy_) <= 2.0
        with pytest.raises(DomainError):
            GradientLogLossBC().fit(data)
        with pytest.raises(DomainError):
            ChunkKR().fit(data)


class TestParams:
    """Parameter handling and the registry."""

    def test_get_set_params(self, bundle):
        model = make_estimator("boosted_log_loss", policy_class=bundle.policy_class, delta=0.2)
        params = model.get_params()
        assert params["delta"] == 0.2 and params["random_state"] is None
        model.set_params(delta=0.3)
        assert model.delta == 0.3
        assert clone(model).get_params()["delta"] == 0.3

    def test_registry(self):
        assert set(ESTIMATORS) >= FINITE_CLASS_ESTIMATORS | {"layered_rho", "gaalm", "chunk_kr"}
        for name, cls in ESTIMATORS.items():
            assert cls.name == name
        with pytest.raises(DomainError, match="unknown estimator"):
            make_estimator("nope")

    def test_empty_class(self, bundle, rng):
        with pytest.raises(DomainError):
            LogLossBC([]).fit(bundle.sample(300, rng))

    def test_boosted_seed(self, bundle, rng):
        data = bundle.sample(400, rng)
        a = make_estimator("boosted_log_loss", policy_class=bundle.policy_class, random_state=3).fit(data)
        b = make_estimator("boosted_log_loss", policy_class=bundle.policy_class, random_state=3).fit(data)
        assert a.selected_index_ == b.selected_index_


class TestInputChecks:
    """Coercion of (contexts, actions) pairs."""

    def test_shapes(self):
        with pytest.raises(ShapeError):
            check_trajectories(np.zeros(3, dtype=int))
        with pytest.raises(ShapeError):
            check_trajectories(np.zeros(3, dtype=int), np.zeros((2, 2), dtype=int))
        with pytest.raises(ShapeError):
            check_trajectories(np.zeros(3), np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            check_trajectories(np.zeros((3, 1), dtype=int), np.zeros((3, 2), dtype=int))

    def test_dataset_with_y(self, bundle, rng):
        data = bundle.sample(300, rng)
        with pytest.raises(ShapeError):
            check_trajectories(data, data.actions)
