import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentrem.errors import ConfigError, DimensionError
from latentrem.model import (
    DegenerateReferenceWarning,
    DyadIndex,
    EffectSpec,
    LatentTrajectory,
    ModelConfig,
    NegativeBinomial,
    NetworkPanel,
    Parameters,
    Poisson,
    align_procrustes,
    family_moments,
    jacobian,
    jacobian_blocks,
    make_family,
    pairwise_sq_distances,
    rate,
)

from oracles import fd_jacobian


def make_panel(p=3, n=2, directed=True, exposure=None, seed=0):
    dy = DyadIndex.build(p, directed)
    counts = np.random.default_rng(seed).poisson(1.0, size=(n, len(dy)))
    if exposure is None:
        exposure = np.ones((n, p))
    counts = np.where(np.asarray(exposure)[:, dy.senders] > 0, counts, 0)
    return NetworkPanel(counts, exposure, directed)


class TestDyadIndex:
    def test_directed_lexicographic(self):
        dy = DyadIndex.build(3, True)
        pairs = list(zip(dy.senders, dy.receivers))
        assert pairs == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]

    def test_undirected_lexicographic(self):
        dy = DyadIndex.build(4, False)
        pairs = list(zip(dy.senders, dy.receivers))
        assert pairs == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]

    @given(st.integers(2, 9), st.booleans())
    def test_row_is_inverse(self, p, directed):
        dy = DyadIndex.build(p, directed)
        assert len(dy) == (p * (p - 1) if directed else p * (p - 1) // 2)
        for r, (i, j) in enumerate(zip(dy.senders, dy.receivers)):
            assert dy.row(int(i), int(j)) == r
            if not directed:
                assert dy.row(int(j), int(i)) == r

    def test_self_loop_rejected(self):
        with pytest.raises(KeyError):
            DyadIndex.build(3, True).row(1, 1)


class TestNetworkPanel:
    def test_shapes(self):
        panel = make_panel(p=4, n=3, directed=False)
        assert (panel.n, panel.p, panel.p_y) == (3, 4, 6)

    def test_wrong_dyad_count(self):
        with pytest.raises(DimensionError) as info:
            NetworkPanel(np.zeros((2, 5), int), np.ones((2, 3)), True)
        assert info.value.axis == "dyad"

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            NetworkPanel(-np.ones((1, 6), int), np.ones((1, 3)), True)

    def test_zero_exposure_with_counts(self):
        counts = np.zeros((1, 6), int)
        counts[0, 0] = 1  # dyad (0, 1)
        exposure = np.array([[0.0, 1.0, 1.0]])
        with pytest.raises(ValueError, match="zero exposure"):
            NetworkPanel(counts, exposure, True)

    def test_from_counts_infers_nodes(self):
        panel = NetworkPanel.from_counts(np.zeros((2, 10), int), directed=False)
        assert panel.p == 5

    def test_reversed_and_equality(self):
        panel = make_panel(n=4)
        assert panel.reversed().reversed() == panel
        np.testing.assert_array_equal(panel.reversed().counts[0], panel.counts[-1])


class TestFamilies:
    def test_poisson_variance_is_mean(self):
        mu = np.array([1.0, 2.0])
        mean, var = family_moments(mu, Poisson())
        np.testing.assert_array_equal(mean, var)
        np.testing.assert_array_equal(var, [1.0, 2.0])

    def test_negbin_variance(self):
        _, var = family_moments(np.array([2.0]), NegativeBinomial(1.0))
        np.testing.assert_allclose(var, [6.0])

    def test_zero_mean(self):
        for fam in (Poisson(), NegativeBinomial(1.0)):
            assert family_moments(np.zeros(1), fam)[1][0] == 0.0

    def test_negative_dispersion(self):
        with pytest.raises(ConfigError):
            NegativeBinomial(-0.5)

    def test_negative_mean(self):
        with pytest.raises(ValueError):
            family_moments(np.array([-1.0]), Poisson())

    def test_negbin_logpmf_normalises(self):
        fam = NegativeBinomial(0.7)
        y = np.arange(400)
        np.testing.assert_allclose(np.exp(fam.logpmf(y, 3.0)).sum(), 1.0, atol=1e-12)

    def test_make_family(self):
        assert isinstance(make_family("poisson"), Poisson)
        assert make_family({"name": "negbin", "dispersion": 2.0}).dispersion == 2.0


class TestRate:
    def test_coincident_unit_rate(self):
        panel = make_panel(p=2, n=1, directed=False)
        mu = rate(np.zeros(2), Parameters(intercept=0.0), panel, 1)
        np.testing.assert_array_equal(mu, [1.0])

    def test_unit_distance(self):
        panel = make_panel(p=2, n=1, directed=False)
        mu = rate(np.array([0.0, 1.0]), Parameters(intercept=0.0), panel, 1)
        np.testing.assert_allclose(mu, [0.36787944117144233], rtol=1e-15)

    def test_zero_exposure_is_exact_zero(self):
        exposure = np.array([[0.0, 1.0, 1.0]])
        panel = make_panel(p=3, n=1, exposure=exposure)
        mu = rate(np.zeros(3), Parameters(intercept=50.0), panel, 1)
        dy = panel.dyads
        assert np.all(mu[dy.senders == 0] == 0.0)
        assert np.all(mu[dy.senders != 0] > 0.0)

    def test_effects_enter_log_rate(self):
        panel = make_panel(p=3, n=1)
        params = Parameters(intercept=0.2, sender_effects=np.array([0.1, 0.0, -0.1]),
                            receiver_effects=np.array([0.0, 0.3, -0.3]))
        mu = rate(np.zeros(3), params, panel, 1)
        dy = panel.dyads
        expected = np.exp(0.2 + params.sender_effects[dy.senders] + params.receiver_effects[dy.receivers])
        np.testing.assert_allclose(mu, expected, rtol=1e-14)

    def test_dimension_error_names_axis(self):
        panel = make_panel(p=3, n=1)
        with pytest.raises(DimensionError) as info:
            rate(np.zeros(4), Parameters(), panel, 1)
        assert info.value.axis == "latent"

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_rigid_motion_invariance(self, seed, d):
        rng = np.random.default_rng(seed)
        p = 4
        panel = make_panel(p=p, n=1)
        x = rng.normal(size=(p, d))
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        t = rng.normal(size=d)
        params = Parameters(intercept=rng.normal())
        a = rate(x.ravel(), params, panel, 1)
        b = rate((x @ Q + t).ravel(), params, panel, 1)
        np.testing.assert_allclose(b, a, rtol=1e-10)


class TestJacobian:
    def test_unit_distance_values(self):
        panel = make_panel(p=2, n=1, directed=False)
        H = jacobian(np.array([0.0, 1.0]), Parameters(intercept=0.0), panel, 1)
        np.testing.assert_allclose(H, [[2 * np.exp(-1), -2 * np.exp(-1)]], rtol=1e-14)
        np.testing.assert_allclose(H[0, 0], 0.735759, atol=1e-6)

    def test_coincident_row_zero(self):
        panel = make_panel(p=3, n=1)
        x = np.array([0.5, 0.5, 1.0])
        H = jacobian(x, Parameters(), panel, 1)
        r = panel.dyads.row(0, 1)
        assert np.all(H[r] == 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p, d = rng.integers(2, 7), rng.integers(1, 4)
        directed = bool(rng.integers(2))
        panel = make_panel(p=p, n=1, directed=directed, exposure=rng.uniform(0.5, 2.0, size=(1, p)))
        params = Parameters(intercept=rng.normal(), sender_effects=rng.normal(size=p) * 0.3)
        x = rng.normal(size=p * d) * 0.7
        H = jacobian(x, params, panel, 1)
        H_fd = fd_jacobian(lambda z: rate(z, params, panel, 1), x)
        err = np.max(np.abs(H - H_fd)) / np.max(np.abs(H_fd))
        assert err <= 1e-5

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_sparsity(self, seed):
        rng = np.random.default_rng(seed)
        p, d = 5, 2
        panel = make_panel(p=p, n=1)
        x = rng.normal(size=p * d)
        H = jacobian(x, Parameters(), panel, 1).reshape(panel.p_y, p, d)
        nonzero_blocks = np.any(H != 0, axis=2)
        dy = panel.dyads
        for r in range(panel.p_y):
            expected = {int(dy.senders[r]), int(dy.receivers[r])}
            assert set(np.flatnonzero(nonzero_blocks[r])) == expected
        # the two blocks are negatives of each other
        _, blocks = jacobian_blocks(x, Parameters(), panel, 1)
        np.testing.assert_array_equal(H[np.arange(panel.p_y), dy.senders], blocks)
        np.testing.assert_array_equal(H[np.arange(panel.p_y), dy.receivers], -blocks)


class TestTrajectory:
    def test_rejects_asymmetric(self):
        cov = np.zeros((2, 2, 2))
        cov[0, 0, 1] = 1.0
        with pytest.raises(ValueError):
            LatentTrajectory(1, np.zeros((2, 2)), cov, "filtered")

    def test_node_major_layout(self):
        loc = np.arange(12.0).reshape(2, 3, 2)
        traj = LatentTrajectory.from_locations(loc)
        np.testing.assert_array_equal(traj.means[1, 2:4], loc[1, 1])

    def test_bands(self):
        cov = np.stack([np.diag([4.0, 1.0])] * 2)
        traj = LatentTrajectory(1, np.zeros((2, 2)), cov, "smoothed")
        lo, hi = traj.bands()
        np.testing.assert_allclose(hi[:, :, 0], [[3.92, 1.96]] * 2)
        np.testing.assert_allclose(lo, -hi)


class TestProcrustes:
    def _traj(self, seed=0, n=3, p=5, d=2):
        rng = np.random.default_rng(seed)
        return LatentTrajectory.from_locations(rng.normal(size=(n + 1, p, d)))

    def test_identity(self):
        t = self._traj()
        np.testing.assert_allclose(align_procrustes(t, t).means, t.means, atol=1e-12)

    def test_recovers_rotation(self):
        t = self._traj()
        R = np.array([[0.0, -1.0], [1.0, 0.0]])
        rotated = LatentTrajectory.from_locations(t.locations() @ R + np.array([3.0, -2.0]))
        np.testing.assert_allclose(align_procrustes(rotated, t).means, t.means, atol=1e-8)

    def test_distances_preserved(self):
        a, b = self._traj(1), self._traj(2)
        out = align_procrustes(a, b)
        np.testing.assert_allclose(pairwise_sq_distances(out), pairwise_sq_distances(a), atol=1e-10)

    def test_degenerate_reference(self):
        t = self._traj()
        ref = np.zeros((5, 2))
        with pytest.warns(DegenerateReferenceWarning):
            out = align_procrustes(t, ref)
        np.testing.assert_allclose(pairwise_sq_distances(out), pairwise_sq_distances(t), atol=1e-10)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.d == 2 and cfg.filter == "ekf" and cfg.tol == 1e-6 and cfg.max_iter == 200
        assert cfg.resolved_kappa(10) == 3.0 - 20

    def test_round_trip(self):
        cfg = ModelConfig(d=3, family=NegativeBinomial(0.5), effects=EffectSpec(sender=True))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_dict({"dd": 2})

    @pytest.mark.parametrize("kw", [{"d": 0}, {"tol": 0.0}, {"filter": "pf"}, {"sigma_structure": "banded"},
                                    {"update_steps": 6}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_kappa_bound(self):
        with pytest.raises(ConfigError):
            ModelConfig(kappa=-4.0).resolved_kappa(2)

    def test_undirected_effects_rejected(self):
        cfg = ModelConfig(effects=EffectSpec(sender=True))
        with pytest.raises(ConfigError):
            cfg.check_panel(make_panel(directed=False))

    def test_parameters_round_trip(self):
        params = Parameters(intercept=1.5, sender_effects=np.arange(3.0), sigma=np.eye(2), re_variances=(0.5, 2.0))
        back = Parameters.from_dict(params.to_dict())
        assert back.intercept == 1.5 and back.re_variances == (0.5, 2.0)
        np.testing.assert_array_equal(back.sigma, np.eye(2))
