import numpy as np
import pytest

from latentrem.errors import ConfigError
from latentrem.model import NegativeBinomial, Poisson
from latentrem.simulate import (
    LogisticParams,
    SimScenario,
    calibrate_intercept,
    draw_logistic,
    simulate_counts,
    simulate_scenario,
    simulate_trajectories,
    true_rates,
)


def variance_se(x):
    """Standard error of the sample variance from the fourth central moment."""
    c = x - x.mean()
    return np.sqrt((np.mean(c**4) - np.mean(c**2) ** 2) / len(x))


class TestScenario:
    def test_defaults(self):
        sc = SimScenario()
        assert (sc.p, sc.n, sc.d) == (10, 100, 2)
        assert isinstance(sc.family, Poisson)

    @pytest.mark.parametrize("kw", [dict(p=1), dict(n=0), dict(d=0), dict(replicates=0), dict(slope=(0.3, 0.1)),
                                    dict(mean_count=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SimScenario(**kw)

    def test_round_trip(self):
        sc = SimScenario(p=4, family={"name": "negbin", "dispersion": 0.5}, static=True)
        assert SimScenario.from_dict(sc.to_dict()) == sc

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            SimScenario.from_dict({"nodes": 3})


class TestTrajectories:
    def test_zero_slope_constant(self):
        traj = simulate_trajectories(SimScenario(p=4, n=20, static=True), np.random.default_rng(0))
        loc = traj.locations()
        np.testing.assert_array_equal(loc, np.broadcast_to(loc[0], loc.shape))

    def test_asymptote(self):
        params = draw_logistic(SimScenario(p=3, n=10), np.random.default_rng(1))
        far = params.evaluate([1e6])[0]
        np.testing.assert_allclose(far, params.offset + params.amplitude, rtol=1e-12)

    def test_formula(self):
        params = LogisticParams(np.array([[2.0]]), np.array([[5.0]]), np.array([[0.5]]), np.array([[-1.0]]))
        assert params.evaluate([5])[0, 0, 0] == pytest.approx(0.0)
        assert params.evaluate([7])[0, 0, 0] == pytest.approx(-1.0 + 2.0 / (1.0 + np.exp(-1.0)))

    def test_parameter_ranges(self):
        sc = SimScenario(p=30, n=50, d=3)
        params = draw_logistic(sc, np.random.default_rng(2))
        assert np.all((np.abs(params.amplitude) >= 0.5) & (np.abs(params.amplitude) <= 2.0))
        assert np.all((params.midpoint >= 10) & (params.midpoint <= 40))
        assert np.all((params.slope >= 0.05) & (params.slope <= 0.3))
        assert np.all((params.offset >= -1) & (params.offset <= 1))
        assert np.any(params.amplitude < 0) and np.any(params.amplitude > 0)

    def test_deterministic(self):
        sc = SimScenario(p=4, n=12, seed=9)
        a = simulate_trajectories(sc)
        b = simulate_trajectories(sc)
        np.testing.assert_array_equal(a.means, b.means)
        assert a.kind == "truth" and a.means.shape == (13, 8)
        np.testing.assert_array_equal(a.covariances, 0.0)


class TestCounts:
    def test_calibrated_mean(self):
        traj = simulate_trajectories(SimScenario(p=6, n=30), np.random.default_rng(3))
        alpha0 = calibrate_intercept(traj, 2.0)
        assert true_rates(traj, alpha0).mean() == pytest.approx(2.0, rel=1e-12)

    def test_zero_rate(self):
        traj = simulate_trajectories(SimScenario(p=4, n=5), np.random.default_rng(0))
        panel = simulate_counts(traj, -np.inf, "poisson", seed=1)
        np.testing.assert_array_equal(panel.counts, 0)

    @pytest.mark.parametrize("family", [Poisson(), NegativeBinomial(1.0)])
    @pytest.mark.parametrize("mu", [0.5, 2.0, 8.0])
    def test_moment_audit(self, family, mu):
        x = family.sample(np.random.default_rng(int(mu * 10)), np.full(10**5, mu)).astype(float)
        assert abs(x.mean() - mu) < 3 * x.std(ddof=1) / np.sqrt(len(x))
        assert abs(x.var(ddof=1) - family.variance(mu)) < 3 * variance_se(x)

    def test_negbin_variance_six(self):
        x = NegativeBinomial(1.0).sample(np.random.default_rng(42), np.full(10**5, 2.0)).astype(float)
        assert abs(x.var(ddof=1) - 6.0) < 3 * variance_se(x)

    def test_exposure_scales_rates(self):
        traj = simulate_trajectories(SimScenario(p=3, n=4), np.random.default_rng(0))
        expo = np.full((4, 3), 2.5)
        np.testing.assert_allclose(true_rates(traj, 0.3, exposure=expo), 2.5 * true_rates(traj, 0.3))

    def test_non_finite_rates(self):
        traj = simulate_trajectories(SimScenario(p=3, n=4), np.random.default_rng(0))
        with pytest.raises(ValueError):
            simulate_counts(traj, np.inf)


class TestScenarioDraw:
    def test_deterministic(self):
        sc = SimScenario(p=5, n=10)
        a = simulate_scenario(sc, seed=4)
        b = simulate_scenario(sc, seed=4)
        assert a.panel == b.panel and a.params.intercept == b.params.intercept

    def test_seeds_differ(self):
        sc = SimScenario(p=5, n=10)
        assert simulate_scenario(sc, seed=1).panel != simulate_scenario(sc, seed=2).panel

    def test_shapes(self):
        sim = simulate_scenario(SimScenario(p=5, n=10, directed=True), seed=0)
        assert sim.panel.counts.shape == (10, 20) and sim.panel.directed
        np.testing.assert_array_equal(sim.params.sigma, 0.0)

    def test_fixed_intercept(self):
        sim = simulate_scenario(SimScenario(p=4, n=6, alpha0=0.7), seed=0)
        assert sim.params.intercept == 0.7

    def test_negbin_dispersion_recorded(self):
        sim = simulate_scenario(SimScenario(p=4, n=6, family={"name": "negbin", "dispersion": 2.0}), seed=0)
        assert sim.params.family_dispersion == 2.0
