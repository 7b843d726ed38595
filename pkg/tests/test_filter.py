import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentrem.errors import SingularMatrixError
from latentrem.filter import (
    FilterState,
    LinearGaussianObservation,
    NetworkObservation,
    ekf_update,
    filter_pass,
    gain_direct,
    gain_woodbury,
    jittered_cholesky,
    predict,
    run_filter,
    ukf_sigma_points,
    ukf_update,
)
from latentrem.model import DyadIndex, ModelConfig, NetworkPanel, Parameters, jacobian, rate

from oracles import BatchGaussian, random_linear_gaussian


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T / n + 0.1 * np.eye(n))


def lg_filter(inst, filt="ekf", gain="woodbury", kappa=None):
    obs = LinearGaussianObservation(inst["ys"], inst["Hs"], inst["Rs"], inst["cs"])
    return run_filter(obs, inst["sigma"], (inst["m0"], inst["V0"]), filter=filt, kappa=kappa, gain=gain)


class TestPredict:
    def test_zero_sigma(self):
        m, V = predict(np.ones(2), np.eye(2), np.zeros((2, 2)))
        np.testing.assert_array_equal(m, np.ones(2))
        np.testing.assert_array_equal(V, np.eye(2))

    def test_additive(self):
        _, V = predict(np.zeros(3), np.eye(3), 0.1 * np.eye(3))
        np.testing.assert_allclose(V, 1.1 * np.eye(3))


class TestEKFUpdate:
    def test_scalar_algebra(self):
        state = ekf_update((np.zeros(1), np.eye(1)), np.array([2.0]), np.zeros(1), np.eye(1), np.ones(1))
        np.testing.assert_allclose(state.mean_filt, [1.0])
        np.testing.assert_allclose(state.cov_filt, [[0.5]])

    def test_zero_innovation(self):
        rng = np.random.default_rng(0)
        V = random_spd(rng, 4)
        mu = rng.uniform(1, 2, size=6)
        state = ekf_update((np.ones(4), V), mu, mu, rng.normal(size=(6, 4)), mu)
        np.testing.assert_array_equal(state.mean_filt, np.ones(4))

    def test_zero_jacobian(self):
        V = np.eye(3)
        state = ekf_update((np.zeros(3), V), np.ones(2), np.zeros(2), np.zeros((2, 3)), np.ones(2))
        np.testing.assert_allclose(state.mean_filt, 0.0)
        np.testing.assert_allclose(state.cov_filt, V)

    def test_non_finite_is_divergence(self):
        state = ekf_update((np.zeros(1), np.eye(1)), np.array([np.nan]), np.zeros(1), np.eye(1), np.ones(1), k=4)
        assert state.diverged and state.reason == "non-finite" and state.k == 4

    @pytest.mark.parametrize("method", ["woodbury", "direct"])
    def test_routes_agree(self, method):
        rng = np.random.default_rng(1)
        V = random_spd(rng, 4)
        H = rng.normal(size=(7, 4))
        R = rng.uniform(0.5, 2, size=7)
        y = rng.normal(size=7)
        a = ekf_update((np.zeros(4), V), y, np.zeros(7), H, R, method=method)
        b = ekf_update((np.zeros(4), V), y, np.zeros(7), H, R, method="direct")
        np.testing.assert_allclose(a.mean_filt, b.mean_filt, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(a.cov_filt, b.cov_filt, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(a.info, (H.T / R) @ H, rtol=1e-12)


class TestGain:
    def test_zero_H(self):
        np.testing.assert_array_equal(gain_woodbury(np.eye(2), np.zeros((3, 2)), np.ones(3)), np.zeros((2, 3)))

    def test_scalar(self):
        one = np.eye(1)
        assert gain_woodbury(one, one, np.ones(1))[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert gain_direct(one, one, np.ones(1))[0, 0] == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_woodbury_matches_direct(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 6))
        d = int(rng.integers(1, 3))
        px, py = p * d, p * (p - 1)
        V = random_spd(rng, px)
        H = rng.normal(size=(py, px))
        R = rng.uniform(0.1, 3.0, size=py)
        Kw = gain_woodbury(V, H, R)
        # explicit p_y x p_y inverse, independent of both package routes
        Kd = V @ H.T @ np.linalg.inv(np.diag(R) + H @ V @ H.T)
        assert np.max(np.abs(Kw - Kd)) / np.max(np.abs(Kd)) <= 1e-8


class TestSigmaPoints:
    def test_paper_weights(self):
        pts, w = ukf_sigma_points(np.zeros(2), np.eye(2), 1.0)
        np.testing.assert_allclose(w, [1 / 3] + [1 / 6] * 4)
        s3 = np.sqrt(3.0)
        expected = np.array([[0, 0], [s3, 0], [0, s3], [-s3, 0], [0, -s3]])
        np.testing.assert_allclose(pts, expected, atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_moment_matching(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 9))
        mean = rng.normal(size=n)
        cov = random_spd(rng, n)
        kappa = 3.0 - n
        pts, w = ukf_sigma_points(mean, cov, kappa)
        assert len(pts) == 2 * n + 1
        np.testing.assert_allclose(w.sum(), 1.0, atol=1e-14)
        np.testing.assert_allclose(w @ pts, mean, atol=1e-12)
        dev = pts - mean
        np.testing.assert_allclose((dev.T * w) @ dev, cov, atol=1e-10)

    def test_default_kappa(self):
        for p, d in [(3, 1), (10, 2), (4, 3)]:
            kappa = ModelConfig(d=d).resolved_kappa(p)
            assert p * d + kappa == 3.0

    def test_invalid_spread(self):
        with pytest.raises(ValueError):
            ukf_sigma_points(np.zeros(3), np.eye(3), -3.0)

    def test_jitter_then_fail(self):
        # rank-deficient PSD matrix factorises after jitter
        L = jittered_cholesky(np.ones((2, 2)))
        np.testing.assert_allclose(L @ L.T, np.ones((2, 2)), atol=1e-8)
        with pytest.raises(SingularMatrixError):
            jittered_cholesky(-np.eye(2))


class TestUKF:
    def _linear(self, seed):
        rng = np.random.default_rng(seed)
        px, py = 3, 5
        V = random_spd(rng, px)
        H = rng.normal(size=(py, px))
        R = rng.uniform(0.5, 2.0, size=py)
        y = rng.normal(size=py)
        m = rng.normal(size=px)
        return m, V, H, R, y

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("method", ["woodbury", "direct"])
    def test_affine_matches_ekf(self, seed, method):
        m, V, H, R, y = self._linear(seed)
        ukf = ukf_update((m, V), y, lambda X: X @ H.T, lambda mu: R, 3.0 - len(m), method=method)
        ekf = ekf_update((m, V), y, H @ m, H, R, method="direct")
        np.testing.assert_allclose(ukf.mean_filt, ekf.mean_filt, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(ukf.cov_filt, ekf.cov_filt, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(ukf.info, ekf.info, rtol=1e-6, atol=1e-8)

    def test_zero_innovation(self):
        m, V, H, R, _ = self._linear(0)
        state = ukf_update((m, V), H @ m, lambda X: X @ H.T, lambda mu: R, 1.0)
        np.testing.assert_allclose(state.mean_filt, m, atol=1e-12)

    def test_contraction_network(self):
        rng = np.random.default_rng(3)
        p, d = 3, 1
        panel = NetworkPanel(rng.poisson(2.0, size=(1, 6)), np.ones((1, 3)), True)
        params = Parameters(intercept=1.0)
        obs = NetworkObservation(panel, params)
        V = 0.3 * np.eye(p * d)
        state = ukf_update((rng.normal(size=3) * 0.3, V), obs.observed(1), lambda X: obs.mean(1, X),
                           lambda mu: mu, 0.0)
        assert not state.diverged
        assert np.linalg.eigvalsh(V - state.cov_filt).min() >= -1e-8


class TestFilterPass:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("filt", ["ekf", "ukf"])
    def test_batch_oracle(self, seed, filt):
        rng = np.random.default_rng(seed)
        inst = random_linear_gaussian(rng, px=3, py=4, n=5)
        states = lg_filter(inst, filt)
        oracle = BatchGaussian(**inst)
        for k in range(1, 6):
            m, V = oracle.filtered(k)
            np.testing.assert_allclose(states[k].mean_filt, m, rtol=1e-8, atol=1e-9)
            np.testing.assert_allclose(states[k].cov_filt, V, rtol=1e-8, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_linear_ekf_equals_ukf(self, seed):
        inst = random_linear_gaussian(np.random.default_rng(seed), px=4, py=6, n=6)
        a, b = lg_filter(inst, "ekf"), lg_filter(inst, "ukf")
        for sa, sb in zip(a, b):
            np.testing.assert_allclose(sa.mean_filt, sb.mean_filt, rtol=1e-7, atol=1e-9)
            np.testing.assert_allclose(sa.cov_filt, sb.cov_filt, rtol=1e-7, atol=1e-9)

    def test_empty_panel_returns_init(self):
        obs = LinearGaussianObservation(np.zeros((0, 2)), np.zeros((2, 1)), np.ones(2))
        obs.n = 0
        states = run_filter(obs, np.eye(1), (np.zeros(1), np.eye(1)))
        assert len(states) == 1 and states[0].k == 0

    def test_matching_counts_keep_means(self):
        p, d, n = 3, 1, 4
        x0 = np.array([0.0, 0.5, -0.4])
        panel0 = NetworkPanel(np.zeros((n, 6), int), np.ones((n, p)), True)
        params = Parameters(intercept=3.0, sigma=np.zeros((3, 3)))
        mu = rate(x0, params, panel0, 1)
        # expected counts are not integers, so feed them through the observation directly
        obs = NetworkObservation(panel0, params)
        obs.observed = lambda k: mu
        states = run_filter(obs, np.zeros((3, 3)), (x0, 0.1 * np.eye(3)))
        for s in states:
            np.testing.assert_allclose(s.mean_filt, x0, atol=1e-12)

    def test_zero_exposure_rows_dropped(self):
        rng = np.random.default_rng(0)
        exposure = np.ones((2, 3))
        exposure[1, 0] = 0.0
        dy = DyadIndex.build(3, True)
        counts = rng.poisson(1.0, size=(2, 6)) * (exposure[:, dy.senders] > 0)
        panel = NetworkPanel(counts, exposure, True)
        obs = NetworkObservation(panel, Parameters(intercept=0.5))
        x = rng.normal(size=3)
        mu, H = obs.linearize(2, x)
        assert len(mu) == 4 and H.shape == (4, 3)
        keep = dy.senders != 0
        np.testing.assert_allclose(H, jacobian(x, Parameters(intercept=0.5), panel, 2)[keep], rtol=1e-14)
        np.testing.assert_allclose(mu, rate(x, Parameters(intercept=0.5), panel, 2)[keep], rtol=1e-14)

    def test_posterior_contraction_every_step(self):
        rng = np.random.default_rng(5)
        panel = NetworkPanel(rng.poisson(3.0, size=(8, 6)), np.ones((8, 3)), True)
        cfg = ModelConfig(d=1)
        params = Parameters(intercept=1.2, sigma=0.05 * np.eye(3))
        for filt in ("ekf", "ukf"):
            states = filter_pass(panel, params, cfg.replace(filter=filt), (rng.normal(size=3) * 0.2, 0.2 * np.eye(3)))
            assert not states[-1].diverged
            for s in states[1:]:
                assert np.linalg.eigvalsh(s.cov_pred - s.cov_filt).min() >= -1e-8

    def test_static_zeroes_sigma(self):
        rng = np.random.default_rng(6)
        panel = NetworkPanel(rng.poisson(3.0, size=(3, 6)), np.ones((3, 3)), True)
        params = Parameters(intercept=1.2, sigma=0.5 * np.eye(3))
        states = filter_pass(panel, params, ModelConfig(d=1, static=True), (np.zeros(3) + [0, 0.3, -0.3], np.eye(3)))
        for prev, cur in zip(states, states[1:]):
            np.testing.assert_array_equal(cur.cov_pred, prev.cov_filt)

    def test_divergence_halts_pass(self):
        inst = random_linear_gaussian(np.random.default_rng(0), px=2, py=3, n=4)
        inst["ys"][2, 0] = np.inf
        states = lg_filter(inst)
        assert len(states) == 4 and states[-1].diverged and states[-1].k == 3

    def test_deterministic(self):
        inst = random_linear_gaussian(np.random.default_rng(9), px=3, py=4, n=5)
        a, b = lg_filter(inst, "ukf"), lg_filter(inst, "ukf")
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.mean_filt, sb.mean_filt)

    @settings(max_examples=25)
    @given(st.integers(0, 2**31 - 1))
    def test_contraction_property(self, seed):
        inst = random_linear_gaussian(np.random.default_rng(seed), px=3, py=2, n=4)
        for s in lg_filter(inst)[1:]:
            assert np.linalg.eigvalsh(s.cov_pred - s.cov_filt).min() >= -1e-8

    def test_iterated_update_relinearises(self):
        rng = np.random.default_rng(2)
        panel = NetworkPanel(rng.poisson(4.0, size=(3, 6)), np.ones((3, 3)), True)
        params = Parameters(intercept=1.5, sigma=0.01 * np.eye(3))
        init = (np.array([0.0, 0.4, -0.4]), 0.05 * np.eye(3))
        one = filter_pass(panel, params, ModelConfig(d=1), init)
        three = filter_pass(panel, params, ModelConfig(d=1, update_steps=3), init)
        assert not three[-1].diverged
        assert not np.allclose(one[-1].mean_filt, three[-1].mean_filt)
        # the innovation is always measured at the predicted mean
        np.testing.assert_allclose(three[1].innovation, panel.counts[0] - rate(init[0], params, panel, 1))
