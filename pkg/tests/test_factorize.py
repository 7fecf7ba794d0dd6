"""Factorization engines: continuous fits, baseline updates, collapse identity."""

import math

import numpy as np
import pytest

from innmf.factorize import (
    ActivationMatrix,
    InnmfModel,
    TabulatedFunction,
    TrainConfig,
    grid_collapse_check,
    innmf_fit,
    kl_matrix,
    kl_pointwise,
    matrix_nmf_refit_h,
    mean_kl,
    nmf_multiplicative,
    points_to_matrix,
    refit_activations,
    tabulated_model,
)
from innmf.inr import InrFunction, geometric_encoding, inr_init
from innmf.tfpoints import NormalizationInfo, TFPointSet
from innmf.transforms import AudioBuffer, stft


def _rank_k_points(k, n_f=60, n_t=50, seed=0):
    """Grid points from a sum of K smooth separable non-negative factors."""
    rng = np.random.default_rng(seed)
    fs = np.linspace(0.0, 4000.0, n_f)
    ts = np.linspace(0.0, 2.0, n_t)
    m = np.zeros((n_f, n_t))
    for i in range(k):
        cf = rng.uniform(500, 3500)
        wf = rng.uniform(300, 800)
        ct = rng.uniform(0.3, 1.7)
        wt = rng.uniform(0.2, 0.6)
        a = 0.05 + np.exp(-(((fs - cf) / wf) ** 2))
        b = 0.05 + np.exp(-(((ts - ct) / wt) ** 2))
        m += np.outer(a, b)
    tt, ff = np.meshgrid(ts, fs)
    return TFPointSet(tt.ravel(), ff.ravel(), m.ravel()), fs, ts, m


def _constant_function(value_z=0.0, num_frequencies=4):
    """Zero-parameter net: evaluates to softplus(0) = ln 2 everywhere."""
    enc = geometric_encoding(num_frequencies)
    j = enc.output_dim
    return InrFunction(enc, [np.zeros((j, 4)), np.zeros((4, 1))], [np.zeros(4), np.zeros(1)])


class TestKlPointwise:
    def test_identity_zero(self):
        assert kl_pointwise(3.0, 3.0) == 0.0

    def test_zero_magnitude_limit(self):
        assert kl_pointwise(0.0, 1.0) == 1.0

    def test_direct_formula(self):
        assert abs(kl_pointwise(2.0, 1.0) - (2.0 * math.log(2.0) - 1.0)) < 1e-15

    def test_non_negative_property(self):
        rng = np.random.default_rng(0)
        m = rng.uniform(0.0, 5.0, 1000)
        mh = rng.uniform(1e-6, 5.0, 1000)
        assert np.all(kl_pointwise(m, mh) >= 0.0)


class TestPredict:
    def test_constant_functions_give_log_two_squared(self):
        norm = NormalizationInfo(0.0, 1.0, 4000.0, 2.5)
        model = InnmfModel([_constant_function()], [_constant_function()], norm)
        expected = math.log(2.0) ** 2 * 2.5
        assert abs(model.predict(0.4, 1000.0) - expected) < 1e-12

    def test_non_negative(self):
        norm = NormalizationInfo(0.0, 1.0, 4000.0, 1.0)
        model = InnmfModel(
            [inr_init(i, geometric_encoding(6), [16, 16]) for i in range(2)],
            [inr_init(9 + i, geometric_encoding(6), [16, 16]) for i in range(2)],
            norm,
        )
        rng = np.random.default_rng(1)
        pred = model.predict_batch(rng.uniform(0, 1, 10_000), rng.uniform(0, 4000, 10_000))
        assert np.all(pred >= 0.0)

    def test_lookup_mode_reproduces_matrix_product(self):
        rng = np.random.default_rng(5)
        w = rng.uniform(0.0, 2.0, (32, 5))
        h = rng.uniform(0.0, 2.0, (5, 40))
        freqs = np.linspace(0.0, 4000.0, 32)
        times = np.linspace(0.0, 1.0, 40)
        model = tabulated_model(w, h, freqs, times, f_scale=4000.0)
        product = w @ h
        pred = model.predict_grid(times, freqs)
        assert np.max(np.abs(pred - product)) <= 1e-12 * max(1.0, np.abs(product).max())
        # pointwise agreement too
        for i in (0, 7, 31):
            for j in (0, 11, 39):
                assert abs(model.predict(times[j], freqs[i]) - product[i, j]) <= 1e-12


class TestGridCollapse:
    def test_matches_explicit_double_sum(self):
        grid = stft(AudioBuffer(np.random.default_rng(0).normal(size=400), 8000), 16, 8)
        norm = NormalizationInfo(0.0, 1.0, 4000.0, 1.0)
        spectral = [inr_init(i, geometric_encoding(4), [8]) for i in range(2)]
        acts = [inr_init(10 + i, geometric_encoding(4), [8]) for i in range(2)]
        model = InnmfModel(spectral, acts, norm)
        mat = grid_collapse_check(model, grid)
        assert mat.shape == (grid.num_bins, grid.num_frames)
        ws = model.spectral_values(grid.bin_frequencies_hz)
        hs = model.activation_values(grid.frame_times_sec)
        explicit = np.zeros_like(mat)
        for k in range(2):
            explicit += np.outer(ws[k], hs[k])
        np.testing.assert_allclose(mat, explicit, rtol=0, atol=1e-12)

    def test_matches_predict_pointwise(self):
        grid = stft(AudioBuffer(np.random.default_rng(1).normal(size=300), 8000), 16, 8)
        norm = NormalizationInfo(0.0, 1.0, 4000.0, 3.0)
        model = InnmfModel(
            [inr_init(0, geometric_encoding(4), [8])],
            [inr_init(1, geometric_encoding(4), [8])],
            norm,
        )
        mat = grid_collapse_check(model, grid)
        for i in (0, 3, 8):
            for j in (0, mat.shape[1] - 1):
                p = model.predict(grid.frame_times_sec[j], grid.bin_frequencies_hz[i])
                assert abs(mat[i, j] - p) < 1e-12

    def test_bilinearity_under_scaling(self):
        freqs = np.linspace(0, 4000, 12)
        times = np.linspace(0, 1, 9)
        rng = np.random.default_rng(2)
        w = rng.uniform(0.1, 1.0, (12, 2))
        h = rng.uniform(0.1, 1.0, (2, 9))
        base = tabulated_model(w, h, freqs, times, 4000.0)
        doubled = tabulated_model(w * [2.0, 1.0], h, freqs, times, 4000.0)
        grid = stft(AudioBuffer(np.zeros(8000), 8000), 16, 8)
        delta = doubled.predict_grid(times, freqs) - base.predict_grid(times, freqs)
        np.testing.assert_allclose(delta, np.outer(w[:, 0], h[0]), rtol=1e-12)


class TestMultiplicativeBaseline:
    def test_rank_one_exact(self):
        rng = np.random.default_rng(3)
        w = rng.uniform(0.2, 2.0, 30)
        h = rng.uniform(0.2, 2.0, 25)
        v = np.outer(w, h)
        res = nmf_multiplicative(v, 1, 500, seed=0)
        assert res.loss_curve[-1] * v.size < 1e-8 * v.sum()

    def test_monotone_on_random_matrix(self):
        v = np.random.default_rng(4).uniform(0.0, 1.0, (64, 100))
        res = nmf_multiplicative(v, 8, 500, seed=1)
        diffs = np.diff(res.loss_curve * v.size)
        assert np.all(diffs <= 1e-12)

    def test_full_rank_small(self):
        v = np.random.default_rng(5).uniform(0.1, 1.0, (8, 8))
        res = nmf_multiplicative(v, 8, 4000, seed=2)
        assert res.loss_curve[-1] * v.size < 1e-6 * v.sum()

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            nmf_multiplicative(np.zeros((4, 4)), 2, 10, seed=0)
        with pytest.raises(ValueError):
            nmf_multiplicative(-np.ones((4, 4)), 2, 10, seed=0)

    def test_factors_non_negative(self):
        v = np.random.default_rng(6).uniform(0.0, 1.0, (20, 30))
        res = nmf_multiplicative(v, 4, 100, seed=3)
        assert np.all(res.model.w >= 0.0) and np.all(res.model.h >= 0.0)


class TestRefitH:
    def test_recovers_given_true_dictionary(self):
        rng = np.random.default_rng(7)
        w = rng.uniform(0.1, 1.0, (40, 3))
        h_true = rng.uniform(0.1, 1.0, (3, 50))
        v = w @ h_true
        h, curve = matrix_nmf_refit_h(v, w, 800, seed=0)
        assert curve[-1] * v.size < 1e-8 * v.sum()

    def test_w_unchanged(self):
        rng = np.random.default_rng(8)
        w = rng.uniform(0.1, 1.0, (20, 2))
        w_copy = w.copy()
        v = rng.uniform(0.1, 1.0, (20, 15))
        matrix_nmf_refit_h(v, w, 50, seed=0)
        np.testing.assert_array_equal(w, w_copy)

    def test_monotone(self):
        rng = np.random.default_rng(9)
        v = rng.uniform(0.0, 1.0, (30, 40))
        w = rng.uniform(0.1, 1.0, (30, 5))
        _, curve = matrix_nmf_refit_h(v, w, 300, seed=1)
        assert np.all(np.diff(curve * v.size) <= 1e-12)


class TestInnmfFit:
    def test_rank_one_reduction(self):
        fs = np.linspace(0, 4000, 40)
        ts = np.linspace(0, 2.0, 30)
        a = 0.2 + np.exp(-(((fs - 1500) / 700.0) ** 2))
        b = 0.3 + 0.8 * np.sin(np.pi * ts / 2.0) ** 2
        tt, ff = np.meshgrid(ts, fs)
        points = TFPointSet(tt.ravel(), ff.ravel(), np.outer(a, b).ravel())
        cfg = TrainConfig(epochs=2000, seed=0, activation_mode="inr")
        res = innmf_fit(points, 1, cfg, nyquist_hz=4000.0)
        assert res.loss_curve[-1] < 0.01 * res.loss_curve[0]

    def test_rank_k_reduction_default_budget(self):
        points, *_ = _rank_k_points(3, seed=10)
        cfg = TrainConfig(learning_rate=1e-2, epochs=2000, batch_size=10 ** 9,
                          seed=0, activation_mode="inr")
        res = innmf_fit(points, 3, cfg, nyquist_hz=4000.0)
        assert res.loss_curve[-1] < 0.01 * res.loss_curve[0]

    def test_loss_curve_finite_on_random_data(self):
        rng = np.random.default_rng(11)
        points = TFPointSet(rng.uniform(0, 1, 400), rng.uniform(0, 4000, 400),
                            rng.uniform(0, 2, 400))
        cfg = TrainConfig(epochs=40, seed=0)
        res = innmf_fit(points, 2, cfg, nyquist_hz=4000.0)
        assert np.all(np.isfinite(res.loss_curve))

    def test_seed_determinism(self):
        points, *_ = _rank_k_points(2, n_f=25, n_t=20, seed=12)
        cfg = TrainConfig(epochs=60, batch_size=128, seed=9)
        c1 = innmf_fit(points, 2, cfg, nyquist_hz=4000.0).loss_curve
        c2 = innmf_fit(points, 2, cfg, nyquist_hz=4000.0).loss_curve
        np.testing.assert_array_equal(c1, c2)

    def test_rejects_empty_or_bad_rank(self):
        points, *_ = _rank_k_points(1, n_f=5, n_t=5)
        with pytest.raises(ValueError):
            innmf_fit(points, 0, TrainConfig(epochs=1))
        with pytest.raises(ValueError):
            innmf_fit(TFPointSet([], [], []), 1, TrainConfig(epochs=1))


class TestRefitActivations:
    @pytest.fixture(scope="class")
    def joint(self):
        points, *_ = _rank_k_points(2, seed=13)
        cfg = TrainConfig(learning_rate=1e-2, epochs=1200, batch_size=10 ** 9,
                          seed=0, activation_mode="inr")
        return points, innmf_fit(points, 2, cfg, nyquist_hz=4000.0)

    def test_spectral_bitwise_frozen(self, joint):
        points, fit = joint
        before = [[w.copy() for w in f.weights] for f in fit.model.spectral]
        cfg = TrainConfig(learning_rate=1e-2, epochs=300, batch_size=10 ** 9, seed=5)
        refit_activations(points, fit.model.spectral, 2, cfg, f_scale=4000.0)
        for f, saved in zip(fit.model.spectral, before):
            for w, w0 in zip(f.weights, saved):
                np.testing.assert_array_equal(w, w0)

    def test_same_data_refit_close_to_joint(self, joint):
        points, fit = joint
        joint_kl = mean_kl(fit.model, points)
        cfg = TrainConfig(learning_rate=2e-2, epochs=2000, batch_size=10 ** 9,
                          seed=5, activation_mode="inr")
        re = refit_activations(points, fit.model.spectral, 2, cfg, f_scale=4000.0)
        assert mean_kl(re.model, points) <= 1.05 * joint_kl

    def test_rank_mismatch_rejected(self, joint):
        points, fit = joint
        with pytest.raises(ValueError):
            refit_activations(points, fit.model.spectral, 3, TrainConfig(epochs=1))


class TestPointsToMatrix:
    def test_round_trip(self):
        points, fs, ts, m = _rank_k_points(2, n_f=10, n_t=8, seed=14)
        v, uf, ut = points_to_matrix(points)
        np.testing.assert_array_equal(v, m)
        np.testing.assert_array_equal(uf, fs)
        np.testing.assert_array_equal(ut, ts)

    def test_incomplete_grid_rejected(self):
        points = TFPointSet([0.0, 0.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 1.0])
        with pytest.raises(ValueError, match="grid"):
            points_to_matrix(points)


class TestActivationMatrixMode:
    def test_fit_on_regular_grid_uses_matrix(self):
        points, *_ = _rank_k_points(1, n_f=12, n_t=10, seed=15)
        cfg = TrainConfig(epochs=5, seed=0, activation_mode="auto")
        res = innmf_fit(points, 1, cfg, nyquist_hz=4000.0)
        assert res.model.uses_activation_matrix

    def test_irregular_times_use_functions(self):
        rng = np.random.default_rng(16)
        points = TFPointSet(np.sort(rng.uniform(0, 1, 50)), rng.uniform(0, 100, 50),
                            rng.uniform(0.1, 1, 50))
        cfg = TrainConfig(epochs=5, seed=0, activation_mode="auto")
        res = innmf_fit(points, 1, cfg, nyquist_hz=100.0)
        assert not res.model.uses_activation_matrix

    def test_matrix_lookup_nearest(self):
        raw = np.log(np.expm1(np.array([[1.0, 2.0, 3.0]])))  # softplus inverse
        mat = ActivationMatrix(raw, np.array([0.0, 1.0, 2.0]))
        vals = mat.values_at_times(np.array([0.1, 0.9, 1.6, 5.0]))
        np.testing.assert_allclose(vals[0], [1.0, 2.0, 3.0, 3.0], rtol=1e-12)
