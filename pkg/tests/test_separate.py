"""Separation pipeline: masks, metrics, mixture fitting, end-to-end runs."""

import numpy as np
import pytest

import synthutil as S
from innmf.factorize import TrainConfig, innmf_fit, nmf_multiplicative
from innmf.separate import (
    SeparationJob,
    bss_metrics,
    fit_mixture_activations,
    make_zero_db_mixture,
    run_separation,
    run_separation_nmf,
    soft_mask_reconstruct,
    soft_masks,
)
from innmf.transforms import AudioBuffer, istft, stft, stft_to_points


def _tone(freq, sr, seconds, amp=0.5, seed=0):
    t = np.arange(int(sr * seconds)) / sr
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sr)


def _harmonic(f0, sr, seconds, harmonics, amp=0.4):
    t = np.arange(int(sr * seconds)) / sr
    x = np.zeros_like(t)
    for h in harmonics:
        x += (amp / h) * np.sin(2 * np.pi * h * f0 * t + 0.7 * h)
    return AudioBuffer(x, sr)


class TestMixing:
    def test_equal_rms(self):
        a = _tone(200.0, 8000, 1.0, amp=0.9)
        b = _tone(900.0, 8000, 1.0, amp=0.05)
        mix, ra, rb = make_zero_db_mixture(a, b)
        rms = lambda x: np.sqrt(np.mean(x.samples ** 2))
        assert abs(rms(ra) - rms(rb)) <= 1e-9 * rms(ra)
        np.testing.assert_allclose(mix.samples, ra.samples + rb.samples, atol=1e-15)

    def test_silent_source_rejected(self):
        a = _tone(200.0, 8000, 0.5)
        b = AudioBuffer(np.zeros(4000), 8000)
        with pytest.raises(ValueError):
            make_zero_db_mixture(a, b)


class TestSoftMasks:
    def test_symmetric_masks_halve_the_mixture(self):
        mix = _tone(500.0, 8000, 0.5)
        grid = stft(mix, 256, 64)
        m = np.ones_like(grid.magnitude)
        out1, out2 = soft_mask_reconstruct(grid, m, m)
        half = istft(grid).samples / 2.0
        np.testing.assert_allclose(out1.samples, half, atol=1e-12)
        np.testing.assert_allclose(out2.samples, half, atol=1e-12)

    def test_degenerate_mask_keeps_mixture(self):
        mix = _tone(500.0, 8000, 0.5)
        grid = stft(mix, 256, 64)
        m1 = grid.magnitude + 1.0
        m2 = np.zeros_like(m1)
        out1, out2 = soft_mask_reconstruct(grid, m1, m2)
        full = istft(grid).samples
        np.testing.assert_allclose(out1.samples, full, atol=1e-9)
        assert np.max(np.abs(out2.samples)) < 1e-9

    def test_partition_of_unity_and_sum(self):
        rng = np.random.default_rng(0)
        mix = AudioBuffer(rng.normal(size=4096), 8000)
        grid = stft(mix, 256, 64)
        m1 = rng.uniform(1e-4, 2.0, grid.frames.shape)
        m2 = rng.uniform(1e-4, 2.0, grid.frames.shape)
        mask1, mask2 = soft_masks(m1, m2)
        assert np.max(np.abs(mask1 + mask2 - 1.0)) < 1e-9
        assert np.all((mask1 >= 0.0) & (mask1 <= 1.0))
        out1, out2 = soft_mask_reconstruct(grid, m1, m2)
        both = out1.samples + out2.samples
        np.testing.assert_allclose(both, istft(grid).samples, atol=1e-9)

    def test_shape_mismatch(self):
        grid = stft(_tone(500.0, 8000, 0.2), 256, 64)
        with pytest.raises(ValueError):
            soft_mask_reconstruct(grid, np.ones((3, 3)), np.ones((3, 3)))


class TestBssMetrics:
    def test_perfect_estimate_caps(self):
        r = _tone(300.0, 8000, 0.5)
        i = _tone(1100.0, 8000, 0.5)
        m = bss_metrics(r, r, i)
        assert m.sdr_db == 100.0 and m.sir_db == 100.0 and m.sar_db == 100.0

    def test_estimate_equals_interference(self):
        r = _tone(300.0, 8000, 0.5)
        i = _tone(1100.0, 8000, 0.5)
        m = bss_metrics(i, r, i)
        assert m.sir_db <= 0.0

    def test_orthogonal_noise_twenty_db(self):
        rng = np.random.default_rng(1)
        r = _tone(300.0, 8000, 0.5).samples
        noise = rng.normal(size=r.size)
        # orthogonalize against the reference, then scale to its norm
        noise -= (noise @ r) / (r @ r) * r
        noise *= np.linalg.norm(r) / np.linalg.norm(noise)
        i = _tone(1100.0, 8000, 0.5).samples
        est = AudioBuffer(r + 0.1 * noise, 8000)
        m = bss_metrics(est, AudioBuffer(r, 8000), AudioBuffer(i, 8000))
        assert abs(m.sdr_db - 20.0) < 0.5

    def test_noise_never_helps(self):
        rng = np.random.default_rng(2)
        r = _tone(300.0, 8000, 0.5)
        i = _tone(1100.0, 8000, 0.5)
        clean = bss_metrics(r, r, i).sdr_db
        noisy_est = AudioBuffer(r.samples + 0.05 * rng.normal(size=len(r)), 8000)
        assert clean >= bss_metrics(noisy_est, r, i).sdr_db

    def test_zero_reference_rejected(self):
        z = AudioBuffer(np.zeros(100), 8000)
        r = AudioBuffer(np.ones(100), 8000)
        with pytest.raises(ValueError):
            bss_metrics(r, z, r)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bss_metrics(AudioBuffer(np.ones(10), 8000), AudioBuffer(np.ones(9), 8000),
                        AudioBuffer(np.ones(10), 8000))


def _train_dictionary(audio, k, seed, window=512, hop=128):
    pts = stft_to_points(stft(audio, window, hop))
    cfg = TrainConfig(learning_rate=1e-2, epochs=800, batch_size=10 ** 9,
                      seed=seed, activation_mode="matrix")
    return innmf_fit(pts, k, cfg, nyquist_hz=audio.nyquist_hz)


@pytest.fixture(scope="module")
def tone_job_parts():
    """Disjoint-band harmonic sources and their trained dictionaries."""
    sr = 8000
    src1 = _harmonic(200.0, sr, 1.5, harmonics=(1, 2, 3))      # 200-600 Hz
    src2 = _harmonic(1050.0, sr, 1.5, harmonics=(1, 2, 3))     # 1050-3150 Hz
    d1 = _train_dictionary(src1, 3, seed=1)
    d2 = _train_dictionary(src2, 3, seed=2)
    return sr, src1, src2, d1, d2


class TestMixtureFit:
    def test_energy_share_when_mixture_is_one_source(self, tone_job_parts):
        sr, src1, src2, d1, d2 = tone_job_parts
        cfg = TrainConfig(learning_rate=3e-2, epochs=600, batch_size=10 ** 9,
                          seed=0, activation_mode="matrix")
        job = SeparationJob(src1, d1.model.spectral, d2.model.spectral,
                            512, 128, cfg, f_scale=sr / 2)
        fit = fit_mixture_activations(job)
        grid = fit.mixture_grid
        m1 = fit.model_source1.predict_grid(grid.frame_times_sec, grid.bin_frequencies_hz)
        m2 = fit.model_source2.predict_grid(grid.frame_times_sec, grid.bin_frequencies_hz)
        share = m1.sum() / (m1.sum() + m2.sum())
        assert share > 0.9

    def test_dictionaries_bitwise_frozen(self, tone_job_parts):
        sr, src1, src2, d1, d2 = tone_job_parts
        before = [[w.copy() for w in f.weights] for f in d1.model.spectral]
        mix, ra, rb = make_zero_db_mixture(src1, src2)
        cfg = TrainConfig(epochs=50, seed=0, activation_mode="matrix")
        job = SeparationJob(mix, d1.model.spectral, d2.model.spectral,
                            512, 128, cfg, f_scale=sr / 2)
        fit_mixture_activations(job)
        for f, saved in zip(d1.model.spectral, before):
            for w, w0 in zip(f.weights, saved):
                np.testing.assert_array_equal(w, w0)

    def test_loss_improves(self, tone_job_parts):
        sr, src1, src2, d1, d2 = tone_job_parts
        mix, *_ = make_zero_db_mixture(src1, src2)
        cfg = TrainConfig(epochs=200, seed=0, activation_mode="matrix")
        job = SeparationJob(mix, d1.model.spectral, d2.model.spectral,
                            512, 128, cfg, f_scale=sr / 2)
        fit = fit_mixture_activations(job)
        assert np.all(np.isfinite(fit.loss_curve))
        assert fit.loss_curve[-1] < fit.loss_curve[0]


class TestRunSeparation:
    @pytest.fixture(scope="class")
    def finished_job(self, tone_job_parts):
        sr, src1, src2, d1, d2 = tone_job_parts
        mix, ra, rb = make_zero_db_mixture(src1, src2)
        cfg = TrainConfig(learning_rate=3e-2, epochs=600, batch_size=10 ** 9,
                          seed=0, activation_mode="matrix")
        job = SeparationJob(mix, d1.model.spectral, d2.model.spectral, 512, 128,
                            cfg, f_scale=sr / 2,
                            reference_source1=ra, reference_source2=rb)
        return job, run_separation(job), (mix, ra, rb)

    def test_sdr_floor(self, finished_job):
        job, result, _ = finished_job
        assert result.metrics[0].sdr_db > 10.0
        assert result.metrics[1].sdr_db > 10.0

    def test_outputs_sum_to_mixture(self, finished_job):
        job, result, (mix, *_ ) = finished_job
        total = result.estimated_sources[0].samples + result.estimated_sources[1].samples
        round_trip = istft(stft(mix, 512, 128)).samples
        np.testing.assert_allclose(total, round_trip, atol=1e-9)

    def test_mask_partition(self, finished_job):
        _, result, _ = finished_job
        mask1, mask2 = result.masks
        assert np.max(np.abs(mask1 + mask2 - 1.0)) < 1e-9

    def test_swapping_dictionaries_swaps_outputs(self, tone_job_parts):
        sr, src1, src2, d1, d2 = tone_job_parts
        mix, ra, rb = make_zero_db_mixture(src1, src2)
        cfg = TrainConfig(epochs=80, seed=3, activation_mode="matrix")
        fwd = run_separation(SeparationJob(mix, d1.model.spectral, d2.model.spectral,
                                           512, 128, cfg, f_scale=sr / 2))
        rev = run_separation(SeparationJob(mix, d2.model.spectral, d1.model.spectral,
                                           512, 128, cfg, f_scale=sr / 2))
        np.testing.assert_array_equal(fwd.estimated_sources[0].samples,
                                      rev.estimated_sources[1].samples)
        np.testing.assert_array_equal(fwd.estimated_sources[1].samples,
                                      rev.estimated_sources[0].samples)

    def test_nmf_baseline_path_parity(self, finished_job, tone_job_parts):
        sr, src1, src2, d1, d2 = tone_job_parts
        job, result, (mix, ra, rb) = finished_job
        w1 = nmf_multiplicative(stft(src1, 512, 128).magnitude, 3, 300, seed=1).model.w
        w2 = nmf_multiplicative(stft(src2, 512, 128).magnitude, 3, 300, seed=2).model.w
        base = run_separation_nmf(mix, w1, w2, 512, 128, iterations=300, seed=0,
                                  reference_source1=ra, reference_source2=rb)
        for s in (0, 1):
            assert abs(base.metrics[s].sdr_db - result.metrics[s].sdr_db) <= 1.0
