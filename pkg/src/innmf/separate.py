"""Two-source separation with frozen per-source spectral dictionaries.

Both sources' activations are learned jointly on the mixture point set
under an additive prediction, the mixture STFT is split by the resulting
soft masks, and the estimates are scored with projection-based
SDR/SIR/SAR metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factorize
from .factorize import (
    ActivationMatrix,
    InnmfModel,
    TrainConfig,
    kl_pointwise,
    matrix_nmf_refit_h,
)
from .tfpoints import TFPointSet, compute_normalization
from .transforms import AudioBuffer, StftGrid, istft, stft, stft_to_points

MASK_FLOOR = 1e-12
METRIC_CAP_DB = 100.0


def make_zero_db_mixture(a: AudioBuffer, b: AudioBuffer, target_rms: float = 0.1):
    """Scale both sources to a common RMS and sum them.

    Returns (mixture, a_scaled, b_scaled); the scaled sources are the
    references separation quality is judged against.
    """
    if a.sample_rate_hz != b.sample_rate_hz:
        raise ValueError("sources must share a sample rate")
    n = min(len(a), len(b))
    xa, xb = a.samples[:n], b.samples[:n]
    rms_a = np.sqrt(np.mean(xa ** 2))
    rms_b = np.sqrt(np.mean(xb ** 2))
    if rms_a == 0.0 or rms_b == 0.0:
        raise ValueError("cannot mix a silent source")
    xa = xa * (target_rms / rms_a)
    xb = xb * (target_rms / rms_b)
    sr = a.sample_rate_hz
    return AudioBuffer(xa + xb, sr), AudioBuffer(xa, sr), AudioBuffer(xb, sr)


@dataclass
class SeparationJob:
    """Inputs for one separation run.

    The dictionaries are the spectral functions of two pre-trained models;
    `f_scale` is the frequency scale they were trained with.  Reference
    sources are optional and only used for metrics.
    """

    mixture_audio: AudioBuffer
    dict_source1: list
    dict_source2: list
    window_size: int
    hop: int
    config: TrainConfig
    f_scale: float
    reference_source1: AudioBuffer | None = None
    reference_source2: AudioBuffer | None = None

    def __post_init__(self) -> None:
        self.dict_source1 = list(self.dict_source1)
        self.dict_source2 = list(self.dict_source2)
        if len(self.dict_source1) != len(self.dict_source2) or not self.dict_source1:
            raise ValueError("both dictionaries must have the same nonzero rank")
        if len(self.mixture_audio) == 0:
            raise ValueError("empty mixture")


@dataclass
class MixtureFit:
    """Jointly fitted per-source activations for one mixture."""

    activations1: object
    activations2: object
    loss_curve: np.ndarray
    model_source1: InnmfModel
    model_source2: InnmfModel
    mixture_grid: StftGrid


def fit_mixture_activations(job: SeparationJob) -> MixtureFit:
    """Learn both sources' activations on the mixture, dictionaries frozen.

    The two activation sets start from identical parameters, so swapping
    the dictionary order swaps the outputs exactly.
    """
    grid = stft(job.mixture_audio, job.window_size, job.hop)
    points = stft_to_points(grid)
    norm = compute_normalization(points, job.f_scale)
    k = len(job.dict_source1)

    master = np.random.default_rng(job.config.seed)
    act_seeds = [int(master.integers(2 ** 63)) for _ in range(k)]
    matrix_seed = int(master.integers(2 ** 63))
    shuffle_rng = np.random.default_rng(int(master.integers(2 ** 63)))

    ut_phys = np.unique(points.t)
    uf_phys = np.unique(points.f)
    acts = [
        factorize._new_activations(job.config.activation_mode, k, ut_phys, job.config,
                                   np.random.default_rng(matrix_seed), act_seeds)
        for _ in range(2)
    ]
    streams = [
        factorize._Stream(
            factorize._spectral_group(dic, norm, uf_phys, trainable=False),
            factorize._activation_group(act, norm, ut_phys, trainable=True),
        )
        for dic, act in zip((job.dict_source1, job.dict_source2), acts)
    ]
    curve = factorize._train_streams(points, norm, streams, job.config, shuffle_rng)
    return MixtureFit(
        activations1=acts[0],
        activations2=acts[1],
        loss_curve=curve,
        model_source1=InnmfModel(job.dict_source1, acts[0], norm),
        model_source2=InnmfModel(job.dict_source2, acts[1], norm),
        mixture_grid=grid,
    )


def soft_masks(m1: np.ndarray, m2: np.ndarray, floor: float = MASK_FLOOR):
    """Ratio masks m_i / (m1 + m2); bins with a vanishing sum split evenly.

    Wherever the denominator is at least `floor` the two masks sum to one
    exactly (up to rounding), so the masked estimates sum back to the
    mixture.
    """
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.shape != m2.shape:
        raise ValueError("magnitude grids must have the same shape")
    total = m1 + m2
    safe = np.maximum(total, floor)
    mask1 = np.where(total >= floor, m1 / safe, 0.5)
    mask2 = np.where(total >= floor, m2 / safe, 0.5)
    return mask1, mask2


def soft_mask_reconstruct(mixture_grid: StftGrid, m1: np.ndarray, m2: np.ndarray):
    """Apply soft masks to the complex mixture STFT and invert both parts."""
    if m1.shape != mixture_grid.frames.shape or m2.shape != mixture_grid.frames.shape:
        raise ValueError("magnitude grids must match the mixture grid shape")
    mask1, mask2 = soft_masks(m1, m2)
    out1 = istft(StftGrid(mixture_grid.frames * mask1, mixture_grid.window_size,
                          mixture_grid.hop, mixture_grid.sample_rate_hz))
    out2 = istft(StftGrid(mixture_grid.frames * mask2, mixture_grid.window_size,
                          mixture_grid.hop, mixture_grid.sample_rate_hz))
    return out1, out2


@dataclass(frozen=True)
class BssMetrics:
    """Projection-based separation scores in dB, capped at +-100."""

    sdr_db: float
    sir_db: float
    sar_db: float


def _ratio_db(num: float, den: float) -> float:
    if den <= 0.0:
        return METRIC_CAP_DB
    if num <= 0.0:
        return -METRIC_CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -METRIC_CAP_DB, METRIC_CAP_DB))


def bss_metrics(estimate: AudioBuffer, reference: AudioBuffer,
                interference_ref: AudioBuffer) -> BssMetrics:
    """Instantaneous (filter-free) SDR/SIR/SAR decomposition.

    The estimate splits into its projection onto the reference (target),
    the extra component explained by span(reference, interference)
    (interference), and the residual (artifact).
    """
    e = estimate.samples
    r = reference.samples
    i = interference_ref.samples
    if not (e.size == r.size == i.size):
        raise ValueError("estimate and references must have equal lengths")
    r_energy = float(r @ r)
    if r_energy == 0.0 or float(i @ i) == 0.0:
        raise ValueError("references must have nonzero energy")

    u1 = r / np.sqrt(r_energy)
    s_target = (e @ u1) * u1
    i_perp = i - (i @ u1) * u1
    perp_norm = np.sqrt(i_perp @ i_perp)
    if perp_norm > 1e-12 * np.sqrt(i @ i):
        u2 = i_perp / perp_norm
        e_interf = (e @ u2) * u2
    else:
        e_interf = np.zeros_like(e)
    e_artif = e - s_target - e_interf

    p_target = float(s_target @ s_target)
    p_interf = float(e_interf @ e_interf)
    p_artif = float(e_artif @ e_artif)
    return BssMetrics(
        sdr_db=_ratio_db(p_target, p_interf + p_artif),
        sir_db=_ratio_db(p_target, p_interf),
        sar_db=_ratio_db(p_target + p_interf, p_artif),
    )


@dataclass
class SeparationResult:
    """Everything one separation run produces."""

    estimated_sources: tuple
    predicted_magnitudes: tuple
    masks: tuple
    metrics: tuple | None
    method: str
    window_size: int
    loss_curve: np.ndarray | None = None


def _score(est1: AudioBuffer, est2: AudioBuffer, job_ref1, job_ref2):
    if job_ref1 is None or job_ref2 is None:
        return None
    n = len(est1)
    ref1 = AudioBuffer(job_ref1.samples[:n], job_ref1.sample_rate_hz)
    ref2 = AudioBuffer(job_ref2.samples[:n], job_ref2.sample_rate_hz)
    return (bss_metrics(est1, ref1, ref2), bss_metrics(est2, ref2, ref1))


def run_separation(job: SeparationJob) -> SeparationResult:
    """End-to-end continuous-dictionary separation of one mixture."""
    fit = fit_mixture_activations(job)
    grid = fit.mixture_grid
    m1 = fit.model_source1.predict_grid(grid.frame_times_sec, grid.bin_frequencies_hz)
    m2 = fit.model_source2.predict_grid(grid.frame_times_sec, grid.bin_frequencies_hz)
    est1, est2 = soft_mask_reconstruct(grid, m1, m2)
    return SeparationResult(
        estimated_sources=(est1, est2),
        predicted_magnitudes=(m1, m2),
        masks=soft_masks(m1, m2),
        metrics=_score(est1, est2, job.reference_source1, job.reference_source2),
        method="innmf",
        window_size=job.window_size,
        loss_curve=fit.loss_curve,
    )


def run_separation_nmf(
    mixture_audio: AudioBuffer,
    w_source1: np.ndarray,
    w_source2: np.ndarray,
    window_size: int,
    hop: int,
    iterations: int = 200,
    seed: int = 0,
    reference_source1: AudioBuffer | None = None,
    reference_source2: AudioBuffer | None = None,
) -> SeparationResult:
    """Baseline path: H-only multiplicative updates on stacked dictionaries."""
    if w_source1.shape != w_source2.shape:
        raise ValueError("dictionaries must have the same shape")
    grid = stft(mixture_audio, window_size, hop)
    v = grid.magnitude
    if w_source1.shape[0] != v.shape[0]:
        raise ValueError("dictionary bin count must match the analysis window")
    k = w_source1.shape[1]
    w_joint = np.hstack([w_source1, w_source2])
    h, curve = matrix_nmf_refit_h(v, w_joint, iterations, seed=seed)
    m1 = w_source1 @ h[:k]
    m2 = w_source2 @ h[k:]
    est1, est2 = soft_mask_reconstruct(grid, m1, m2)
    return SeparationResult(
        estimated_sources=(est1, est2),
        predicted_magnitudes=(m1, m2),
        masks=soft_masks(m1, m2),
        metrics=_score(est1, est2, reference_source1, reference_source2),
        method="nmf",
        window_size=window_size,
        loss_curve=curve,
    )
