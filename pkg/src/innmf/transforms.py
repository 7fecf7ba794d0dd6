"""Audio transforms that emit time-frequency point sets, plus the STFT inverse.

Conventions shared by every transform here:

* Analysis windows are periodic Hann windows.
* Frames are fully contained in the signal (no zero padding), frame j
  covering samples [j*hop, j*hop + N); its time stamp is the window
  center (j*hop + N/2) / sr.
* Complex coefficients are scaled by 2/sum(window) so that a full-scale
  sinusoid of amplitude A produces a magnitude of about A at its bin,
  independent of window length.  This keeps magnitudes from different
  transforms (and different window sizes) on one common scale, which
  matters when several transforms feed a single factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from .tfpoints import TFPointSet


@dataclass
class AudioBuffer:
    """Mono audio: float64 samples plus a sample rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite sample value")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_sec(self) -> float:
        return self.samples.size / self.sample_rate_hz

    @property
    def nyquist_hz(self) -> float:
        return self.sample_rate_hz / 2.0


def read_wav(path) -> AudioBuffer:
    """Read a PCM16 or float32 WAV; stereo is downmixed by channel mean."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioBuffer(x, sr)


def write_wav(path, audio: AudioBuffer) -> None:
    wavfile.write(path, audio.sample_rate_hz, audio.samples.astype(np.float32))


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass
class StftGrid:
    """Complex STFT frames (num_bins x num_frames) with their geometry."""

    frames: np.ndarray
    window_size: int
    hop: int
    sample_rate_hz: int

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.complex128)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a 2-D array")
        if self.frames.shape[0] != self.window_size // 2 + 1:
            raise ValueError("frames row count must be window_size/2 + 1")

    @property
    def num_bins(self) -> int:
        return self.frames.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def bin_frequencies_hz(self) -> np.ndarray:
        return np.arange(self.num_bins) * (self.sample_rate_hz / self.window_size)

    @property
    def frame_times_sec(self) -> np.ndarray:
        centers = np.arange(self.num_frames) * self.hop + self.window_size / 2.0
        return centers / self.sample_rate_hz

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


def _check_framing(window_size: int, hop: int) -> None:
    if window_size < 16 or window_size % 2 != 0:
        raise ValueError("window_size must be even and at least 16")
    if hop < 1 or window_size % hop != 0:
        raise ValueError("hop must be positive and divide window_size")


def num_frames(num_samples: int, window_size: int, hop: int) -> int:
    """Count of fully contained frames for the shared framing convention."""
    if num_samples < window_size:
        return 0
    return 1 + (num_samples - window_size) // hop


def stft(audio: AudioBuffer, window_size: int, hop: int) -> StftGrid:
    """Short-time Fourier transform on non-overlapping-invariant Hann frames.

    Works for any even window size (the FFT backend is mixed-radix), so
    sizes like 2000 are fine.
    """
    _check_framing(window_size, hop)
    x = audio.samples
    if x.size < window_size:
        raise ValueError("audio shorter than one analysis window")
    frames = sliding_window_view(x, window_size)[::hop]
    win = hann_window(window_size)
    spec = np.fft.rfft(frames * win, axis=1)
    spec *= 2.0 / win.sum()
    return StftGrid(spec.T.copy(), window_size, hop, audio.sample_rate_hz)


def istft(grid: StftGrid) -> AudioBuffer:
    """Weighted overlap-add inverse with per-sample squared-window normalization.

    Interior samples (those covered by the full window overlap) reconstruct
    the input to floating-point accuracy for any hop that divides the
    window size.
    """
    _check_framing(grid.window_size, grid.hop)
    n, hop = grid.window_size, grid.hop
    win = hann_window(n)
    frames = np.fft.irfft(grid.frames.T * (win.sum() / 2.0), n=n, axis=1)
    out_len = (grid.num_frames - 1) * hop + n
    num = np.zeros(out_len)
    den = np.zeros(out_len)
    wsq = win * win
    for j in range(grid.num_frames):
        start = j * hop
        num[start:start + n] += frames[j] * win
        den[start:start + n] += wsq
    good = den > 1e-12
    out = np.zeros(out_len)
    out[good] = num[good] / den[good]
    return AudioBuffer(out, grid.sample_rate_hz)


def stft_to_points(grid: StftGrid) -> TFPointSet:
    """Flatten a grid to points, frame-major then bin-major, m = |coefficient|."""
    times = grid.frame_times_sec
    freqs = grid.bin_frequencies_hz
    t = np.repeat(times, grid.num_bins)
    f = np.tile(freqs, grid.num_frames)
    m = np.abs(grid.frames).T.reshape(-1)
    tag = f"stft:N={grid.window_size},hop={grid.hop},sr={grid.sample_rate_hz}"
    return TFPointSet(t, f, m, source_tag=tag)


@dataclass(frozen=True)
class CqtConfig:
    """Geometrically spaced analysis with per-bin window lengths.

    q_scale sets window length as q_scale * sr / f_k samples; 17 gives
    roughly constant-Q behaviour for 12 bins per octave under a Hann
    window.
    """

    f_min_hz: float
    bins_per_octave: int
    f_max_hz: float
    q_scale: float = 17.0

    def __post_init__(self) -> None:
        if not (self.f_min_hz > 0.0 and self.f_max_hz > self.f_min_hz):
            raise ValueError("need 0 < f_min_hz < f_max_hz")
        if self.bins_per_octave < 1:
            raise ValueError("bins_per_octave must be at least 1")
        if not self.q_scale > 0.0:
            raise ValueError("q_scale must be positive")

    def bin_frequencies_hz(self) -> np.ndarray:
        """Center frequencies f_min * 2**(k/B) up to and including f_max."""
        b = self.bins_per_octave
        count = int(np.floor(b * np.log2(self.f_max_hz / self.f_min_hz) + 1e-9)) + 1
        freqs = self.f_min_hz * 2.0 ** (np.arange(count) / b)
        return freqs[freqs <= self.f_max_hz * (1.0 + 1e-12)]


def cqt_to_points(audio: AudioBuffer, config: CqtConfig) -> TFPointSet:
    """Constant-Q analysis emitting per-bin time grids (irregular overall).

    Each bin k uses a Hann window of length ceil(q_scale*sr/f_k) rounded up
    to even, hopped by half its length, so low bins produce few long frames
    and high bins many short ones.  Points are emitted bin-major (ascending
    frequency), frames in time order within a bin.
    """
    if config.f_max_hz > audio.nyquist_hz * (1.0 + 1e-12):
        raise ValueError("f_max_hz exceeds the Nyquist frequency")
    x = audio.samples
    sr = audio.sample_rate_hz
    parts_t, parts_f, parts_m = [], [], []
    for fk in config.bin_frequencies_hz():
        length = int(np.ceil(config.q_scale * sr / fk))
        if length % 2:
            length += 1
        hop = length // 2
        if x.size < length:
            continue
        win = hann_window(length)
        kernel = win * np.exp(-2j * np.pi * fk * np.arange(length) / sr)
        frames = sliding_window_view(x, length)[::hop]
        coeff = frames @ kernel
        mags = np.abs(coeff) * (2.0 / win.sum())
        starts = np.arange(frames.shape[0]) * hop
        parts_t.append((starts + length / 2.0) / sr)
        parts_f.append(np.full(mags.size, fk))
        parts_m.append(mags)
    tag = (f"cqt:fmin={config.f_min_hz},fmax={config.f_max_hz},"
           f"bpo={config.bins_per_octave},sr={sr}")
    if not parts_t:
        return TFPointSet([], [], [], source_tag=tag)
    return TFPointSet(
        np.concatenate(parts_t), np.concatenate(parts_f), np.concatenate(parts_m),
        source_tag=tag,
    )


def sinusoidal_model_points(
    audio: AudioBuffer,
    window_size: int,
    hop: int,
    peak_threshold_db: float = -60.0,
) -> TFPointSet:
    """Per-frame spectral peaks refined by parabolic interpolation.

    A bin is a peak when it is a strict local maximum of the frame
    magnitude and lies above `peak_threshold_db` relative to the frame
    maximum.  The peak position is refined on the dB magnitude of the
    3-bin neighbourhood, with the offset clamped to +-0.5 bins.  Silent
    frames emit nothing, so the result may be empty.
    """
    grid = stft(audio, window_size, hop)
    mags = grid.magnitude
    times = grid.frame_times_sec
    bin_hz = audio.sample_rate_hz / window_size
    ts, fs, ms = [], [], []
    for j in range(grid.num_frames):
        col = mags[:, j]
        frame_max = col.max()
        if frame_max <= 0.0:
            continue
        floor = frame_max * 1e-12
        threshold = frame_max * 10.0 ** (peak_threshold_db / 20.0)
        inner = col[1:-1]
        is_peak = (inner > col[:-2]) & (inner > col[2:]) & (inner >= threshold)
        for k in np.nonzero(is_peak)[0] + 1:
            a, b, c = (20.0 * np.log10(max(col[k + d], floor)) for d in (-1, 0, 1))
            denom = a - 2.0 * b + c
            p = 0.0 if denom == 0.0 else 0.5 * (a - c) / denom
            p = float(np.clip(p, -0.5, 0.5))
            peak_db = b - 0.25 * (a - c) * p
            ts.append(times[j])
            fs.append((k + p) * bin_hz)
            ms.append(10.0 ** (peak_db / 20.0))
    tag = f"sin:N={window_size},hop={hop},thr={peak_threshold_db},sr={audio.sample_rate_hz}"
    return TFPointSet(ts, fs, ms, source_tag=tag)
