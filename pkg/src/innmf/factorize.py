"""Factorization engines for time-frequency point sets.

Two engines share one prediction rule, `sum_k W_k(f) * H_k(t)`:

* the continuous engine, whose spectral templates W_k (and, when time is
  irregular, activations H_k) are neural functions trained by gradient
  descent on a per-point generalized KL loss, and
* the dense baseline, classic multiplicative-update NMF on a magnitude
  matrix.

Spectral templates can also be plain lookup tables over a regular grid,
in which case the continuous prediction reduces exactly to the matrix
product of the sampled factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .inr import (
    DEFAULT_HIDDEN_SIZES,
    DEFAULT_NUM_FREQUENCIES,
    InrFunction,
    encode_batch,
    function_from_payload,
    function_to_payload,
    geometric_encoding,
    inr_init,
    sigmoid,
    softplus,
)
from .tfpoints import NormalizationInfo, TFPointSet, compute_normalization

MODEL_FORMAT = "innmf-model"
MODEL_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


class ModelFormatError(ValueError):
    """A model file is corrupt, truncated, or of an unknown version."""


def kl_pointwise(m, m_hat):
    """Generalized KL term m*log(m/m_hat) - m + m_hat, with 0*log(0) = 0.

    The caller guarantees m >= 0 and m_hat > 0 (floor it first).  The term
    is non-negative and zero exactly when m == m_hat.
    """
    m = np.asarray(m, dtype=np.float64)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    log_term = np.where(m > 0.0, m * np.log(np.where(m > 0.0, m, 1.0) / m_hat), 0.0)
    out = log_term - m + m_hat
    if out.ndim == 0:
        return float(out)
    return out


def kl_matrix(v: np.ndarray, v_hat: np.ndarray, floor: float = 1e-12) -> float:
    """Total generalized KL divergence between two non-negative matrices."""
    return float(np.sum(kl_pointwise(v, np.maximum(v_hat, floor))))


@dataclass(frozen=True)
class TrainConfig:
    """Gradient-descent settings plus the architecture of fresh functions."""

    learning_rate: float = 1e-4
    epochs: int = 2000
    batch_size: int = 1024
    seed: int = 0
    kl_floor: float = 1e-8
    optimizer: str = "momentum"
    momentum: float = 0.9
    activation_mode: str = "auto"
    num_frequencies: int = DEFAULT_NUM_FREQUENCIES
    hidden_sizes: tuple = DEFAULT_HIDDEN_SIZES

    def __post_init__(self) -> None:
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not self.kl_floor > 0.0:
            raise ValueError("kl_floor must be positive")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError("optimizer must be 'sgd' or 'momentum'")
        if self.activation_mode not in ("auto", "inr", "matrix"):
            raise ValueError("activation_mode must be 'auto', 'inr', or 'matrix'")


class TabulatedFunction:
    """Nearest-sample lookup table over a sorted coordinate axis.

    This is the degenerate 'function' that turns the continuous model into
    plain matrix NMF on a regular grid.
    """

    def __init__(self, coords: np.ndarray, values: np.ndarray) -> None:
        coords = np.ascontiguousarray(coords, dtype=np.float64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if coords.ndim != 1 or coords.shape != values.shape or coords.size == 0:
            raise ValueError("coords and values must be equal-length vectors")
        if np.any(np.diff(coords) <= 0.0):
            raise ValueError("coords must be strictly increasing")
        self.coords = coords
        self.values = values

    def evaluate_batch(self, xs: np.ndarray) -> np.ndarray:
        idx = _nearest_indices(self.coords, np.asarray(xs, dtype=np.float64))
        return self.values[idx]

    def evaluate(self, x: float) -> float:
        return float(self.evaluate_batch(np.array([x]))[0])


def _nearest_indices(grid: np.ndarray, xs: np.ndarray) -> np.ndarray:
    right = np.clip(np.searchsorted(grid, xs), 1, grid.size - 1) if grid.size > 1 else np.zeros(xs.shape, dtype=int)
    if grid.size == 1:
        return right
    left = right - 1
    pick_right = (xs - grid[left]) > (grid[right] - xs)
    return np.where(pick_right, right, left)


class ActivationMatrix:
    """K x M activation matrix over a fixed time raster.

    Entries are softplus of free parameters so that plain gradient descent
    keeps them non-negative.  Times map to columns by nearest raster time.
    """

    def __init__(self, raw: np.ndarray, frame_times_sec: np.ndarray) -> None:
        raw = np.ascontiguousarray(raw, dtype=np.float64)
        frame_times_sec = np.ascontiguousarray(frame_times_sec, dtype=np.float64)
        if raw.ndim != 2 or frame_times_sec.ndim != 1 or raw.shape[1] != frame_times_sec.size:
            raise ValueError("raw must be (K, M) with M matching frame_times_sec")
        if frame_times_sec.size > 1 and np.any(np.diff(frame_times_sec) <= 0.0):
            raise ValueError("frame times must be strictly increasing")
        self.raw = raw
        self.frame_times_sec = frame_times_sec

    @property
    def k(self) -> int:
        return self.raw.shape[0]

    def values(self) -> np.ndarray:
        return softplus(self.raw)

    def values_at_times(self, t_sec: np.ndarray) -> np.ndarray:
        cols = _nearest_indices(self.frame_times_sec, np.asarray(t_sec, dtype=np.float64))
        return softplus(self.raw[:, cols])


class InnmfModel:
    """Rank-K factorization with continuous (or tabulated) factors.

    `spectral` holds K functions of normalized frequency; `activations` is
    either K functions of normalized time or an ActivationMatrix over the
    training time raster.  Predictions are de-normalized by m_scale.
    """

    def __init__(self, spectral, activations, norm: NormalizationInfo) -> None:
        self.spectral = list(spectral)
        self.activations = activations
        self.norm = norm
        if not self.spectral:
            raise ValueError("need at least one spectral function")
        if isinstance(activations, ActivationMatrix):
            if activations.k != self.k:
                raise ValueError("activation matrix rank mismatch")
        elif len(list(activations)) != self.k:
            raise ValueError("need one activation function per spectral function")

    @property
    def k(self) -> int:
        return len(self.spectral)

    @property
    def uses_activation_matrix(self) -> bool:
        return isinstance(self.activations, ActivationMatrix)

    def spectral_values(self, f_hz) -> np.ndarray:
        """Sample all spectral templates at physical frequencies: (K, n)."""
        fn = self.norm.normalize_f(np.atleast_1d(np.asarray(f_hz, dtype=np.float64)))
        return np.stack([w.evaluate_batch(fn) for w in self.spectral])

    def activation_values(self, t_sec) -> np.ndarray:
        """Sample all activations at physical times: (K, n)."""
        t = np.atleast_1d(np.asarray(t_sec, dtype=np.float64))
        if self.uses_activation_matrix:
            return self.activations.values_at_times(t)
        tn = self.norm.normalize_t(t)
        return np.stack([h.evaluate_batch(tn) for h in self.activations])

    def predict_batch(self, t_sec, f_hz) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t_sec, dtype=np.float64))
        f = np.atleast_1d(np.asarray(f_hz, dtype=np.float64))
        if t.shape != f.shape:
            raise ValueError("t and f must have the same shape")
        uf, f_inv = np.unique(f, return_inverse=True)
        ut, t_inv = np.unique(t, return_inverse=True)
        ws = self.spectral_values(uf)
        hs = self.activation_values(ut)
        return np.einsum("ki,ki->i", ws[:, f_inv], hs[:, t_inv]) * self.norm.m_scale

    def predict(self, t: float, f: float) -> float:
        return float(self.predict_batch([t], [f])[0])

    def predict_grid(self, t_sec, f_hz) -> np.ndarray:
        """Dense (n_freqs, n_times) prediction over a coordinate raster."""
        ws = self.spectral_values(f_hz)
        hs = self.activation_values(t_sec)
        return (ws.T @ hs) * self.norm.m_scale


def tabulated_model(w: np.ndarray, h: np.ndarray, bin_freqs_hz, frame_times_sec,
                    f_scale: float, m_scale: float = 1.0) -> InnmfModel:
    """Wrap dense factors W (F x K), H (K x M) as a lookup-table model."""
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    bin_freqs_hz = np.asarray(bin_freqs_hz, dtype=np.float64)
    frame_times_sec = np.asarray(frame_times_sec, dtype=np.float64)
    t0, t1 = float(frame_times_sec.min()), float(frame_times_sec.max())
    if t1 <= t0:
        t1 = t0 + float(np.spacing(max(abs(t0), 1.0)))
    norm = NormalizationInfo(t_min=t0, t_max=t1, f_scale=f_scale, m_scale=m_scale)
    fn = norm.normalize_f(bin_freqs_hz)
    tn = norm.normalize_t(frame_times_sec)
    spectral = [TabulatedFunction(fn, w[:, k]) for k in range(w.shape[1])]
    activations = [TabulatedFunction(tn, h[k, :]) for k in range(h.shape[0])]
    return InnmfModel(spectral, activations, norm)


def mean_kl(model: InnmfModel, points: TFPointSet, kl_floor: float = 1e-8) -> float:
    """Per-point mean generalized KL of a model against a point set (raw units).

    The floor applies in normalized magnitude units, matching training.
    """
    m_scale = model.norm.m_scale
    m_norm = points.m / m_scale
    pred_norm = model.predict_batch(points.t, points.f) / m_scale
    kl = kl_pointwise(m_norm, np.maximum(pred_norm, kl_floor))
    return float(kl.mean() * m_scale)


# ---------------------------------------------------------------------------
# gradient-descent training
# ---------------------------------------------------------------------------


class _InrAxisGroup:
    """K INR functions evaluated on one shared axis of unique coordinates."""

    def __init__(self, funcs, coords_norm: np.ndarray, trainable: bool) -> None:
        self.funcs = list(funcs)
        self.trainable = trainable
        self.coords = np.asarray(coords_norm, dtype=np.float64)
        shared = all(
            np.array_equal(f.encoding.frequencies, self.funcs[0].encoding.frequencies)
            for f in self.funcs
        )
        self._encoded = encode_batch(self.coords, self.funcs[0].encoding) if shared else None
        self._frozen_values = None
        if not trainable:
            self._frozen_values = np.stack([f.evaluate_batch(self.coords) for f in self.funcs])

    @property
    def params(self) -> list[np.ndarray]:
        if not self.trainable:
            return []
        return [arr for f in self.funcs for pair in zip(f.weights, f.biases) for arr in pair]

    def forward(self, u_idx: np.ndarray):
        if self._frozen_values is not None:
            return self._frozen_values[:, u_idx], None
        vals = np.empty((len(self.funcs), u_idx.size))
        caches = []
        for i, f in enumerate(self.funcs):
            if self._encoded is not None:
                y, cache = f.forward_from_encoding(self._encoded[u_idx])
            else:
                y, cache = f.forward_cached(self.coords[u_idx])
            vals[i] = y
            caches.append(cache)
        return vals, caches

    def backward(self, caches, upstream: np.ndarray) -> list[np.ndarray]:
        grads: list[np.ndarray] = []
        for f, cache, up in zip(self.funcs, caches, upstream):
            w_grads, b_grads = f.backward_cached(cache, up)
            for wg, bg in zip(w_grads, b_grads):
                grads.append(wg)
                grads.append(bg)
        return grads


class _TableAxisGroup:
    """Frozen lookup tables on a shared axis (never trainable)."""

    def __init__(self, tables, coords_norm: np.ndarray) -> None:
        self.trainable = False
        self._values = np.stack([t.evaluate_batch(coords_norm) for t in tables])

    @property
    def params(self) -> list[np.ndarray]:
        return []

    def forward(self, u_idx: np.ndarray):
        return self._values[:, u_idx], None

    def backward(self, caches, upstream):  # pragma: no cover - never trainable
        raise RuntimeError("table groups have no parameters")


class _MatrixAxisGroup:
    """Softplus-parameterized activation matrix whose columns are the axis."""

    def __init__(self, mat: ActivationMatrix, trainable: bool) -> None:
        self.mat = mat
        self.trainable = trainable

    @property
    def params(self) -> list[np.ndarray]:
        return [self.mat.raw] if self.trainable else []

    def forward(self, u_idx: np.ndarray):
        sub = self.mat.raw[:, u_idx]
        return softplus(sub), (u_idx, sub)

    def backward(self, cache, upstream: np.ndarray) -> list[np.ndarray]:
        u_idx, sub = cache
        grad = np.zeros_like(self.mat.raw)
        grad[:, u_idx] = upstream * sigmoid(sub)
        return [grad]


@dataclass
class _Stream:
    """One additive term of the prediction: a spectral and an activation group."""

    spectral: object
    activation: object


def _train_streams(points: TFPointSet, norm: NormalizationInfo, streams: list[_Stream],
                   config: TrainConfig, shuffle_rng: np.random.Generator) -> np.ndarray:
    """Mini-batch gradient descent on the summed-stream KL objective.

    Returns the per-epoch mean KL curve in raw magnitude units.  Gradient
    accumulation uses bincount over unique coordinates, which is exact and
    order-deterministic, so identical seeds give bitwise-identical runs.
    """
    total_points = len(points)
    uf_phys, f_inv = np.unique(points.f, return_inverse=True)
    ut_phys, t_inv = np.unique(points.t, return_inverse=True)
    m_norm = points.m / norm.m_scale
    floor = config.kl_floor

    params: list[np.ndarray] = []
    for s in streams:
        params.extend(s.spectral.params)
        params.extend(s.activation.params)
    velocity = [np.zeros_like(p) for p in params]
    use_momentum = config.momentum if config.optimizer == "momentum" else None

    def step(grads):
        if use_momentum is not None:
            for p, v, d in zip(params, velocity, grads):
                v *= use_momentum
                v += d
                p -= config.learning_rate * v
        else:
            for p, d in zip(params, grads):
                p -= config.learning_rate * d

    def check_finite(epoch, mean_epoch):
        if not np.isfinite(mean_epoch):
            raise TrainingDivergedError(
                f"mean KL became non-finite at epoch {epoch}; lower the learning rate")

    batch = min(config.batch_size, total_points)
    full_batch = batch >= total_points

    # full-batch passes over a complete grid reduce to dense matrix algebra,
    # which is much cheaper than per-point gathers
    grid_mode = full_batch and total_points == uf_phys.size * ut_phys.size
    if grid_mode:
        flat = f_inv.astype(np.int64) * ut_phys.size + t_inv
        grid_mode = np.unique(flat).size == total_points
    curve = np.empty(config.epochs)

    if grid_mode:
        v_norm = np.empty((uf_phys.size, ut_phys.size))
        v_norm[f_inv, t_inv] = m_norm
        all_f_idx = np.arange(uf_phys.size)
        all_t_idx = np.arange(ut_phys.size)
        for epoch in range(config.epochs):
            fwd = []
            pred = np.zeros_like(v_norm)
            for s in streams:
                w_vals, w_cache = s.spectral.forward(all_f_idx)
                h_vals, h_cache = s.activation.forward(all_t_idx)
                fwd.append((w_vals, w_cache, h_vals, h_cache))
                pred += w_vals.T @ h_vals
            pred_f = np.maximum(pred, floor)
            kl_total = float(np.sum(kl_pointwise(v_norm, pred_f)))
            g = (1.0 - v_norm / pred_f) / total_points
            grads: list[np.ndarray] = []
            for s, (w_vals, w_cache, h_vals, h_cache) in zip(streams, fwd):
                if s.spectral.trainable:
                    grads.extend(s.spectral.backward(w_cache, h_vals @ g.T))
                if s.activation.trainable:
                    grads.extend(s.activation.backward(h_cache, w_vals @ g))
            step(grads)
            mean_epoch = kl_total / total_points * norm.m_scale
            check_finite(epoch, mean_epoch)
            curve[epoch] = mean_epoch
        return curve

    if full_batch:
        all_f_idx = np.arange(uf_phys.size)
        all_t_idx = np.arange(ut_phys.size)

    for epoch in range(config.epochs):
        order = None if full_batch else shuffle_rng.permutation(total_points)
        epoch_total = 0.0
        for start in range(0, total_points, batch):
            if full_batch:
                bf_u, bf_inv = all_f_idx, f_inv
                bt_u, bt_inv = all_t_idx, t_inv
                bm = m_norm
            else:
                idx = order[start:start + batch]
                bf_u, bf_inv = np.unique(f_inv[idx], return_inverse=True)
                bt_u, bt_inv = np.unique(t_inv[idx], return_inverse=True)
                bm = m_norm[idx]

            fwd = []
            m_hat = np.zeros(bm.size)
            for s in streams:
                w_vals, w_cache = s.spectral.forward(bf_u)
                h_vals, h_cache = s.activation.forward(bt_u)
                fwd.append((w_vals, w_cache, h_vals, h_cache))
                m_hat += np.einsum("ki,ki->i", w_vals[:, bf_inv], h_vals[:, bt_inv])

            m_hat_f = np.maximum(m_hat, floor)
            kl = kl_pointwise(bm, m_hat_f)
            epoch_total += float(kl.sum())
            g = (1.0 - bm / m_hat_f) / bm.size

            grads = []
            for s, (w_vals, w_cache, h_vals, h_cache) in zip(streams, fwd):
                if s.spectral.trainable:
                    up = np.stack([
                        np.bincount(bf_inv, weights=g * h_vals[k, bt_inv], minlength=bf_u.size)
                        for k in range(w_vals.shape[0])
                    ])
                    grads.extend(s.spectral.backward(w_cache, up))
                if s.activation.trainable:
                    up = np.stack([
                        np.bincount(bt_inv, weights=g * w_vals[k, bf_inv], minlength=bt_u.size)
                        for k in range(h_vals.shape[0])
                    ])
                    grads.extend(s.activation.backward(h_cache, up))
            step(grads)

        mean_epoch = epoch_total / total_points * norm.m_scale
        check_finite(epoch, mean_epoch)
        curve[epoch] = mean_epoch
    return curve


def _times_are_regular(times: np.ndarray, rel_tol: float = 1e-9) -> bool:
    if times.size < 3:
        return True
    gaps = np.diff(times)
    return bool(np.all(np.abs(gaps - gaps.mean()) <= rel_tol * max(gaps.mean(), 1e-30)))


def _new_activations(mode: str, k: int, ut_phys: np.ndarray, config: TrainConfig,
                     init_rng: np.random.Generator, act_seeds: list[int]):
    if mode == "auto":
        mode = "matrix" if _times_are_regular(ut_phys) else "inr"
    if mode == "matrix":
        # start low: fits grow entries where the data demands them, while
        # activations of absent components stay near zero
        raw = init_rng.uniform(-3.0, -2.0, size=(k, ut_phys.size))
        return ActivationMatrix(raw, ut_phys)
    encoding = geometric_encoding(config.num_frequencies)
    return [inr_init(act_seeds[i], encoding, config.hidden_sizes) for i in range(k)]


def _activation_group(activations, norm: NormalizationInfo, ut_phys: np.ndarray, trainable: bool):
    if isinstance(activations, ActivationMatrix):
        return _MatrixAxisGroup(activations, trainable)
    return _InrAxisGroup(activations, norm.normalize_t(ut_phys), trainable)


def _spectral_group(spectral, norm: NormalizationInfo, uf_phys: np.ndarray, trainable: bool):
    fn = norm.normalize_f(uf_phys)
    if all(isinstance(w, TabulatedFunction) for w in spectral):
        return _TableAxisGroup(spectral, fn)
    return _InrAxisGroup(spectral, fn, trainable)


@dataclass
class FitResult:
    """A trained model plus its per-epoch mean KL curve (raw units)."""

    model: InnmfModel
    loss_curve: np.ndarray


def innmf_fit(points: TFPointSet, k: int, config: TrainConfig,
              nyquist_hz: float | None = None) -> FitResult:
    """Learn K spectral functions and activations from scratch.

    When `nyquist_hz` is omitted the frequency scale falls back to the
    largest frequency in the point set (exact for full STFT grids).
    """
    if len(points) == 0:
        raise ValueError("empty point set")
    if k < 1:
        raise ValueError("rank must be at least 1")
    f_scale = float(points.f.max()) if nyquist_hz is None else float(nyquist_hz)
    if not f_scale > 0.0:
        raise ValueError("cannot infer a positive frequency scale from the points")
    norm = compute_normalization(points, f_scale)

    master = np.random.default_rng(config.seed)
    spectral_seeds = [int(master.integers(2 ** 63)) for _ in range(k)]
    act_seeds = [int(master.integers(2 ** 63)) for _ in range(k)]
    matrix_seed = int(master.integers(2 ** 63))
    shuffle_rng = np.random.default_rng(int(master.integers(2 ** 63)))

    encoding = geometric_encoding(config.num_frequencies)
    spectral = [inr_init(s, encoding, config.hidden_sizes) for s in spectral_seeds]
    ut_phys = np.unique(points.t)
    uf_phys = np.unique(points.f)
    activations = _new_activations(config.activation_mode, k, ut_phys, config,
                                   np.random.default_rng(matrix_seed), act_seeds)

    stream = _Stream(
        _spectral_group(spectral, norm, uf_phys, trainable=True),
        _activation_group(activations, norm, ut_phys, trainable=True),
    )
    curve = _train_streams(points, norm, [stream], config, shuffle_rng)
    return FitResult(InnmfModel(spectral, activations, norm), curve)


def refit_activations(points: TFPointSet, fixed_spectral, k: int, config: TrainConfig,
                      f_scale: float | None = None) -> FitResult:
    """Re-learn activations for new data while freezing the spectral templates.

    `f_scale` should be the frequency scale the dictionary was trained
    with; it defaults to the largest frequency in the new point set.  The
    spectral functions are shared by reference and never written to.
    """
    fixed_spectral = list(fixed_spectral)
    if len(fixed_spectral) != k:
        raise ValueError("fixed_spectral length must equal the rank")
    if len(points) == 0:
        raise ValueError("empty point set")
    scale = float(points.f.max()) if f_scale is None else float(f_scale)
    norm = compute_normalization(points, scale)

    master = np.random.default_rng(config.seed)
    act_seeds = [int(master.integers(2 ** 63)) for _ in range(k)]
    matrix_seed = int(master.integers(2 ** 63))
    shuffle_rng = np.random.default_rng(int(master.integers(2 ** 63)))

    ut_phys = np.unique(points.t)
    uf_phys = np.unique(points.f)
    activations = _new_activations(config.activation_mode, k, ut_phys, config,
                                   np.random.default_rng(matrix_seed), act_seeds)
    stream = _Stream(
        _spectral_group(fixed_spectral, norm, uf_phys, trainable=False),
        _activation_group(activations, norm, ut_phys, trainable=True),
    )
    curve = _train_streams(points, norm, [stream], config, shuffle_rng)
    return FitResult(InnmfModel(fixed_spectral, activations, norm), curve)


def points_to_matrix(points: TFPointSet):
    """Reassemble grid-shaped points into a dense matrix.

    Requires every (frequency, time) pair of the implied grid to appear
    exactly once.  Returns (V, bin_freqs, frame_times) with V indexed
    (frequency, time).
    """
    uf, f_inv = np.unique(points.f, return_inverse=True)
    ut, t_inv = np.unique(points.t, return_inverse=True)
    if len(points) != uf.size * ut.size:
        raise ValueError("points do not form a complete grid")
    flat = f_inv * ut.size + t_inv
    if np.unique(flat).size != len(points):
        raise ValueError("points do not form a complete grid")
    v = np.empty((uf.size, ut.size))
    v[f_inv, t_inv] = points.m
    return v, uf, ut


def grid_collapse_check(model: InnmfModel, grid) -> np.ndarray:
    """Sample the factors on a regular grid and return the bilinear matrix.

    Equals the matrix product W_sampled @ H_sampled (times m_scale), which
    is also what predict() returns pointwise on those coordinates.
    """
    return model.predict_grid(grid.frame_times_sec, grid.bin_frequencies_hz)


# ---------------------------------------------------------------------------
# multiplicative-update baseline
# ---------------------------------------------------------------------------


@dataclass
class MatrixNmfModel:
    """Dense non-negative factors of a magnitude matrix."""

    w: np.ndarray
    h: np.ndarray

    def reconstruction(self) -> np.ndarray:
        return self.w @ self.h


@dataclass
class NmfFitResult:
    model: MatrixNmfModel
    loss_curve: np.ndarray  # per-entry mean KL, index 0 = before any update


_MU_FLOOR = 1e-12


def nmf_multiplicative(v: np.ndarray, k: int, iterations: int, seed: int) -> NmfFitResult:
    """KL-divergence multiplicative updates from seeded uniform(0.1, 1.1) factors.

    Each iteration updates W then H; the recorded KL curve is monotone
    non-increasing up to floating-point roundoff.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or np.any(v < 0.0) or not np.all(np.isfinite(v)):
        raise ValueError("v must be a finite non-negative matrix")
    if v.sum() == 0.0:
        raise ValueError("v must not be all zero")
    if k < 1 or iterations < 0:
        raise ValueError("k must be >= 1 and iterations >= 0")
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 1.1, size=(v.shape[0], k))
    h = rng.uniform(0.1, 1.1, size=(k, v.shape[1]))

    curve = np.empty(iterations + 1)
    curve[0] = kl_matrix(v, w @ h) / v.size
    for it in range(iterations):
        wh = np.maximum(w @ h, _MU_FLOOR)
        w *= (v / wh) @ h.T / np.maximum(h.sum(axis=1)[None, :], _MU_FLOOR)
        wh = np.maximum(w @ h, _MU_FLOOR)
        h *= w.T @ (v / wh) / np.maximum(w.sum(axis=0)[:, None], _MU_FLOOR)
        curve[it + 1] = kl_matrix(v, w @ h) / v.size
    return NmfFitResult(MatrixNmfModel(w, h), curve)


def matrix_nmf_refit_h(v: np.ndarray, fixed_w: np.ndarray, iterations: int,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """H-only multiplicative updates against a frozen dictionary W.

    Returns (H, per-entry mean KL curve).  W is never written to.
    """
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(fixed_w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != v.shape[0]:
        raise ValueError("fixed_w row count must match v")
    rng = np.random.default_rng(seed)
    h = rng.uniform(0.1, 1.1, size=(w.shape[1], v.shape[1]))
    denom = np.maximum(w.sum(axis=0)[:, None], _MU_FLOOR)
    curve = np.empty(iterations + 1)
    curve[0] = kl_matrix(v, w @ h) / v.size
    for it in range(iterations):
        wh = np.maximum(w @ h, _MU_FLOOR)
        h *= w.T @ (v / wh) / denom
        curve[it + 1] = kl_matrix(v, w @ h) / v.size
    return h, curve


# ---------------------------------------------------------------------------
# model serialization
# ---------------------------------------------------------------------------


def save_model(model: InnmfModel, path) -> None:
    """Write a model as a versioned JSON envelope with full-precision floats."""
    for w in model.spectral:
        if not isinstance(w, InrFunction):
            raise ValueError("only neural-function models can be saved")
    first = model.spectral[0]
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "k": model.k,
        "omega_first": first.omega_first,
        "omega_hidden": first.omega_hidden,
        "normalization": {
            "t_min": model.norm.t_min,
            "t_max": model.norm.t_max,
            "f_scale": model.norm.f_scale,
            "m_scale": model.norm.m_scale,
        },
        "spectral": [function_to_payload(w) for w in model.spectral],
    }
    if model.uses_activation_matrix:
        doc["activations"] = {
            "mode": "matrix",
            "frame_times": [float(t) for t in model.activations.frame_times_sec],
            "raw": [[float(v) for v in row] for row in model.activations.raw],
        }
    else:
        for h in model.activations:
            if not isinstance(h, InrFunction):
                raise ValueError("only neural-function models can be saved")
        doc["activations"] = {
            "mode": "inr",
            "functions": [function_to_payload(h) for h in model.activations],
        }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path) -> InnmfModel:
    """Read a model envelope; raises ModelFormatError on any defect."""
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a valid model file: {exc}") from None
    try:
        if doc["format"] != MODEL_FORMAT:
            raise ModelFormatError(f"{path}: unknown format marker {doc['format']!r}")
        if doc["version"] != MODEL_VERSION:
            raise ModelFormatError(f"{path}: unsupported version {doc['version']!r}")
        omega_first = float(doc["omega_first"])
        omega_hidden = float(doc["omega_hidden"])
        nd = doc["normalization"]
        norm = NormalizationInfo(
            t_min=float(nd["t_min"]), t_max=float(nd["t_max"]),
            f_scale=float(nd["f_scale"]), m_scale=float(nd["m_scale"]),
        )
        spectral = [function_from_payload(p, omega_first, omega_hidden)
                    for p in doc["spectral"]]
        act = doc["activations"]
        if act["mode"] == "matrix":
            activations = ActivationMatrix(
                np.asarray(act["raw"], dtype=np.float64),
                np.asarray(act["frame_times"], dtype=np.float64),
            )
        elif act["mode"] == "inr":
            activations = [function_from_payload(p, omega_first, omega_hidden)
                           for p in act["functions"]]
        else:
            raise ModelFormatError(f"{path}: unknown activation mode {act['mode']!r}")
        if int(doc["k"]) != len(spectral):
            raise ModelFormatError(f"{path}: declared rank does not match content")
        model = InnmfModel(spectral, activations, norm)
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed model file: {exc}") from None
    return model
