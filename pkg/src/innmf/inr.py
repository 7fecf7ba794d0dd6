"""Learnable continuous non-negative scalar functions.

Each function maps a scalar coordinate in [0, 1] through a sinusoidal
positional encoding, a small sine-activated multilayer perceptron, and a
softplus output, so its value is non-negative everywhere and smooth in the
input.  Forward evaluation, exact analytic gradients, initialization, and
parameter (de)serialization all live here; training loops live in the
factorization module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_NUM_FREQUENCIES = 8
DEFAULT_HIDDEN_SIZES = (64, 64)
DEFAULT_OMEGA_FIRST = 1.0
DEFAULT_OMEGA_HIDDEN = 30.0


def softplus(z):
    """log(1 + exp(z)) computed without overflow for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    """Logistic function; the exact derivative of softplus."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal feature map for a scalar input.

    `frequencies` lists the cycles-per-unit-input values; the encoded
    vector interleaves (sin, cos) pairs per frequency, so its dimension is
    twice the frequency count.
    """

    frequencies: np.ndarray

    def __post_init__(self) -> None:
        freqs = np.ascontiguousarray(self.frequencies, dtype=np.float64)
        if freqs.ndim != 1 or freqs.size < 1:
            raise ValueError("need at least one encoding frequency")
        if np.any(freqs <= 0.0) or np.any(np.diff(freqs) <= 0.0):
            raise ValueError("frequencies must be positive and strictly increasing")
        freqs.setflags(write=False)
        object.__setattr__(self, "frequencies", freqs)

    @property
    def output_dim(self) -> int:
        return 2 * self.frequencies.size


def geometric_encoding(num_frequencies: int = DEFAULT_NUM_FREQUENCIES) -> EncodingConfig:
    """Octave ladder 1, 2, 4, ... 2**(n-1) cycles per unit input."""
    if num_frequencies < 1:
        raise ValueError("num_frequencies must be at least 1")
    return EncodingConfig(2.0 ** np.arange(num_frequencies))


def encode_batch(xs: np.ndarray, config: EncodingConfig) -> np.ndarray:
    """Encode a vector of scalars to an (n, J) feature matrix."""
    xs = np.asarray(xs, dtype=np.float64)
    phase = 2.0 * np.pi * xs[:, None] * config.frequencies[None, :]
    out = np.empty((xs.size, config.output_dim))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out


def fourier_encode(x: float, config: EncodingConfig) -> np.ndarray:
    """Encode one scalar: [sin(2*pi*s1*x), cos(2*pi*s1*x), sin(2*pi*s2*x), ...]."""
    if not np.isfinite(x):
        raise ValueError("input must be finite")
    return encode_batch(np.array([x]), config)[0]


class InrFunction:
    """A non-negative function of one scalar, parameterized by an MLP.

    Hidden layers apply sin(omega * (W a + b)); the first hidden layer uses
    `omega_first` (the encoding already injects high frequencies) and
    deeper ones `omega_hidden`.  The output layer applies softplus, which
    pins the codomain to the positive reals.
    """

    def __init__(
        self,
        encoding: EncodingConfig,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        omega_first: float = DEFAULT_OMEGA_FIRST,
        omega_hidden: float = DEFAULT_OMEGA_HIDDEN,
    ) -> None:
        weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        if len(weights) < 2 or len(weights) != len(biases):
            raise ValueError("need at least one hidden layer plus an output layer")
        if weights[0].shape[0] != encoding.output_dim:
            raise ValueError("first layer input dim must equal the encoding dim")
        if weights[-1].shape[1] != 1:
            raise ValueError("output layer must produce one value")
        for w, b in zip(weights, biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.size:
                raise ValueError("mismatched layer shapes")
        for w_in, w_out in zip(weights, weights[1:]):
            if w_in.shape[1] != w_out.shape[0]:
                raise ValueError("mismatched consecutive layer shapes")
        self.encoding = encoding
        self.weights = weights
        self.biases = biases
        self.omega_first = float(omega_first)
        self.omega_hidden = float(omega_hidden)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def _omega(self, layer: int) -> float:
        return self.omega_first if layer == 0 else self.omega_hidden

    def forward_cached(self, xs: np.ndarray):
        """Batched forward pass returning outputs plus backprop workspace."""
        xs = np.asarray(xs, dtype=np.float64)
        return self.forward_from_encoding(encode_batch(xs, self.encoding))

    def forward_from_encoding(self, encoded: np.ndarray):
        """Forward pass from an already-encoded (n, J) feature matrix.

        Training loops evaluate the same coordinate axis every step, so
        they encode once and reuse the features.
        """
        acts = [encoded]
        pre = []
        for layer in range(len(self.weights) - 1):
            z = acts[-1] @ self.weights[layer] + self.biases[layer]
            pre.append(z)
            acts.append(np.sin(self._omega(layer) * z))
        z_out = (acts[-1] @ self.weights[-1] + self.biases[-1])[:, 0]
        return softplus(z_out), (acts, pre, z_out)

    def evaluate_batch(self, xs: np.ndarray) -> np.ndarray:
        ys, _ = self.forward_cached(xs)
        return ys

    def evaluate(self, x: float) -> float:
        if not np.isfinite(x):
            raise ValueError("input must be finite")
        return float(self.evaluate_batch(np.array([x], dtype=np.float64))[0])

    def backward_cached(self, cache, upstream: np.ndarray):
        """Exact parameter gradients for a cached batch.

        `upstream` holds d(loss)/d(output) per sample; the return value is
        (weight_grads, bias_grads) summed over the batch.
        """
        acts, pre, z_out = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        delta = upstream * sigmoid(z_out)
        w_grads[-1] = acts[-1].T @ delta[:, None]
        b_grads[-1] = np.array([delta.sum()])
        d_act = delta[:, None] @ self.weights[-1].T
        for layer in range(len(self.weights) - 2, -1, -1):
            omega = self._omega(layer)
            dz = d_act * (omega * np.cos(omega * pre[layer]))
            w_grads[layer] = acts[layer].T @ dz
            b_grads[layer] = dz.sum(axis=0)
            if layer > 0:
                d_act = dz @ self.weights[layer].T
        return w_grads, b_grads


class GradientBuffer:
    """Accumulates parameter gradients for one InrFunction."""

    def __init__(self, func: InrFunction) -> None:
        self.weights = [np.zeros_like(w) for w in func.weights]
        self.biases = [np.zeros_like(b) for b in func.biases]
        self.count = 0

    def reset(self) -> None:
        for g in self.weights:
            g.fill(0.0)
        for g in self.biases:
            g.fill(0.0)
        self.count = 0

    def accumulate(self, w_grads, b_grads, count: int = 1) -> None:
        for g, d in zip(self.weights, w_grads):
            g += d
        for g, d in zip(self.biases, b_grads):
            g += d
        self.count += count


def inr_evaluate(func: InrFunction, x: float) -> float:
    return func.evaluate(x)


def inr_evaluate_batch(func: InrFunction, xs) -> np.ndarray:
    return func.evaluate_batch(np.asarray(xs, dtype=np.float64))


def inr_backward(func: InrFunction, x: float, upstream_grad: float, out: GradientBuffer) -> None:
    """Accumulate upstream_grad * d(output)/d(theta) at one input into `out`."""
    if upstream_grad == 0.0:
        return
    _, cache = func.forward_cached(np.array([x], dtype=np.float64))
    w_grads, b_grads = func.backward_cached(cache, np.array([upstream_grad]))
    out.accumulate(w_grads, b_grads)


def inr_init(
    seed: int,
    encoding: EncodingConfig,
    hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES,
    omega_first: float = DEFAULT_OMEGA_FIRST,
    omega_hidden: float = DEFAULT_OMEGA_HIDDEN,
) -> InrFunction:
    """Seeded initialization following the sinusoidal-network recipe.

    First-layer weights are uniform in +-1/J (J = encoding dimension);
    every deeper layer, including the output layer, is uniform in
    +-sqrt(6/fan_in)/omega_hidden.  Biases start at zero.
    """
    if not hidden_sizes:
        raise ValueError("hidden_sizes must be nonempty")
    rng = np.random.default_rng(seed)
    dims = [encoding.output_dim, *map(int, hidden_sizes), 1]
    weights, biases = [], []
    for layer in range(len(dims) - 1):
        fan_in, fan_out = dims[layer], dims[layer + 1]
        if layer == 0:
            bound = 1.0 / encoding.output_dim
        else:
            bound = np.sqrt(6.0 / fan_in) / omega_hidden
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return InrFunction(encoding, weights, biases, omega_first, omega_hidden)


def function_to_payload(func: InrFunction) -> dict:
    """JSON-safe description of one function's encoding and parameters."""
    return {
        "encoding": [float(v) for v in func.encoding.frequencies],
        "layers": [
            {
                "rows": int(w.shape[0]),
                "cols": int(w.shape[1]),
                "weights": [float(v) for v in w.reshape(-1)],
                "bias": [float(v) for v in b],
            }
            for w, b in zip(func.weights, func.biases)
        ],
    }


def function_from_payload(payload: dict, omega_first: float, omega_hidden: float) -> InrFunction:
    try:
        encoding = EncodingConfig(np.asarray(payload["encoding"], dtype=np.float64))
        weights, biases = [], []
        for layer in payload["layers"]:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            w = np.asarray(layer["weights"], dtype=np.float64)
            if w.size != rows * cols:
                raise ValueError("layer weight count does not match its shape")
            weights.append(w.reshape(rows, cols))
            biases.append(np.asarray(layer["bias"], dtype=np.float64))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed function payload: {exc}") from None
    return InrFunction(encoding, weights, biases, omega_first, omega_hidden)
