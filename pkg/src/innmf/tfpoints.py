"""Irregular time-frequency point sets and their CSV interchange format.

A point set is the universal exchange object between the transform front
ends and the factorization engines: a flat list of (time, frequency,
magnitude) samples with no grid structure assumed.  Several transforms may
contribute points to the same set, so duplicate (t, f) coordinates are
legal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

CSV_HEADER = "t_sec,f_hz,mag"


class PointsFormatError(ValueError):
    """A points CSV file cannot be parsed or violates the data invariants."""


@dataclass(frozen=True)
class TFPoint:
    """One sample: time in seconds, frequency in Hz, linear magnitude."""

    t: float
    f: float
    m: float


class TFPointSet:
    """Ordered collection of (t, f, m) samples.

    Iteration order is insertion order and is stable.  Coordinates must be
    finite and non-negative.  An empty set can exist in memory (a peak
    picker run on silence produces one) but cannot be written to or read
    from disk.
    """

    def __init__(self, t, f, m, source_tag: str = "") -> None:
        t = np.ascontiguousarray(t, dtype=np.float64)
        f = np.ascontiguousarray(f, dtype=np.float64)
        m = np.ascontiguousarray(m, dtype=np.float64)
        if not (t.ndim == f.ndim == m.ndim == 1):
            raise ValueError("t, f, m must be one-dimensional")
        if not (t.size == f.size == m.size):
            raise ValueError("t, f, m must have equal length")
        for name, arr in (("t", t), ("f", f), ("m", m)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite value in {name}")
            if arr.size and arr.min() < 0.0:
                raise ValueError(f"negative value in {name}")
        for arr in (t, f, m):
            arr.setflags(write=False)
        self._t = t
        self._f = f
        self._m = m
        self.source_tag = str(source_tag)

    @property
    def t(self) -> np.ndarray:
        return self._t

    @property
    def f(self) -> np.ndarray:
        return self._f

    @property
    def m(self) -> np.ndarray:
        return self._m

    def __len__(self) -> int:
        return self._t.size

    def __iter__(self) -> Iterator[TFPoint]:
        for i in range(len(self)):
            yield TFPoint(float(self._t[i]), float(self._f[i]), float(self._m[i]))

    def __repr__(self) -> str:
        return f"TFPointSet(n={len(self)}, source_tag={self.source_tag!r})"

    @classmethod
    def from_points(cls, points: Iterable, source_tag: str = "") -> "TFPointSet":
        """Build a set from an iterable of TFPoint or (t, f, m) triples."""
        rows = [(p.t, p.f, p.m) if isinstance(p, TFPoint) else tuple(p) for p in points]
        if rows:
            t, f, m = (np.asarray(col, dtype=np.float64) for col in zip(*rows))
        else:
            t = f = m = np.empty(0)
        return cls(t, f, m, source_tag=source_tag)

    @classmethod
    def concatenate(cls, sets: Iterable["TFPointSet"], source_tag: str | None = None) -> "TFPointSet":
        """Join several point sets in order, e.g. for hybrid representations."""
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        tag = ";".join(s.source_tag for s in sets) if source_tag is None else source_tag
        return cls(
            np.concatenate([s.t for s in sets]),
            np.concatenate([s.f for s in sets]),
            np.concatenate([s.m for s in sets]),
            source_tag=tag,
        )


@dataclass(frozen=True)
class NormalizationInfo:
    """Maps physical coordinates and magnitudes into the unit training domain.

    t maps affinely from [t_min, t_max] onto [0, 1]; f divides by f_scale
    (the Nyquist of the originating audio); magnitudes divide by m_scale.
    """

    t_min: float
    t_max: float
    f_scale: float
    m_scale: float

    def __post_init__(self) -> None:
        if not (self.t_max > self.t_min):
            raise ValueError("t_max must exceed t_min")
        if not (self.f_scale > 0.0):
            raise ValueError("f_scale must be positive")
        if not (self.m_scale > 0.0):
            raise ValueError("m_scale must be positive")

    def normalize_t(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t_min) / (self.t_max - self.t_min)

    def normalize_f(self, f):
        return np.asarray(f, dtype=np.float64) / self.f_scale

    def normalize_m(self, m):
        return np.asarray(m, dtype=np.float64) / self.m_scale


def compute_normalization(points: TFPointSet, nyquist_hz: float) -> NormalizationInfo:
    """Derive normalization constants from a nonempty point set.

    The time span covers the observed min/max t; a degenerate span (all
    points at one time) is widened by one ULP so the affine map stays
    defined.  m_scale is the mean magnitude, falling back to 1 when the
    mean is zero so that normalization never divides by zero.
    """
    if len(points) == 0:
        raise ValueError("empty point set")
    if not nyquist_hz > 0.0:
        raise ValueError("nyquist_hz must be positive")
    t_min = float(points.t.min())
    t_max = float(points.t.max())
    if t_max <= t_min:
        t_max = t_min + float(np.spacing(max(abs(t_min), 1.0)))
    m_scale = float(points.m.mean())
    if m_scale == 0.0:
        m_scale = 1.0
    return NormalizationInfo(t_min=t_min, t_max=t_max, f_scale=float(nyquist_hz), m_scale=m_scale)


def _format_value(v: float) -> str:
    # repr of a Python float is the shortest digit string that round-trips
    # exactly, which makes save -> load -> save byte-stable.
    return repr(float(v))


def save_points(points: TFPointSet, path) -> None:
    """Write a point set as CSV with header `t_sec,f_hz,mag` and LF endings."""
    if len(points) == 0:
        raise ValueError("refusing to save an empty point set")
    lines = [CSV_HEADER]
    t, f, m = points.t, points.f, points.m
    for i in range(len(points)):
        lines.append(f"{_format_value(t[i])},{_format_value(f[i])},{_format_value(m[i])}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_points(path) -> TFPointSet:
    """Parse a points CSV file; errors carry 1-based physical line numbers."""
    with open(path, "r") as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise PointsFormatError(f"{path}: empty file")
    header = raw[0].strip()
    if header != CSV_HEADER:
        raise PointsFormatError(f"{path}: line 1: expected header {CSV_HEADER!r}, got {header!r}")
    ts, fs, ms = [], [], []
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 3:
            raise PointsFormatError(f"{path}: line {lineno}: expected 3 fields, got {len(fields)}")
        try:
            t, f, m = (float(x) for x in fields)
        except ValueError as exc:
            raise PointsFormatError(f"{path}: line {lineno}: {exc}") from None
        for name, v in (("t_sec", t), ("f_hz", f), ("mag", m)):
            if not np.isfinite(v):
                raise PointsFormatError(f"{path}: line {lineno}: non-finite {name}")
            if v < 0.0:
                raise PointsFormatError(f"{path}: line {lineno}: negative {name}")
        ts.append(t)
        fs.append(f)
        ms.append(m)
    if not ts:
        raise PointsFormatError(f"{path}: empty point set")
    return TFPointSet(ts, fs, ms)
