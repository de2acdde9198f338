"""Seeded randomness and the small statistical primitives everything else uses.

All stochastic code in this package draws from :class:`RngStream`, never from
numpy's global state. Streams are keyed by ``(master_seed, stream_id)`` through
a counter-based generator (Philox keyed via ``SeedSequence``), so any unit of
work can derive its own stream and reproduce bit-exactly regardless of how many
sibling streams exist or in which order they run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ZeroVarianceError(ValueError):
    """A statistic that divides by a variance met a constant input.

    Constant trajectories are a meaningful outcome (fixed points), so this is
    a typed signal for callers to catch, never a silent NaN.
    """


@dataclass
class RngStream:
    """A derived, independently seeded random stream.

    The spawn path is ``(stream_id, *child ids)``; two streams with different
    paths under one master seed share no prefix.
    """

    master_seed: int
    stream_id: int
    _path: tuple[int, ...] = field(default=(), repr=False)
    _gen: np.random.Generator = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self._gen is None:
            seq = np.random.SeedSequence(
                self.master_seed, spawn_key=(self.stream_id, *self._path)
            )
            self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, key: int) -> "RngStream":
        """Derive a sub-stream; deterministic, independent of draw order."""
        return RngStream(self.master_seed, self.stream_id, (*self._path, key))

    def standard_normal(self, *shape: int) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, low: float, high: float, *shape: int) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, *shape: int) -> np.ndarray:
        return self._gen.integers(low, high, shape)


def derive_stream(master_seed: int, stream_id: int) -> RngStream:
    """Derive the stream labeled ``stream_id`` under ``master_seed``."""
    return RngStream(int(master_seed), int(stream_id))


def standard_normal(rng: RngStream, n: int) -> np.ndarray:
    """``n`` i.i.d. N(0,1) draws; advances the stream."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return rng.standard_normal(n)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson product-moment correlation of two equal-length series.

    Raises :class:`ZeroVarianceError` if either input is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise ZeroVarianceError("constant input has no defined correlation")
    r = float(xc @ yc) / np.sqrt(vx * vy)
    return float(np.clip(r, -1.0, 1.0))


def autocorrelation(x: np.ndarray, lag: int) -> float:
    """Normalized autocorrelation of ``x`` at ``lag`` (1.0 at lag 0).

    Mean-centered, normalized by total variance; direct O(n) evaluation.
    Raises :class:`ZeroVarianceError` on constant input.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a vector")
    n = x.size
    if lag == 0:
        if np.all(x == x[0]):
            raise ZeroVarianceError("constant input has no defined autocorrelation")
        return 1.0
    if not 1 <= lag <= n // 2:
        raise ValueError(f"lag must be in [1, {n // 2}], got {lag}")
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom == 0.0:
        raise ZeroVarianceError("constant input has no defined autocorrelation")
    num = float(xc[:-lag] @ xc[lag:])
    return float(np.clip(num / denom, -1.0, 1.0))


def finite_diff_gradient(f, theta: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function of a vector.

    The independent oracle for every analytic gradient in this package; keep
    it dumb on purpose.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (f(up) - f(dn)) / (2.0 * h)
    return grad
