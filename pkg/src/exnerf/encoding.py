"""Sinusoidal positional encoding and the coarse-to-fine band schedule.

Layout of an encoded 3-vector with ``m`` bands::

    (x0, x1, x2,
     w0 sin(x0), w0 sin(x1), w0 sin(x2), w0 cos(x0), w0 cos(x1), w0 cos(x2),
     w1 sin(2 x0), ...)

The identity block is never weighted.
"""
import math
from dataclasses import dataclass

import numpy as np

from .diffnet import _accumulate, value_of
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class EncodingSpec:
    bands: int
    include_identity: bool = True
    component_dim: int = 3

    def __post_init__(self):
        if self.bands < 1:
            raise InvalidArgumentError(f"bands must be >= 1, got {self.bands}")
        if not self.include_identity or self.component_dim != 3:
            raise InvalidArgumentError("only identity-prefixed 3-vector encodings are supported")

    @property
    def output_dim(self):
        return 3 + 6 * self.bands


@dataclass(frozen=True)
class CtfSchedule:
    bands: int
    horizon: int

    def alpha(self, iteration):
        return ctf_alpha(iteration, self)

    def weights(self, iteration):
        a = self.alpha(iteration)
        return np.array([ctf_weight(l, a, self.bands) for l in range(self.bands)])


def _check_weights(weights, bands):
    if weights is None:
        return None
    w = np.asarray(weights, dtype=float)
    if w.shape != (bands,):
        raise InvalidArgumentError(f"expected {bands} band weights, got shape {w.shape}")
    if np.any(w < 0) or np.any(w > 1):
        raise InvalidArgumentError("band weights must lie in [0, 1]")
    return w


def _encode(x, bands, weights):
    freqs = 2.0 ** np.arange(bands)
    scaled = x[:, None, :] * freqs.astype(x.dtype)[None, :, None]  # (N, m, 3)
    s, c = np.sin(scaled), np.cos(scaled)
    if weights is not None:
        w = weights.astype(x.dtype)[None, :, None]
        s, c = s * w, c * w
    body = np.concatenate([s, c], axis=2).reshape(x.shape[0], 6 * bands)
    return np.concatenate([x, body], axis=1)


def positional_encode(x, spec, band_weights=None):
    """Encode one 3-vector or an ``(N, 3)`` batch (no gradient tracking)."""
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != 3:
        raise InvalidArgumentError(f"expected 3-vectors, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("positional_encode: non-finite input")
    out = _encode(arr, spec.bands, _check_weights(band_weights, spec.bands))
    return out[0] if single else out


def encode(tape, x, bands, weights=None):
    """Tape-tracked encoding of an ``(N, 3)`` Var (gradient flows to ``x``)."""
    v = value_of(x)
    w = _check_weights(weights, bands)
    out = _encode(v, bands, w)

    def backward(g):
        n = v.shape[0]
        freqs = (2.0 ** np.arange(bands)).astype(v.dtype)[None, :, None]
        gb = g[:, 3:].reshape(n, bands, 2, 3)
        scaled = v[:, None, :] * freqs
        d = gb[:, :, 0, :] * np.cos(scaled) - gb[:, :, 1, :] * np.sin(scaled)
        d = d * freqs
        if w is not None:
            d = d * w.astype(v.dtype)[None, :, None]
        _accumulate(x, g[:, :3] + d.sum(axis=1))
    return tape.record(out, [x], backward)


def ctf_weight(l, alpha, bands=None):
    """Weight of frequency band ``l`` at schedule position ``alpha``."""
    if l < 0 or (bands is not None and l >= bands):
        raise InvalidArgumentError(f"band index {l} out of range")
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be non-negative, got {alpha}")
    x = min(max(alpha - l, 0.0), 1.0)
    return (1.0 - math.cos(math.pi * x)) / 2.0


def ctf_alpha(iteration, schedule):
    if schedule.horizon <= 0:
        raise InvalidArgumentError("coarse-to-fine horizon must be positive")
    if iteration < 0:
        raise InvalidArgumentError("iteration must be non-negative")
    return schedule.bands * iteration / schedule.horizon
