"""Minimal reverse-mode differentiation over batched numpy arrays.

A :class:`Tape` records every operation whose inputs require gradients,
together with a closure that pushes the output gradient back onto those
inputs. :meth:`Tape.backward` replays the closures in reverse order exactly
once. Parameter gradients are accumulated (``+=``), never overwritten, so
several tapes can contribute to one optimizer step.

Everything is row-batched: a "vector" input is an ``(N, dim)`` array and
a single vector is simply ``N == 1``.
"""
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (InvalidArgumentError, StateError, TrainingDivergenceError,
                     UnsupportedFormatError)

CHECKPOINT_MAGIC = b"EXNF0001"


class Var:
    """A value on the tape. ``grad`` is only populated during backward."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Var):
    """Named trainable leaf. Its gradient buffer persists across tapes."""

    __slots__ = ("name",)

    def __init__(self, name, value, requires_grad=True):
        value = np.ascontiguousarray(value)
        super().__init__(value, requires_grad)
        self.name = name
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _tracked(x):
    return isinstance(x, Var) and x.requires_grad


def _accumulate(var, g):
    if not _tracked(var):
        return
    if isinstance(var, Parameter):
        var.grad += g.reshape(var.grad.shape)
    elif var.grad is None:
        var.grad = g
    else:
        var.grad = var.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def scatter_rows(g, idx, n_rows):
    """Sum rows of ``g`` into ``n_rows`` buckets given by ``idx``.

    Sorted indices use a segmented reduction; the result is deterministic in
    both branches because summation order only depends on ``idx``.
    """
    out = np.zeros((n_rows,) + g.shape[1:], dtype=g.dtype)
    if len(idx) == 0:
        return out
    if np.all(idx[1:] >= idx[:-1]):
        starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
        out[idx[starts]] = np.add.reduceat(g, starts, axis=0)
    else:
        np.add.at(out, idx, g)
    return out


class Tape:
    """Records differentiable operations; consumed by a single backward."""

    def __init__(self, grad=True):
        self._records = []
        self.consumed = False
        self.grad = grad

    def record(self, value, inputs, backward):
        """Register a custom op. ``backward(g)`` must accumulate into inputs."""
        if self.consumed:
            raise StateError("tape already consumed")
        out = Var(value, requires_grad=self.grad and any(_tracked(x) for x in inputs))
        if out.requires_grad:
            self._records.append((out, backward))
        return out

    def backward(self, root, grad=None):
        if self.consumed:
            raise StateError("tape already consumed")
        self.consumed = True
        if not _tracked(root):
            self._records.clear()
            return
        seed = (np.ones_like(root.value) if grad is None
                else np.asarray(grad, dtype=root.value.dtype).reshape(root.value.shape))
        if isinstance(root, Parameter):
            root.grad += seed
            return
        root.grad = seed
        for out, fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            out.grad = None
            fn(g)
        self._records.clear()

    # -- elementwise -------------------------------------------------------

    def relu(self, x):
        v = value_of(x)
        mask = v > 0
        return self.record(v * mask, [x], lambda g: _accumulate(x, g * mask))

    def sigmoid(self, x):
        s = sigmoid(value_of(x))
        return self.record(s, [x], lambda g: _accumulate(x, g * s * (1 - s)))

    def softplus(self, x):
        v = value_of(x)
        return self.record(np.logaddexp(0, v), [x],
                           lambda g: _accumulate(x, g * sigmoid(v)))

    def add(self, a, b):
        va, vb = value_of(a), value_of(b)

        def backward(g):
            _accumulate(a, _unbroadcast(g, va.shape))
            _accumulate(b, _unbroadcast(g, vb.shape))
        return self.record(va + vb, [a, b], backward)

    def mul(self, a, c):
        """Multiply by a constant array (broadcastable); ``c`` is not differentiated."""
        c = np.asarray(c)
        va = value_of(a)
        return self.record(va * c, [a],
                           lambda g: _accumulate(a, _unbroadcast(g * c, va.shape)))

    def scale(self, a, s):
        s = float(s)
        return self.record(value_of(a) * s, [a], lambda g: _accumulate(a, g * s))

    def sum(self, x):
        v = value_of(x)
        return self.record(v.sum(), [x],
                           lambda g: _accumulate(x, np.full_like(v, g)))

    # -- structural --------------------------------------------------------

    def concat(self, parts, axis=-1):
        values = [value_of(p) for p in parts]
        sizes = [v.shape[axis] for v in values]
        bounds = np.cumsum([0] + sizes)

        def backward(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if _tracked(p):
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _accumulate(p, np.ascontiguousarray(g[tuple(sl)]))
        return self.record(np.concatenate(values, axis=axis), parts, backward)

    def columns(self, x, start, stop):
        v = value_of(x)

        def backward(g):
            full = np.zeros_like(v)
            full[..., start:stop] = g
            _accumulate(x, full)
        return self.record(np.ascontiguousarray(v[..., start:stop]), [x], backward)

    def reshape(self, x, shape):
        v = value_of(x)
        return self.record(v.reshape(shape), [x],
                           lambda g: _accumulate(x, g.reshape(v.shape)))

    def gather(self, table, idx):
        """Rows ``table[idx]``; gradient is scattered back with a fixed order."""
        idx = np.asarray(idx, dtype=np.int64)
        v = value_of(table)
        return self.record(v[idx], [table],
                           lambda g: _accumulate(table, scatter_rows(g, idx, v.shape[0])))

    # -- dense -------------------------------------------------------------

    def linear(self, x, W, b=None):
        vx, vW = value_of(x), value_of(W)
        out = vx @ vW
        if b is not None:
            out = out + value_of(b)

        def backward(g):
            if _tracked(x):
                _accumulate(x, g @ vW.T)
            if _tracked(W):
                _accumulate(W, vx.T @ g)
            if b is not None and _tracked(b):
                _accumulate(b, g.sum(axis=0))
        inputs = [x, W] if b is None else [x, W, b]
        return self.record(out, inputs, backward)

    def linear_parts(self, parts, W, b=None):
        """Dense layer whose input is a concatenation of row-indexed blocks.

        ``parts`` is a list of ``(x, idx)``. Block ``x`` has shape ``(K, d)``
        and contributes ``(x @ W_block)[idx]`` (``idx=None`` means rows map
        one to one). Projecting before gathering keeps per-frame and per-ray
        inputs from being replicated across every sample point.
        """
        vW = value_of(W)
        dims = [value_of(x).shape[1] for x, _ in parts]
        if sum(dims) != vW.shape[0]:
            raise InvalidArgumentError(
                f"input blocks have total width {sum(dims)}, layer expects {vW.shape[0]}")
        offsets = np.cumsum([0] + dims)
        out = None
        for (x, idx), lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            proj = value_of(x) @ vW[lo:hi]
            if idx is not None:
                proj = proj[idx]
            out = proj if out is None else out + proj
        if b is not None:
            out = out + value_of(b)

        def backward(g):
            gW = np.zeros_like(vW) if _tracked(W) else None
            for (x, idx), lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                vx = value_of(x)
                gk = g if idx is None else scatter_rows(g, idx, vx.shape[0])
                if gW is not None:
                    gW[lo:hi] = vx.T @ gk
                if _tracked(x):
                    _accumulate(x, gk @ vW[lo:hi].T)
            if gW is not None:
                _accumulate(W, gW)
            if b is not None and _tracked(b):
                _accumulate(b, g.sum(axis=0))
        inputs = [x for x, _ in parts] + [W] + ([b] if b is not None else [])
        return self.record(out, inputs, backward)

    # -- losses ------------------------------------------------------------

    def mse(self, pred, target):
        vp = value_of(pred)
        diff = vp - np.asarray(target, dtype=vp.dtype)
        n = diff.size
        return self.record(np.asarray(np.mean(diff * diff)), [pred],
                           lambda g: _accumulate(pred, g * (2.0 / n) * diff))

    def mean_row_norm(self, x, eps=1e-12):
        """Mean Euclidean norm of the rows of ``x``; zero rows get zero subgradient."""
        v = value_of(x)
        norms = np.sqrt(np.sum(v * v, axis=1))
        n = v.shape[0]

        def backward(g):
            safe = np.where(norms > eps, norms, 1.0)
            unit = np.where((norms > eps)[:, None], v / safe[:, None], 0.0)
            _accumulate(x, (g / n) * unit.astype(v.dtype))
        return self.record(np.asarray(norms.mean(), dtype=v.dtype), [x], backward)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


ACTIVATIONS = ("none", "sigmoid", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_width: int
    depth: int
    output_dim: int
    skip_layer: int = None
    final_activation: str = "none"

    def __post_init__(self):
        if min(self.input_dim, self.hidden_width, self.depth, self.output_dim) < 1:
            raise InvalidArgumentError(f"MLP dimensions must be positive: {self}")
        if self.skip_layer is not None and not 0 < self.skip_layer < self.depth:
            raise InvalidArgumentError(
                f"skip_layer {self.skip_layer} must lie strictly inside (0, {self.depth})")
        if self.final_activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.final_activation!r}")


class Mlp:
    """ReLU multilayer perceptron with an optional input skip connection.

    ``depth`` counts hidden layers; an output layer follows them. Weights use
    uniform fan-in scaling (ReLU gain on hidden layers, unit gain on the
    output), biases start at zero.
    """

    def __init__(self, spec, prefix, rng, dtype=np.float32, zero_output=False):
        self.spec = spec
        self.prefix = prefix
        self.layers = []
        fan_in = spec.input_dim
        for i in range(spec.depth):
            if i == spec.skip_layer:
                fan_in = spec.hidden_width + spec.input_dim
            self.layers.append(self._layer(f"{prefix}.l{i}", fan_in, spec.hidden_width,
                                           math.sqrt(6.0 / fan_in), rng, dtype))
            fan_in = spec.hidden_width
        bound = 0.0 if zero_output else math.sqrt(3.0 / fan_in)
        self.layers.append(self._layer(f"{prefix}.out", fan_in, spec.output_dim,
                                       bound, rng, dtype))

    @staticmethod
    def _layer(name, fan_in, fan_out, bound, rng, dtype):
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)) if bound else np.zeros((fan_in, fan_out))
        return (Parameter(f"{name}.weight", w.astype(dtype)),
                Parameter(f"{name}.bias", np.zeros(fan_out, dtype=dtype)))

    @property
    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def forward(self, tape, inputs):
        parts = as_parts(inputs)
        width = sum(value_of(x).shape[1] for x, _ in parts)
        if width != self.spec.input_dim:
            raise InvalidArgumentError(
                f"{self.prefix}: input width {width} != expected {self.spec.input_dim}")
        h = None
        for i, (W, b) in enumerate(self.layers[:-1]):
            if h is None:
                pre = tape.linear_parts(parts, W, b)
            elif i == self.spec.skip_layer:
                pre = tape.linear_parts([(h, None)] + parts, W, b)
            else:
                pre = tape.linear(h, W, b)
            h = tape.relu(pre)
        W, b = self.layers[-1]
        out = tape.linear(h, W, b)
        if self.spec.final_activation == "sigmoid":
            out = tape.sigmoid(out)
        elif self.spec.final_activation == "softplus":
            out = tape.softplus(out)
        return out


def as_parts(inputs):
    if isinstance(inputs, (list, tuple)):
        return [p if isinstance(p, tuple) else (p, None) for p in inputs]
    x = inputs
    if not isinstance(x, Var):
        x = np.atleast_2d(np.asarray(x))
    return [(x, None)]


def mlp_forward(mlp, inputs, tape):
    return mlp.forward(tape, inputs)


class LatentTable:
    """Per-frame deformation (omega) and appearance (phi) codes, zero-initialised."""

    def __init__(self, frames, deformation_dim=128, appearance_dim=8, dtype=np.float32):
        if frames < 1:
            raise InvalidArgumentError("latent table needs at least one frame")
        self.deformation = Parameter("latent.deformation",
                                     np.zeros((frames, deformation_dim), dtype=dtype))
        self.appearance = Parameter("latent.appearance",
                                    np.zeros((frames, appearance_dim), dtype=dtype))

    @property
    def frames(self):
        return self.deformation.value.shape[0]

    @property
    def parameters(self):
        return [self.deformation, self.appearance]

    def lookup(self, tape, frames):
        """Tape-tracked code rows for ``frames`` (an int or an index array)."""
        idx = np.atleast_1d(np.asarray(frames, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= self.frames):
            raise InvalidArgumentError(
                f"frame index out of range [0, {self.frames}): {idx.tolist()}")
        return tape.gather(self.deformation, idx), tape.gather(self.appearance, idx)


def latent_lookup(table, frame, tape):
    return table.lookup(tape, frame)


def exponential_lr(iteration, total, start=1e-3, end=5e-4):
    """Learning rate decayed geometrically so the last iteration uses ``end``."""
    frac = min(max(iteration / max(total - 1, 1), 0.0), 1.0)
    return start * (end / start) ** frac


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise InvalidArgumentError("parameter names must be unique")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}
        self.step_count = 0

    def step(self, lr=None):
        for p in self.params:
            if p.requires_grad and not np.all(np.isfinite(p.grad)):
                raise TrainingDivergenceError(
                    f"non-finite gradient in parameter {p.name!r}",
                    {"parameter": p.name, "step": self.step_count})
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            if p.requires_grad:
                g = p.grad
                m, v = self.m[p.name], self.v[p.name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)
            p.zero_grad()

    def state_tensors(self):
        out = {}
        for p in self.params:
            out[f"adam.m/{p.name}"] = self.m[p.name]
            out[f"adam.v/{p.name}"] = self.v[p.name]
        return out

    def load_state_tensors(self, tensors, step_count):
        for p in self.params:
            self.m[p.name][...] = tensors[f"adam.m/{p.name}"]
            self.v[p.name][...] = tensors[f"adam.v/{p.name}"]
        self.step_count = int(step_count)


def adam_step(state, lr=None):
    state.step(lr)


# -- checkpoint format ------------------------------------------------------
#
# magic "EXNF0001" | uint32 LE header length | JSON header | float32 LE payloads
# The header lists tensors (name, shape) in payload order.


def save_checkpoint(path, tensors, header):
    names = list(tensors)
    meta = dict(header)
    meta["tensors"] = [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise UnsupportedFormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise UnsupportedFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise UnsupportedFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise UnsupportedFormatError(f"{path}: corrupt header") from exc
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise UnsupportedFormatError(f"{path}: truncated payload at {entry['name']!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise UnsupportedFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return header, tensors
