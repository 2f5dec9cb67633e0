"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives needed by small convolutional classifiers and by
gradient attacks are provided. Every differentiable op records itself on the
innermost active :class:`Tape`; ops run outside a tape (or on inputs that do
not require gradients) are plain numpy computations.

Typical use::

    with Tape(seed=0) as tape:
        loss = softmax_cross_entropy(matmul(x, w), y)
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(ValueError):
    """An operation was called outside its preconditions."""


# --------------------------------------------------------------------------
# RNG

def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def make_rng(seed: int, purpose: str = "", index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, purpose, index)``.

    Draws for distinct keys are independent, so sharding work across
    workers does not change what any single key produces.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_code(purpose), int(index)])
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# Tensor and Tape

class Tensor:
    """An n-dimensional array that may carry a gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind in "iub":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive ops for one forward pass.

    ``seed`` keys the dropout masks drawn while the tape is active, so two
    forward passes with equal inputs, parameters and seed agree bitwise.
    """

    seed: int = 0
    nodes: list = field(default_factory=list)
    _draws: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def rng(self, purpose: str) -> np.random.Generator:
        g = make_rng(self.seed, purpose, self._draws)
        self._draws += 1
        return g

    def record(self, out: Tensor, inputs: tuple, backward) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if loss.size != 1:
                raise UsageError("backward() without an explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    tape = current_tape()
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if _needs(a) else None,
                _unbroadcast(g, b.shape) if _needs(b) else None)

    return _finish(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if _needs(a) else None,
                _unbroadcast(-g, b.shape) if _needs(b) else None)

    return _finish(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if _needs(a) else None,
                _unbroadcast(g * a.data, b.shape) if _needs(b) else None)

    return _finish(a.data * b.data, (a, b), backward)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _finish(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _finish(out, (x,), lambda g: (g / (2.0 * out),))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _finish(np.asarray(out), (x,), backward)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _finish(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        tape = current_tape()
        if tape is None:
            raise UsageError("train-mode dropout needs an rng or an active Tape")
        rng = tape.rng("dropout")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _finish(x.data * keep, (x,), lambda g: (g * keep,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")

    def backward(g):
        return (g @ b.data.T if _needs(a) else None,
                a.data.T @ g if _needs(b) else None)

    return _finish(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear of {x.shape} with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def backward(g):
        return (g @ w.data if _needs(x) else None,
                g.T @ x.data if _needs(w) else None,
                g.sum(axis=0) if b is not None and _needs(b) else None)

    return _finish(out, (x, w, b), backward)


# --------------------------------------------------------------------------
# convolution and pooling

def conv_output_extent(size: int, r: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - r
    if r > size + 2 * pad or span % stride:
        raise DimensionError(
            f"kernel {r} with stride {stride}, pad {pad} does not tile extent {size}")
    return span // stride + 1


def conv2d(x, k, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,C,H,W]`` with ``k[F,C,r,r]``."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d of {x.shape} with kernel {k.shape}")
    B, C, H, W = x.shape
    F, _, r, r2 = k.shape
    if r != r2:
        raise DimensionError("only square kernels are supported")
    Ho = conv_output_extent(H, r, stride, pad)
    Wo = conv_output_extent(W, r, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (r, r), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # channel-major columns: (C*r*r, B*Ho*Wo)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * r * r, B * Ho * Wo)
    kmat = k.data.reshape(F, C * r * r)
    out = (kmat @ cols).reshape(F, B, Ho, Wo)
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(F, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(F, B * Ho * Wo)
        dk = (gf @ cols.T).reshape(k.shape) if _needs(k) else None
        db = gf.sum(axis=1) if b is not None and _needs(b) else None
        dx = None
        if _needs(x):
            dcols = (kmat.T @ gf).reshape(C, r, r, B, Ho, Wo)
            dxp = np.zeros((C, B) + xp.shape[2:], dtype=g.dtype)
            for i in range(r):
                for j in range(r):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
            dx = dxp.transpose(1, 0, 2, 3)
            if pad:
                dx = dx[:, :, pad:pad + H, pad:pad + W]
            dx = np.ascontiguousarray(dx)
        return dx, dk, db

    return _finish(out, (x, k, b), backward)


def avgpool(x, size: int) -> Tensor:
    """Non-overlapping ``size``x``size`` average pooling."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"avgpool window {size} does not tile {H}x{W}")
    out = x.data.reshape(B, C, H // size, size, W // size, size).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (g / (size * size),)

    return _finish(out, (x,), backward)


def global_avgpool(x) -> Tensor:
    """Mean over spatial positions: ``[B,C,H,W] -> [B,C]``."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).astype(x.dtype),)

    return _finish(out, (x,), backward)


# --------------------------------------------------------------------------
# batch normalization

def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over all axes except axis 1.

    In training mode batch statistics are used and the running arrays are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        if x.shape[0] < 2:
            raise UsageError("train-mode batchnorm needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    xhat = xhat.astype(x.dtype, copy=False)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.size // x.shape[1]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes) if _needs(gamma) else None
        dbeta = g.sum(axis=axes) if _needs(beta) else None
        dx = None
        if _needs(x):
            gx = g * gamma.data.reshape(bshape)
            if training:
                s1 = gx.sum(axis=axes).reshape(bshape)
                s2 = (gx * xhat).sum(axis=axes).reshape(bshape)
                dx = (inv.reshape(bshape) / m) * (m * gx - s1 - xhat * s2)
            else:
                dx = gx * inv.reshape(bshape)
            dx = dx.astype(x.dtype, copy=False)
        return dx, dgamma, dbeta

    return _finish(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# --------------------------------------------------------------------------
# losses

def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels."""
    logits = as_tensor(logits)
    B, C = logits.shape
    y = _labels(labels, B)
    if y.size and (y.min() < 0 or y.max() >= C):
        raise UsageError(f"labels must lie in [0, {C})")
    lsm = log_softmax(logits.data)
    rows = np.arange(B)
    total = -lsm[rows, y].sum()
    scale = 1.0 / B if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")

    def backward(g):
        d = np.exp(lsm)
        d[rows, y] -= 1.0
        return (d * (g * scale),)

    return _finish(np.asarray(total * scale, dtype=logits.dtype), (logits,), backward)


def _margins(z: np.ndarray, y: np.ndarray):
    rows = np.arange(len(y))
    other = z.copy()
    other[rows, y] = -np.inf
    j = other.argmax(axis=1)
    return z[rows, j] - z[rows, y], rows, j


def cw_margin(logits, labels, kappa: float = 0.0, reduction: str = "mean") -> Tensor:
    """Batch mean of ``max(max_{i != y} Z_i - Z_y, -kappa)``.

    Gradient flows through the best wrong logit and the true logit of each
    row whose margin exceeds ``-kappa``.
    """
    logits = as_tensor(logits)
    B, C = logits.shape
    if C < 2:
        raise UsageError("cw_margin needs at least two classes")
    y = _labels(labels, B)
    m, rows, j = _margins(logits.data, y)
    active = m > -kappa
    vals = np.where(active, m, -kappa)
    scale = 1.0 / B if reduction == "mean" else 1.0

    def backward(g):
        d = np.zeros_like(logits.data)
        w = active * (g * scale)
        d[rows, j] += w
        d[rows, y] -= w
        return (d,)

    return _finish(np.asarray(vals.sum() * scale, dtype=logits.dtype), (logits,), backward)


def cw_objective(logits, labels, kappa: float = 0.0, reduction: str = "mean") -> Tensor:
    """Attacker's Carlini-Wagner objective ``min(max_{i != y} Z_i - Z_y, kappa)``.

    This is the negated CW loss ``max(Z_y - max_{i != y} Z_i, -kappa)``; it
    keeps a gradient while the sample is still correctly classified and goes
    flat once it is misclassified by ``kappa``.
    """
    logits = as_tensor(logits)
    B, C = logits.shape
    if C < 2:
        raise UsageError("cw_objective needs at least two classes")
    y = _labels(labels, B)
    m, rows, j = _margins(logits.data, y)
    active = m < kappa
    vals = np.where(active, m, kappa)
    scale = 1.0 / B if reduction == "mean" else 1.0

    def backward(g):
        d = np.zeros_like(logits.data)
        w = active * (g * scale)
        d[rows, j] += w
        d[rows, y] -= w
        return (d,)

    return _finish(np.asarray(vals.sum() * scale, dtype=logits.dtype), (logits,), backward)


# --------------------------------------------------------------------------
# optimizer

class SGDMomentum:
    """Heavy-ball SGD: ``v <- mu * v + g``; ``p <- p - lr * v``."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self, named_params: Iterable[tuple[str, Tensor]]) -> None:
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.state.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + g
            self.state[name] = v.astype(p.dtype, copy=False)
            p.data = (p.data - self.lr * v).astype(p.dtype, copy=False)


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      state: list, lr: float, mu: float = 0.9) -> list[np.ndarray]:
    """Functional form of one momentum step; ``state`` holds the velocities and is updated."""
    if len(state) < len(params):
        state.extend(np.zeros_like(np.asarray(p, dtype=float)) for p in params[len(state):])
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state[i] = mu * state[i] + np.asarray(g)
        out.append(np.asarray(p) - lr * state[i])
    return out


# --------------------------------------------------------------------------
# finite differences

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                      tol: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1)``.
    """
    x0 = np.array(x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape(seed=seed) as tape:
        out = f(xt)
    if out.size != 1:
        raise UsageError("finite_diff_check needs a scalar-valued function")
    if out.requires_grad:
        tape.backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[i] += h
        with Tape(seed=seed):
            fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        xp[i] -= 2 * h
        with Tape(seed=seed):
            fm = float(f(Tensor(xp.reshape(x0.shape))).data)
        flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return GradCheckReport(err, tol, analytic, numeric)


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"RXF1"


def encode_checkpoint(named: Iterable[tuple[str, np.ndarray]]) -> bytes:
    """Serialize named arrays: name length, UTF-8 name, rank, extents, f32 LE values."""
    parts = [CHECKPOINT_MAGIC]
    for name, arr in named:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an RXF1 checkpoint (bad magic)")
    out: dict[str, np.ndarray] = {}
    pos = 4
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(blob):
                raise ValueError(f"checkpoint truncated inside {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as e:
        raise ValueError("checkpoint truncated") from e
    return out


def save_checkpoint(path, named: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(named))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
