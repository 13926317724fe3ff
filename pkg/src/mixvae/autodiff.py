"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine records every differentiable operation on an implicit tape
(each produced tensor remembers its inputs, a backward closure, and a
monotonically increasing record id). ``Tensor.backward()`` collects the
records reachable from a scalar loss and replays their adjoints in exact
reverse order of recording. Double backward is not supported; calling
``backward`` twice on the same tensor raises.

All data lives in row-major ``numpy.float64`` arrays. Layer primitives
(conv2d, dense, pooling, upsampling, dropout) are implemented here so the
rest of the package never touches raw gradients.
"""

from __future__ import annotations

import hashlib
import itertools
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

_RECORD_IDS = itertools.count()
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Rng:
    """Seeded random stream (PCG64) with derivable, independent child streams.

    The same seed reproduces the same draw sequence across runs; child
    streams derived from identical keys are identical regardless of what
    other streams were consumed in between.
    """

    def __init__(self, seed: int, _entropy: Optional[Sequence[int]] = None):
        self.seed = int(seed)
        self._entropy = list(_entropy) if _entropy is not None else [self.seed]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))

    def derive(self, *keys) -> "Rng":
        """Child stream keyed by (this stream's entropy, *keys).

        Keys may be ints or strings; strings are hashed with sha256 so the
        derivation is stable across processes and platforms.
        """
        ints = []
        for k in keys:
            if isinstance(k, str):
                ints.append(int.from_bytes(hashlib.sha256(k.encode()).digest()[:8], "little"))
            else:
                ints.append(int(k))
        return Rng(self.seed, self._entropy + ints)

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def beta(self, a, b):
        return float(self._gen.beta(a, b))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def state(self) -> dict:
        return {"entropy": list(self._entropy), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["entropy"][0], state["entropy"])
        bg_state = state["bit_generator"]
        # JSON round-trips may stringify the 128-bit PCG64 integers
        inner = dict(bg_state)
        inner["state"] = {k: int(v) for k, v in bg_state["state"].items()}
        rng._gen.bit_generator.state = inner
        return rng


class _OpRecord:
    __slots__ = ("order_id", "out", "inputs", "backward_fn", "name")

    def __init__(self, out, inputs, backward_fn, name):
        self.order_id = next(_RECORD_IDS)
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """N-dimensional float64 array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._record: Optional[_OpRecord] = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from self.

        Self must be a scalar (size 1). Gradients accumulate into existing
        ``grad`` buffers; a second backward through the same tensor raises.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if self._backward_done:
            raise UsageError("backward() already ran for this tensor; rebuild the graph to differentiate again")
        self._backward_done = True
        Tape.trace(self).run(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered slice of recorded operations reachable from one root tensor.

    ``run`` seeds the root adjoint with 1 and replays the records in exact
    reverse order of recording, accumulating adjoints into every
    requires_grad tensor on the path.
    """

    def __init__(self, records):
        self.records = records  # ascending record order

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        records = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            rec = t._record
            if rec is None or id(rec) in seen:
                continue
            seen.add(id(rec))
            records.append(rec)
            stack.extend(rec.inputs)
        records.sort(key=lambda r: r.order_id)
        return cls(records)

    def run(self, root: Tensor):
        adjoints: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        holder = {id(root): root}
        for rec in reversed(self.records):
            g_out = adjoints.get(id(rec.out))
            if g_out is None:
                continue
            grads_in = rec.backward_fn(g_out)
            for inp, g_in in zip(rec.inputs, grads_in):
                if g_in is None or not (inp.requires_grad or inp._record is not None):
                    continue
                key = id(inp)
                holder[key] = inp
                if key in adjoints:
                    adjoints[key] = adjoints[key] + g_in
                else:
                    adjoints[key] = g_in
        for key, tensor in holder.items():
            if tensor.requires_grad:
                g = adjoints[key]
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _register(out: Tensor, inputs, backward_fn, name: str) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad or t._record is not None for t in inputs):
        out.requires_grad = out.requires_grad or any(t.requires_grad for t in inputs)
        out._record = _OpRecord(out, tuple(inputs), backward_fn, name)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _register(out, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _register(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _register(out, (a,), lambda g: (-g,), "neg")


def texp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _register(out, (a,), lambda g: (g * out.data,), "exp")


def tlog(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _register(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(s)
    return _register(out, (a,), lambda g: (g * out.data * (1.0 - out.data),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g):
        return (g * (a.data > 0.0),)

    return _register(out, (a,), backward, "relu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    out = Tensor(np.maximum(a.data, floor))

    def backward(g):
        return (g * (a.data > floor),)

    return _register(out, (a,), backward, "clamp_min")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape([1] * a.ndim), a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _register(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape([1] * a.ndim) / count, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, a.shape).copy(),)

    return _register(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _register(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _register(out, (a, b), backward, "matmul")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (repeats accumulate)."""
    index = np.asarray(index, dtype=np.intp)
    out = Tensor(a.data[index])

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, index, g)
        return (acc,)

    return _register(out, (a,), backward, "take_rows")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows along ``axis`` sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _register(out, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias with bias broadcast over rows."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    return add(matmul(x, weight), bias)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input.

    Output spatial extent is floor((H + 2*padding - kh) / stride) + 1 and
    analogously for width. Differentiable in input, weight, and bias.
    """
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels of {x.shape} do not match weight channels of {weight.shape}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape} (padding={padding})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(k, c * kh * kw)
    out_data = (wmat @ cols).reshape(b, k, ho, wo) + bias.data.reshape(1, k, 1, 1)
    out = Tensor(out_data)

    def backward(g):
        g_flat = g.reshape(b, k, ho * wo)
        d_w = np.einsum("bkl,bfl->kf", g_flat, cols).reshape(weight.shape)
        d_b = g.sum(axis=(0, 2, 3))
        d_cols = np.matmul(wmat.T, g_flat)  # (B, C*kh*kw, L)
        d_win = d_cols.reshape(b, c, kh, kw, ho, wo)
        d_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                d_xp[:, :, i:i + (ho - 1) * stride + 1:stride,
                     j:j + (wo - 1) * stride + 1:stride] += d_win[:, :, i, j]
        d_x = d_xp[:, :, padding:padding + h, padding:padding + w] if padding else d_xp
        return (d_x, d_w, d_b)

    return _register(out, (x, weight, bias), backward, "conv2d")


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must be divisible by k."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avgpool2d: window {k} does not tile input {x.shape}")
    out = Tensor(x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5)))

    def backward(g):
        g_rep = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g_rep / (k * k),)

    return _register(out, (x,), backward, "avgpool2d")


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling; backward sums gradients over each replicated cell."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2d: expected 4-d input, got {x.shape}")
    if factor < 1:
        raise ConfigError(f"upsample_nearest2d: factor must be >= 1, got {factor}")
    b, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _register(out, (x,), backward, "upsample")


def dropout(x: Tensor, p: float, mode: str, rng: Optional[Rng] = None) -> Tensor:
    """Inverted dropout: train mode zeroes with prob p and scales by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout: probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout: unknown mode {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout: train mode with p > 0 requires an rng")
    scale = 1.0 / (1.0 - p)
    mask = (rng.random(x.shape) >= p) * scale
    out = Tensor(x.data * mask)
    return _register(out, (x,), lambda g: (g * mask,), "dropout")


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar loss tensor."""
    loss.backward()


def assert_all_finite(t: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(t.data)):
        raise UsageError(f"{what} contains non-finite values")
