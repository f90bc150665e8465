"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The engine provides exactly the operations the segmentation networks and
their losses need: dense 2-D convolution, affine maps, leaky ReLU, channel
softmax, bilinear upsampling, and a few elementwise/reduction helpers.
Every op records its inputs together with one vector-Jacobian closure per
input; ``backward`` linearises the reachable subgraph into a
:class:`Tape` and replays it in reverse execution order.

Tensors are immutable after creation except for ``grad``, which is only
written during ``backward`` and accumulates additively across calls.
Gradient checks should run in float64; training normally uses float32.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

# Floor applied to every log argument inside losses; adversarial training can
# drive softmax outputs numerically to 0.
LOG_EPS = 1e-12

_seq_counter = itertools.count()
_grad_enabled = True


class _Record:
    """Provenance of an op output: parent tensors plus one vjp per parent."""

    __slots__ = ("name", "inputs", "vjps", "seq")

    def __init__(self, name: str, inputs, vjps):
        self.name = name
        self.inputs = inputs
        self.vjps = vjps
        self.seq = next(_seq_counter)


class Tensor:
    """Dense real array with optional gradient tracking.

    Leaves created with ``requires_grad=True`` receive their gradient in
    ``grad`` after a backward pass. Op outputs carry a provenance record
    instead; their intermediate gradients are discarded once consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._record: Optional[_Record] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant copy of this tensor, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self._record is not None:
            flags.append(f"op={self._record.name}")
        tail = ", " + ", ".join(flags) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tail})"


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._record is not None


def _result(name: str, data: np.ndarray, inputs, vjps) -> Tensor:
    """Wrap an op output, recording provenance when tracking is active.

    ``vjps`` is aligned with ``inputs``; a ``None`` entry marks an input the
    op is not differentiable towards (it is skipped during backward).
    Whether an input is tracked is decided here, at record time, so leaves
    that are frozen during the forward stay constants of this graph even if
    they are unfrozen before backward runs.
    This is also the extension point other modules in the package use to
    define ops with bespoke gradients.
    """
    out = Tensor(data)
    if _grad_enabled:
        kept = tuple(v if _needs_grad(t) else None for t, v in zip(inputs, vjps))
        if any(v is not None for v in kept):
            out._record = _Record(name, tuple(inputs), kept)
    return out


@contextmanager
def no_grad():
    """Disable recording; forwards inside the block build no graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def frozen(params: Iterable[Tensor]):
    """Temporarily clear ``requires_grad`` on ``params``.

    Gradients still flow *through* ops that consume the frozen tensors, but
    nothing is accumulated into them. Used to hold one side of the
    adversarial game fixed while the other side trains.
    """
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, prev):
            p.requires_grad = flag


class Tape:
    """Execution-ordered record of the ops reachable from a root tensor."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)

    def __len__(self):
        return len(self.nodes)

    def op_names(self):
        return [t._record.name for t in self.nodes]


def build_tape(root: Tensor) -> Tape:
    """Collect every recorded op that feeds ``root``, in execution order."""
    seen = set()
    stack = [root]
    nodes = []
    while stack:
        t = stack.pop()
        if t._record is None or id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._record.inputs)
    nodes.sort(key=lambda t: t._record.seq)
    return Tape(nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls without ``zero_grad`` add up. Rejects non-scalar losses.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._record is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise ValueError("loss is not connected to any tensor that requires gradients")

    tape = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        rec = node._record
        for inp, vjp in zip(rec.inputs, rec.vjps):
            if vjp is None:
                continue
            gi = vjp(g)
            if inp._record is not None:
                acc = grads.get(id(inp))
                if acc is None:
                    grads[id(inp)] = gi
                else:
                    acc += gi
            else:
                if inp.grad is None:
                    inp.grad = gi
                else:
                    inp.grad += gi


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), (lambda g: g.copy(), lambda g: g.copy()))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        (lambda g: g * b.data, lambda g: g * a.data),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result("scale", a.data * s, (a,), (lambda g: g * s,))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result("sum_all", out, (a,), (lambda g: np.full(a.shape, g, dtype=a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def log_clamped(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(max(a, eps)); gradient is 0 wherever the clamp is active."""
    clamped = np.maximum(a.data, eps)
    out = np.log(clamped)

    def vjp(g):
        return np.where(a.data > eps, g / clamped, 0.0).astype(a.dtype, copy=False)

    return _result("log_clamped", out, (a,), (vjp,))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is defined as slope."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    out = np.maximum(a.data, slope * a.data)

    def vjp(g):
        return g * np.where(a.data > 0, 1.0, slope).astype(a.dtype, copy=False)

    return _result("leaky_relu", out, (a,), (vjp,))


def softmax_channel(a: Tensor) -> Tensor:
    """Softmax along axis 0 (the channel axis), max-stabilised.

    Works for a bare vector ``[c]`` as well as channel-first maps
    ``[c, h, w]``: each spatial location becomes a probability simplex.
    """
    if a.data.ndim < 1 or a.shape[0] < 1:
        raise ValueError(f"softmax_channel needs a leading channel axis, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=0, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=0, keepdims=True))

    return _result("softmax_channel", y, (a,), (vjp,))


def take0(x: Tensor, index: int) -> Tensor:
    """Select one slice along axis 0 (a channel of a map, a row of a matrix)."""
    index = int(index)
    if not 0 <= index < x.shape[0]:
        raise ValueError(f"take0: index {index} out of range for axis of size {x.shape[0]}")
    out = x.data[index].copy()

    def vjp(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] = g
        return full

    return _result("take0", out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# neural ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map for a single vector: weight @ x + bias."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError(
            f"linear expects vector/matrix/vector, got {x.shape}/{weight.shape}/{bias.shape}"
        )
    dout, din = weight.shape
    if x.shape[0] != din or bias.shape[0] != dout:
        raise ValueError(
            f"linear: weight {weight.shape} incompatible with input {x.shape} and bias {bias.shape}"
        )
    out = weight.data @ x.data + bias.data
    return _result(
        "linear",
        out,
        (x, weight, bias),
        (
            lambda g: weight.data.T @ g,
            lambda g: np.outer(g, x.data),
            lambda g: g.copy(),
        ),
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense cross-correlation of a [cin,h,w] map with a [cout,cin,kh,kw] kernel."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects input [c,h,w] and kernel [o,c,kh,kw], got {x.shape} and {kernel.shape}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >=1 and padding >=0, got {stride}, {padding}")
    cin, hin, win = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(
            f"conv2d: input has {cin} channels but kernel {kernel.shape} expects {kcin}"
        )
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    hout = (hin + 2 * padding - kh) // stride + 1
    wout = (win + 2 * padding - kw) // stride + 1
    if hin + 2 * padding < kh or win + 2 * padding < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} does not fit padded input "
            f"{hin + 2 * padding}x{win + 2 * padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # [cin, hout, wout, kh, kw] windows, then flattened to an im2col matrix.
    win_view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win_view = win_view[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win_view.transpose(0, 3, 4, 1, 2)).reshape(cin * kh * kw, hout * wout)
    km = kernel.data.reshape(cout, cin * kh * kw)
    out = (km @ cols + bias.data[:, None]).reshape(cout, hout, wout)

    def vjp_x(g):
        g2 = g.reshape(cout, hout * wout)
        dcols = (km.T @ g2).reshape(cin, kh, kw, hout, wout)
        dxp = np.zeros((cin, hin + 2 * padding, win + 2 * padding), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * hout : stride, j : j + stride * wout : stride] += dcols[:, i, j]
        if padding:
            return dxp[:, padding : padding + hin, padding : padding + win].copy()
        return dxp

    def vjp_k(g):
        g2 = g.reshape(cout, hout * wout)
        return (g2 @ cols.T).reshape(kernel.shape)

    def vjp_b(g):
        return g.reshape(cout, -1).sum(axis=1)

    return _result("conv2d", out, (x, kernel, bias), (vjp_x, vjp_k, vjp_b))


@lru_cache(maxsize=128)
def _interp_matrix(n_out: int, n_in: int, dtype_name: str) -> np.ndarray:
    """1-D align-corners interpolation matrix [n_out, n_in]; rows sum to 1."""
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of [c,h,w] to [c,out_h,out_w].

    Separable: the resize is two 1-D interpolation matmuls, so equal sizes
    reproduce the input exactly and the backward pass is the transpose.
    """
    if x.data.ndim != 3:
        raise ValueError(f"bilinear_upsample expects [c,h,w], got shape {x.shape}")
    out_h, out_w = int(out_h), int(out_w)
    c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_upsample: output size {out_h}x{out_w} is empty")
    if out_h < h or out_w < w:
        raise ValueError(
            f"bilinear_upsample: output {out_h}x{out_w} smaller than input {h}x{w}"
        )
    rh = _interp_matrix(out_h, h, x.dtype.name)
    rw = _interp_matrix(out_w, w, x.dtype.name)
    t1 = x.data @ rw.T  # [c, h, out_w]
    out = np.ascontiguousarray(np.tensordot(rh, t1, axes=(1, 1)).transpose(1, 0, 2))

    def vjp(g):
        dt1 = np.tensordot(g, rh, axes=([1], [0])).transpose(0, 2, 1)  # [c, h, out_w]
        return np.ascontiguousarray(dt1 @ rw)

    return _result("bilinear_upsample", out, (x,), (vjp,))
