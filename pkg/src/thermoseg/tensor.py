"""Minimal reverse-mode automatic differentiation engine.

Tensors are 64-bit float numpy arrays (N x C x H x W layout for feature maps)
linked into an implicit tape: every op records its parents and a closure that
pushes the upstream gradient back to them.  ``backward`` walks the tape in
reverse topological order, so gradient accumulation order is fixed and forward
and backward passes are deterministic.

The op set is exactly what the segmentation networks need: stride-1
convolution with Same/Valid zero padding, 2x2 max pooling, 2x nearest
upsampling, channel concatenation, elementwise add/mul, relu, sigmoid, a
dense (matmul + bias) layer, reshape and sum.
"""

from __future__ import annotations

import enum
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class PaddingMode(enum.Enum):
    SAME = "same"
    VALID = "valid"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Sequence["Tensor"] = (),
                 _backward: Optional[Callable[[np.ndarray], None]] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def accumulate_grad_owned(self, g: np.ndarray):
        """Like accumulate_grad, but the caller relinquishes ``g``.

        Skips the defensive copy; only for freshly allocated float64 arrays
        that alias no other tensor's data or grad.
        """
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _result(data, parents, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward_fn if req else None)


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None):
    """Reverse-topological gradient accumulation from a scalar loss.

    Any tensor in ``params`` left untouched by the traversal (unreachable from
    the loss) gets an exactly-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(
            f"backward requires a scalar loss, got shape {loss.data.shape}")
    # iterative post-order DFS
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(a.data + b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad_owned(g * b.data)
        if b.requires_grad:
            b.accumulate_grad_owned(g * a.data)

    return _result(a.data * b.data, (a, b), _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # derivative at exactly 0 is 0

    def _bw(g):
        x.accumulate_grad_owned(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), _bw)


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form: no overflow, and strictly positive down to x ~ -745
    pos = x.data >= 0
    s = np.empty_like(x.data)
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)

    def _bw(g):
        x.accumulate_grad_owned(g * s * (1.0 - s))

    return _result(s, (x,), _bw)


def tsum(x: Tensor) -> Tensor:
    def _bw(g):
        x.accumulate_grad_owned(np.full_like(x.data, float(g)))

    return _result(np.sum(x.data), (x,), _bw)


def reshape(x: Tensor, shape) -> Tensor:
    def _bw(g):
        x.accumulate_grad(g.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), _bw)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, p: int = 0) -> np.ndarray:
    """(N,C,H,W) -> (C*kh*kw, N*Ho*Wo) patch matrix, stride 1, zero pad ``p``.

    Patch rows are (C, kh, kw)-ordered, matching the natural flattening of an
    (F,C,kh,kw) kernel, so the filling writes are long contiguous runs.  The
    padding is folded into the fill ranges, never materialized.
    """
    n, c, h, w = x.shape
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if kh == 1 and kw == 1 and p == 0:
        if n == 1:
            return x.reshape(c, ho * wo)
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * ho * wo)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for ki in range(kh):
        for kj in range(kw):
            # output positions whose window tap (ki,kj) lands on a real pixel;
            # zero only the thin border strips instead of the whole buffer
            li, hi = max(0, p - ki), min(ho, h + p - ki)
            lj, hj = max(0, p - kj), min(wo, w + p - kj)
            tap = cols[:, ki, kj]
            if li:
                tap[:, :, :li] = 0.0
            if hi < ho:
                tap[:, :, hi:] = 0.0
            if lj:
                tap[:, :, li:hi, :lj] = 0.0
            if hj < wo:
                tap[:, :, li:hi, hj:] = 0.0
            tap[:, :, li:hi, lj:hj] = \
                x[:, :, li + ki - p:hi + ki - p,
                  lj + kj - p:hj + kj - p].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor,
           padding: PaddingMode = PaddingMode.SAME) -> Tensor:
    """Stride-1 cross-correlation with zero padding, differentiable in all three args."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4-d input and kernel, got {x.data.shape} and {w.data.shape}")
    n, c, h, wd = x.data.shape
    f, ck, kh, kw = w.data.shape
    if c != ck:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError(f"conv2d requires odd kernel extents, got {w.data.shape}")
    if b.data.shape != (f,):
        raise ShapeMismatchError(
            f"conv2d bias shape {b.data.shape} does not match {f} filters")
    p = (kh - 1) // 2 if padding is PaddingMode.SAME else 0
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"conv2d: kernel {w.data.shape} does not fit input {x.data.shape}")
    # columns are (sample, pixel)-ordered, so one GEMM per sample can write
    # straight into a contiguous (N,F,Ho,Wo) output with no transpose copy
    cols = _im2col(x.data, kh, kw, p)  # (C*kh*kw, N*Ho*Wo)
    hw2 = ho * wo
    wf = w.data.reshape(f, c * kh * kw)
    out = np.empty((n, f, ho, wo))
    for i in range(n):
        np.matmul(wf, cols[:, i * hw2:(i + 1) * hw2], out=out[i].reshape(f, hw2))
    out += b.data[:, None, None]

    def _bw(g):
        if b.requires_grad:
            b.accumulate_grad_owned(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gc = g if g.flags.c_contiguous else np.ascontiguousarray(g)
            gw = np.zeros((f, c * kh * kw))
            for i in range(n):
                gw += gc[i].reshape(f, hw2) @ cols[:, i * hw2:(i + 1) * hw2].T
            w.accumulate_grad_owned(gw.reshape(f, c, kh, kw))
        if x.requires_grad:
            # full correlation of the upstream grad with the flipped kernel
            q = kh - 1 - p
            wr = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, f * kh * kw)
            gcols = _im2col(g if q or g.flags.c_contiguous
                            else np.ascontiguousarray(g), kh, kw, q)
            gx = np.empty((n, c, h, wd))
            hw3 = h * wd
            for i in range(n):
                np.matmul(wr, gcols[:, i * hw3:(i + 1) * hw3],
                          out=gx[i].reshape(c, hw3))
            x.accumulate_grad_owned(gx)

    return _result(out, (x, w, b), _bw)


# ---------------------------------------------------------------------------
# resampling and concatenation


def maxpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2 requires even spatial extents, got {x.data.shape}")
    h2, w2 = h // 2, w // 2
    v = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = v.argmax(axis=-1)  # first max in row-major window order on ties
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gx = np.zeros((n, c, h, w))
        ni, ci, hi, wi = np.ogrid[0:n, 0:c, 0:h2, 0:w2]
        gx.reshape(n, c, h2, 2, w2, 2)[ni, ci, hi, idx // 2, wi, idx % 2] = g
        x.accumulate_grad_owned(gx)

    return _result(out, (x,), _bw)


def upsample2(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def _bw(g):
        # four strided adds beat a reduce over two non-adjacent axes
        x.accumulate_grad_owned(g[:, :, 0::2, 0::2] + g[:, :, 0::2, 1::2]
                                + g[:, :, 1::2, 0::2] + g[:, :, 1::2, 1::2])

    return _result(out, (x,), _bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.data.shape, b.data.shape
    if len(sa) != 4 or len(sb) != 4 or sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ShapeMismatchError(
            f"concat_channels: shapes {sa} and {sb} differ outside the channel axis")
    ca = sa[1]

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :ca])
        if b.requires_grad:
            b.accumulate_grad(g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), _bw)


# ---------------------------------------------------------------------------
# dense layer


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-batched dense layer: (N,D) @ (D,M) + (M,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatchError(
            f"linear: input {x.data.shape} incompatible with weight {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeMismatchError(
            f"linear: bias {b.data.shape} incompatible with weight {w.data.shape}")

    def _bw(g):
        if b.requires_grad:
            b.accumulate_grad_owned(g.sum(axis=0))
        if w.requires_grad:
            w.accumulate_grad_owned(x.data.T @ g)
        if x.requires_grad:
            x.accumulate_grad_owned(g @ w.data.T)

    return _result(x.data @ w.data + b.data, (x, w, b), _bw)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued.  The relative error denominator is
    max(1, |analytic|, |numeric|).  With ``max_coords`` set, a seeded random
    subset of coordinates is checked instead of every coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out, params=[x])
    analytic = x.grad.copy().ravel()

    flat = x.data.ravel()
    n = flat.size
    if max_coords is None or max_coords >= n:
        coords = range(n)
    else:
        from .rng import Rng
        picks = Rng(seed).raw(max_coords) % np.uint64(n)
        coords = sorted(set(int(i) for i in picks))
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, err)
    return worst
