"""Dense tensors with reverse-mode automatic differentiation.

Small, numpy-backed, and deliberately minimal: just the primitives the
quantized training stack needs. Values are float64 by default (float32 is
accepted and preserved); the computation graph is recorded implicitly on
the tensors themselves and replayed in reverse topological order by
``backward``.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float64

Number = Union[int, float]


def _as_array(x, dtype=None) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(DEFAULT_DTYPE)
    if dtype is not None:
        a = a.astype(dtype)
    return a


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting: reduce gradient g down to `shape`."""
    if g.shape == shape:
        return g
    # collapse leading axes added by broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A dense array plus optional gradient tracking.

    Operations on tensors with ``requires_grad`` build a graph; calling
    ``backward()`` on a scalar result populates ``grad`` on every
    reachable tensor that requires gradients. A tensor with
    ``requires_grad=False`` never accumulates gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # -- autodiff engine ------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on all reachable requires_grad tensors.

        The loss must be scalar. Calling backward a second time while any
        reachable tensor still holds a gradient is an error; call
        ``zero_grad`` on the parameters first. Silent accumulation across
        backward calls is deliberately disallowed.
        """
        if self.data.size != 1:
            raise RuntimeError(
                f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))
        stale = [n for n in topo if n.requires_grad and n.grad is not None]
        if stale:
            raise RuntimeError(
                "backward() called while gradients are still populated; "
                "reset them (zero_grad) before the next backward pass")
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Forward-identical copy that blocks all gradient flow."""
        return Tensor(self.data.copy())

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other) -> "Tensor":
        a, b = self, self._coerce(other)
        out_data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_sum_to_shape(g, a.shape))
            if b.requires_grad:
                b._accumulate(_sum_to_shape(g, b.shape))

        return Tensor._from_op(out_data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._from_op(-a.data, (a,), bw)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        a, b = self, self._coerce(other)
        out_data = a.data * b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_sum_to_shape(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_sum_to_shape(g * a.data, b.shape))

        return Tensor._from_op(out_data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        a, b = self, self._coerce(other)
        out_data = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_sum_to_shape(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_sum_to_shape(-g * a.data / (b.data ** 2), b.shape))

        return Tensor._from_op(out_data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        orig = a.shape

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.reshape(orig))

        return Tensor._from_op(a.data.reshape(shape), (a,), bw)

    def flatten2d(self) -> "Tensor":
        """Collapse all but the leading (batch) axis."""
        n = self.shape[0]
        return self.reshape(n, -1)

    # -- reductions -----------------------------------------------------------

    def sum(self) -> "Tensor":
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._from_op(np.asarray(a.data.sum()), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.mean(axis=axis, keepdims=keepdims)
        count = a.data.size if axis is None else (
            np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))

        def bw(g):
            if a.requires_grad:
                gg = np.asarray(g)
                if axis is not None and not keepdims:
                    gg = np.expand_dims(gg, tuple(np.atleast_1d(axis)))
                a._accumulate(np.broadcast_to(gg, a.shape) / count)

        return Tensor._from_op(np.asarray(out_data), (a,), bw)

    def sqrt(self) -> "Tensor":
        a = self
        out_data = np.sqrt(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * 0.5 / out_data)

        return Tensor._from_op(out_data, (a,), bw)

    # -- nonlinearities and clamps -------------------------------------------

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return Tensor._from_op(a.data * mask, (a,), bw)

    def clip(self, r1: Number, r2: Number) -> "Tensor":
        """Elementwise clamp to [r1, r2].

        The registered gradient is 1 on the closed interval [r1, r2]
        (boundary values pass gradient through) and 0 outside.
        """
        if r1 > r2:
            raise ValueError(f"clip bounds out of order: {r1} > {r2}")
        a = self
        mask = (a.data >= r1) & (a.data <= r2)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return Tensor._from_op(np.clip(a.data, r1, r2), (a,), bw)

    def round_nearest(self) -> "Tensor":
        """Round to nearest integer, ties to even.

        Carries no gradient of its own; use the round-with-pass-through
        wrapper for training paths.
        """
        a = self

        def bw(g):
            return None  # round is piecewise constant

        return Tensor._from_op(np.rint(a.data), (a,), bw)

    # -- linear algebra -------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        if a.shape[1] != b.shape[0]:
            raise ValueError(
                f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._from_op(a.data @ b.data, (a, b), bw)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return self.matmul(other)


# -- convolution --------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    oh, ow = windows.shape[2], windows.shape[3]
    # (N, OH, OW, C*kh*kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)
    return cols.reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad, oh, ow) -> np.ndarray:
    n, c, h, w = x_shape
    xpad = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            np.add.at(
                xpad,
                (slice(None), slice(None),
                 slice(i, i + oh * stride, stride),
                 slice(j, j + ow * stride, stride)),
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    if pad:
        xpad = xpad[:, :, pad:-pad, pad:-pad]
    return xpad


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with FCHW weights."""
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride/padding: {stride}/{padding}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weights")
    n, c, h, wid = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"channel mismatch: input {c}, weights {cw}")
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ValueError("kernel larger than padded input")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def bw(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        if w.requires_grad:
            w._accumulate((gcols.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dx_cols = gcols @ wmat
            x._accumulate(
                _col2im(dx_cols, x.shape, kh, kw, stride, padding, oh, ow))

    return Tensor._from_op(out, (x, w), bw)


# -- losses -------------------------------------------------------------------

def log_softmax(logits_data: np.ndarray) -> np.ndarray:
    z = logits_data - logits_data.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross entropy over the batch.

    `targets` is either an integer class array of shape (N,) or a
    probability matrix of shape (N, K) for soft targets. Gradient flows
    to the logits only.
    """
    if logits.data.ndim != 2:
        raise ValueError("logits must be (N, K)")
    n, k = logits.shape
    targets = np.asarray(targets)
    logp = log_softmax(logits.data)
    if targets.ndim == 1:
        if targets.size != n:
            raise ValueError(f"expected {n} labels, got {targets.size}")
        if targets.min() < 0 or targets.max() >= k:
            raise ValueError(f"label out of range [0, {k})")
        onehot = np.zeros((n, k), dtype=logits.dtype)
        onehot[np.arange(n), targets] = 1.0
        target_p = onehot
    elif targets.shape == (n, k):
        target_p = targets.astype(logits.dtype)
    else:
        raise ValueError(f"bad target shape {targets.shape} for logits {logits.shape}")
    loss = -(target_p * logp).sum() / n

    def bw(g):
        if logits.requires_grad:
            p = np.exp(logp)
            logits._accumulate(g * (p - target_p) / n)

    return Tensor._from_op(np.asarray(loss), (logits,), bw)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
