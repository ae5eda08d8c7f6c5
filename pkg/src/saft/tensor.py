"""Minimal reverse-mode autodiff over float64 numpy arrays.

Everything is a `Tensor`: a value array, a same-shaped gradient buffer and a
`requires_grad` flag. Ops build a graph of backward closures; `backward()` on
a scalar walks it in reverse topological order. Gradients flow through nodes
that need them and parameter-gradient work is skipped entirely for tensors
with `requires_grad=False`, which is what makes layer freezing cheap.

Only the shapes the layer kinds need are supported; anything ambiguous
(general broadcasting, batched matmul) is rejected loudly.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class GraphError(RuntimeError):
    """Backward called on something that is not a scalar loss."""


class Tensor:
    """Node in the autodiff graph: float64 data, grad buffer, closure."""

    __slots__ = ("data", "_grad", "requires_grad", "grad_events", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad: Optional[np.ndarray] = None  # materialized on first use
        self.requires_grad = bool(requires_grad)
        # Counts backward accumulations into .grad; lets tests assert that
        # frozen parameters never had gradient work done for them.
        self.grad_events = 0
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def _accum(self, g: np.ndarray) -> None:
        self.grad += g
        self.grad_events += 1

    def backward(self) -> None:
        """Populate gradients of every requires_grad tensor reachable from here."""
        if self.data.ndim != 0:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            # nothing in the graph wants a gradient
            return
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.requires_grad:
                node._backward()

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; the only broadcast allowed is the row-bias pattern."""
    a, b = as_tensor(a), as_tensor(b)
    bias_pattern = b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]
    if a.shape != b.shape and not bias_pattern:
        raise ShapeError(f"add supports equal shapes or [n,f]+[f], got {a.shape} + {b.shape}")
    out = _out(a.data + b.data, (a, b))

    def _backward():
        g = out.grad
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g.sum(axis=0) if bias_pattern else g)

    out._backward = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul requires equal shapes, got {a.shape} * {b.shape}")
    out = _out(a.data * b.data, (a, b))

    def _backward():
        g = out.grad
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = _out(a.data @ b.data, (a, b))

    def _backward():
        g = out.grad
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _out(np.maximum(x.data, 0.0), (x,))

    def _backward():
        if x.requires_grad:
            x._accum(out.grad * (x.data > 0.0))

    out._backward = _backward
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = _out(x.data.reshape(shape), (x,))

    def _backward():
        if x.requires_grad:
            x._accum(out.grad.reshape(x.shape))

    out._backward = _backward
    return out


def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _out(np.asarray(x.data.sum()), (x,))

    def _backward():
        if x.requires_grad:
            x._accum(np.full(x.shape, out.grad))

    out._backward = _backward
    return out


# -- convolution -----------------------------------------------------------


def _conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(n,c,h,w) -> (n, c*kh*kw, oh*ow) patch matrix."""
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(
    dcols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    """Scatter-add inverse of _im2col."""
    n, c, h, w = x_shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d6[:, :, i, j]
    if padding == 0:
        return dxp
    return dxp[:, :, padding : padding + h, padding : padding + w]


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of (n,c,h,w) input with (f,c,kh,kw) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})"
        )
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, padding)
    cols = _im2col(x.data, kh, kw, stride, padding)  # (n, ckk, ohow)
    wflat = kernel.data.reshape(f, c * kh * kw)
    y = np.einsum("fk,nkp->nfp", wflat, cols).reshape(n, f, oh, ow)
    if bias is not None:
        y = y + bias.data.reshape(1, f, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _out(y, parents)

    def _backward():
        g = out.grad.reshape(n, f, oh * ow)
        if bias is not None and bias.requires_grad:
            bias._accum(out.grad.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            dw = np.einsum("nfp,nkp->fk", g, cols)
            kernel._accum(dw.reshape(kernel.shape))
        if x.requires_grad:
            dcols = np.einsum("fk,nfp->nkp", wflat, g)
            x._accum(_col2im(dcols, x.shape, kh, kw, stride, padding))

    out._backward = _backward
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax likelihood of integer class labels."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [n, classes], got {logits.shape}")
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logprobs = z - logsumexp
    loss = -logprobs[np.arange(n), labels].mean()
    out = _out(np.asarray(loss), (logits,))

    def _backward():
        if logits.requires_grad:
            d = np.exp(logprobs)
            d[np.arange(n), labels] -= 1.0
            logits._accum(out.grad * d / n)

    out._backward = _backward
    return out
