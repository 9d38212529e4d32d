"""Dense float64 tensors with reverse-mode automatic differentiation.

Covers exactly the operation set the attention and detection blocks need:
batched matmul, stabilized softmax, grouped conv2d, batchnorm2d, an
elementwise suite, reductions, and a binary cross-entropy-on-logits used
by the detection loss. Gradients are recorded as closures on the output
tensors; ``Tensor.backward`` replays the recorded operations once each in
reverse topological order and accumulates adjoints additively.

All storage is row-major float64. Shapes are fixed at construction;
reshape/permute return new tensors viewing or copying the data.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that suspends gradient recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from self.

        ``seed`` is mandatory for non-scalar outputs; adjoints from fan-out
        accumulate additively.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward on tensor of shape {self.shape} requires an explicit seed"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64).reshape(self.data.shape)

        # iterative post-order DFS: each recorded op visited exactly once
        topo: list[Tensor] = []
        seen = set()
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accum(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise / structural ops as methods --------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out = _from_op(self.data.reshape(shape), (self,))
        if out._parents:
            def bw(g, self=self, src_shape=src_shape):
                self._accum(g.reshape(src_shape))
            out._backward = bw
        return out

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if sorted(axes) != list(range(self.data.ndim)):
            raise ValueError(f"invalid permutation {axes} for rank {self.data.ndim}")
        inv = np.argsort(axes)
        out = _from_op(np.ascontiguousarray(self.data.transpose(axes)), (self,))
        if out._parents:
            def bw(g, self=self, inv=tuple(inv)):
                self._accum(g.transpose(inv))
            out._backward = bw
        return out

    def sum(self) -> "Tensor":
        out = _from_op(np.asarray(self.data.sum()), (self,))
        if out._parents:
            def bw(g, self=self):
                self._accum(np.full_like(self.data, float(g)))
            out._backward = bw
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = _from_op(np.asarray(self.data.mean()), (self,))
        if out._parents:
            def bw(g, self=self, n=n):
                self._accum(np.full_like(self.data, float(g) / n))
            out._backward = bw
        return out

    def sigmoid(self) -> "Tensor":
        s = _sigmoid(self.data)
        out = _from_op(s, (self,))
        if out._parents:
            def bw(g, self=self, s=s):
                self._accum(g * s * (1.0 - s))
            out._backward = bw
        return out

    def silu(self) -> "Tensor":
        s = _sigmoid(self.data)
        out = _from_op(self.data * s, (self,))
        if out._parents:
            def bw(g, self=self, s=s):
                self._accum(g * (s + self.data * s * (1.0 - s)))
            out._backward = bw
        return out

    # -- arithmetic dunders ------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _shift_scalar(self, float(other))

    __radd__ = __add__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return _shift_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul_scalar(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _from_op(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    """Wrap an op result; record parents only when grads are live."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = _from_op(a.data + b.data, (a, b))
    if out._parents:
        def bw(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g)
        out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = _from_op(a.data - b.data, (a, b))
    if out._parents:
        def bw(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(-g)
        out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = _from_op(a.data * b.data, (a, b))
    if out._parents:
        def bw(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum(g * a.data)
        out._backward = bw
    return out


def mul_scalar(x: Tensor, s: float) -> Tensor:
    out = _from_op(x.data * s, (x,))
    if out._parents:
        def bw(g, x=x, s=s):
            x._accum(g * s)
        out._backward = bw
    return out


def _shift_scalar(x: Tensor, s: float) -> Tensor:
    out = _from_op(x.data + s, (x,))
    if out._parents:
        def bw(g, x=x):
            x._accum(g)
        out._backward = bw
    return out


def split(x: Tensor, sizes: Sequence[int], axis: int) -> tuple:
    """Slice ``x`` along ``axis`` into consecutive chunks of the given sizes."""
    axis = _check_axis(axis, x.data.ndim)
    if sum(sizes) != x.shape[axis]:
        raise ValueError(
            f"split sizes {tuple(sizes)} do not sum to axis length {x.shape[axis]}"
        )
    outs = []
    start = 0
    for sz in sizes:
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(start, start + sz)
        sl = tuple(sl)
        out = _from_op(np.ascontiguousarray(x.data[sl]), (x,))
        if out._parents:
            def bw(g, x=x, sl=sl):
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[sl] += g
            out._backward = bw
        outs.append(out)
        start += sz
    return tuple(outs)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    axis = _check_axis(axis, tensors[0].data.ndim)
    out = _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._parents:
        sizes = [t.shape[axis] for t in tensors]
        def bw(g, tensors=tuple(tensors), sizes=sizes, axis=axis):
            start = 0
            for t, sz in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, start + sz)
                    t._accum(g[tuple(sl)])
                start += sz
        out._backward = bw
    return out


def bce_with_logits(z: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits against constant targets."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ValueError(f"bce target shape {t.shape} vs logits {z.shape}")
    zd = z.data
    loss = np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    out = _from_op(loss, (z,))
    if out._parents:
        def bw(g, z=z, t=t):
            z._accum(g * (_sigmoid(z.data) - t))
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# matmul / softmax
# ---------------------------------------------------------------------------

def _check_axis(axis: int, rank: int) -> int:
    if not -rank <= axis < rank:
        raise ValueError(f"axis {axis} out of range for rank {rank}")
    return axis % rank


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes.

    Leading (batch/head) dimensions must match exactly; no broadcasting.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _from_op(np.matmul(a.data, b.data), (a, b))
    if out._parents:
        def bw(g, a=a, b=b):
            if a.requires_grad:
                a._accum(np.matmul(g, b.data.swapaxes(-1, -2)))
            if b.requires_grad:
                b._accum(np.matmul(a.data.swapaxes(-1, -2), g))
        out._backward = bw
    return out


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized exponential normalization along ``axis``."""
    axis = _check_axis(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _from_op(y, (x,))
    if out._parents:
        def bw(g, x=x, y=y, axis=axis):
            inner = (g * y).sum(axis=axis, keepdims=True)
            x._accum(y * (g - inner))
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# conv2d / batchnorm2d
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """(B,C,Hp,Wp) -> contiguous (B,C,Ho,Wo,kh,kw) patch array."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win[:, :, ::stride, ::stride, :, :])


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D convolution with zero padding.

    x: (B, Cin, H, W); w: (Cout, Cin/groups, kh, kw); b: (Cout,) or None.
    Output spatial size: floor((H + 2*pad - kh)/stride) + 1, same for W.
    """
    bsz, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ValueError(f"channels not divisible by groups: Cin={cin} Cout={cout} g={groups}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects Cin/g={cin_g}, input provides {cin // groups}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError(
            f"kernel ({kh}x{kw}) exceeds padded input ({h + 2 * padding}x{wd + 2 * padding})"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # (B,Cin,Ho,Wo,kh,kw)
    cols_g = cols.reshape(bsz, groups, cin_g, ho, wo, kh, kw)
    w_g = w.data.reshape(groups, cout // groups, cin_g, kh, kw)
    y = np.einsum("bgchwuv,gocuv->bgohw", cols_g, w_g, optimize=True)
    y = np.ascontiguousarray(y.reshape(bsz, cout, ho, wo))
    if b is not None:
        if b.shape != (cout,):
            raise ValueError(f"bias shape {b.shape} does not match Cout={cout}")
        y += b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)
    out = _from_op(y, parents)
    if out._parents:
        def bw(g, x=x, w=w, b=b, cols_g=cols_g, w_g=w_g, stride=stride,
               padding=padding, groups=groups, dims=(bsz, cin, h, wd, cout, cin_g, kh, kw, ho, wo)):
            bsz, cin, h, wd, cout, cin_g, kh, kw, ho, wo = dims
            gg = g.reshape(bsz, groups, cout // groups, ho, wo)
            if w.requires_grad:
                dw = np.einsum("bgchwuv,bgohw->gocuv", cols_g, gg, optimize=True)
                w._accum(dw.reshape(cout, cin_g, kh, kw))
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dcols = np.einsum("gocuv,bgohw->bgchwuv", w_g, gg, optimize=True)
                dcols = dcols.reshape(bsz, cin, ho, wo, kh, kw)
                dxp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding))
                for u in range(kh):
                    for v in range(kw):
                        dxp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += \
                            dcols[:, :, :, :, u, v]
                if padding:
                    x._accum(dxp[:, :, padding:padding + h, padding:padding + wd])
                else:
                    x._accum(dxp)
        out._backward = bw
    return out


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = False,
) -> Tensor:
    """Per-channel normalization over (B, H, W).

    Training mode normalizes with batch statistics and folds them into the
    running buffers; inference mode uses the running statistics unchanged.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ValueError(f"{name} shape {t.shape} does not match C={c}")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    out = _from_op(y, (x, gamma, beta))
    if out._parents:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        def bw(g, x=x, gamma=gamma, beta=beta, xhat=xhat, invstd=invstd,
               training=training, m=m):
            if beta.requires_grad:
                beta._accum(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gx = g * gamma.data[None, :, None, None]
                if training:
                    s1 = gx.sum(axis=(0, 2, 3), keepdims=True)
                    s2 = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    dx = (invstd[None, :, None, None] / m) * (m * gx - s1 - xhat * s2)
                else:
                    dx = gx * invstd[None, :, None, None]
                x._accum(dx)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function at ``x``."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    probe = Tensor(x.data.copy())
    flat = probe.data.reshape(-1)
    grad = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _as_scalar(f(probe))
            flat[i] = orig - h
            fm = _as_scalar(f(probe))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.data.shape))


def _as_scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)
