"""Small reverse-mode autodiff engine for 5D (batch, channel, z, y, x) tensors.

Only the operations the recovery network needs are provided: 3D convolution,
leaky ReLU, nearest-neighbour upsampling, channel concatenation, elementwise
add/scale, sum and MSE. Everything is computed in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from core.errors import DataError


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._backward = lambda: None
        self._parents = tuple(_parents)
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.requires_grad:
            self.grad += g

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None) -> None:
        # topological order of every node that leads to self
        topo, visited = [], set()

        def build(node):
            if id(node) not in visited:
                visited.add(id(node))
                for parent in node._parents:
                    build(parent)
                topo.append(node)

        build(self)
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in topo:
            if node is not self and node._parents and node.grad is None:
                node.grad = np.zeros_like(node.data)
        for node in reversed(topo):
            node._backward()

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, scalar):
        return scale(self, scalar)

    __rmul__ = __mul__


def _result(data, parents, op) -> Tensor:
    return Tensor(data, any(p.requires_grad for p in parents), parents, op)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DataError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = _result(a.data + b.data, (a, b), "add")

    def _backward():
        a._accumulate(out.grad)
        b._accumulate(out.grad)
    out._backward = _backward
    return out


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    out = _result(a.data * alpha, (a,), "scale")

    def _backward():
        a._accumulate(out.grad * alpha)
    out._backward = _backward
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out = _result(np.sum(a.data), (a,), "sum")

    def _backward():
        a._accumulate(np.broadcast_to(out.grad, a.shape))
    out._backward = _backward
    return out


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")

    def _backward():
        parts = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
        for t, g in zip(tensors, parts):
            t._accumulate(g)
    out._backward = _backward
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=None) -> Tensor:
    """Cross-correlation with zero 'same' padding, stride 1."""
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise DataError(f"conv3d expects 5D input and weight, got {x.shape} and {weight.shape}")
    out_ch, in_ch, kz, ky, kx = weight.shape
    if x.shape[1] != in_ch:
        raise DataError(f"conv3d channel mismatch | input={x.shape[1]} weight={in_ch}")
    if kz % 2 == 0 or ky % 2 == 0 or kx % 2 == 0:
        raise DataError(f"conv3d kernel dims must be odd, got {(kz, ky, kx)}")
    pad = (kz // 2, ky // 2, kx // 2) if padding is None else tuple(int(p) for p in padding)
    b, _, nz, ny, nx = x.shape
    oz, oy, ox = nz + 2 * pad[0] - kz + 1, ny + 2 * pad[1] - ky + 1, nx + 2 * pad[2] - kx + 1
    if min(oz, oy, ox) < 1:
        raise DataError(f"conv3d input {x.shape[2:]} too small for kernel {(kz, ky, kx)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))
    w = weight.data

    offsets = [(i, j, k) for i in range(kz) for j in range(ky) for k in range(kx)]
    y = np.zeros((b, out_ch, oz, oy, ox))
    for i, j, k in offsets:
        window = xp[:, :, i:i + oz, j:j + oy, k:k + ox]
        y += np.einsum("oc,bczyx->bozyx", w[:, :, i, j, k], window, optimize=True)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _result(y, parents, "conv3d")

    def _backward():
        g = out.grad
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, k in offsets:
                gxp[:, :, i:i + oz, j:j + oy, k:k + ox] += np.einsum(
                    "oc,bozyx->bczyx", w[:, :, i, j, k], g, optimize=True)
            x._accumulate(gxp[:, :, pad[0]:pad[0] + nz, pad[1]:pad[1] + ny, pad[2]:pad[2] + nx])
        if weight.requires_grad:
            gw = np.zeros_like(w)
            for i, j, k in offsets:
                window = xp[:, :, i:i + oz, j:j + oy, k:k + ox]
                gw[:, :, i, j, k] = np.einsum("bozyx,bczyx->oc", g, window, optimize=True)
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))
    out._backward = _backward
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    out = _result(np.where(positive, x.data, slope * x.data), (x,), "leaky_relu")

    def _backward():
        x._accumulate(np.where(positive, out.grad, slope * out.grad))
    out._backward = _backward
    return out


def nn_upsample(x: Tensor, factor: int) -> Tensor:
    if factor not in (2, 3):
        raise DataError(f"nn_upsample supports factors 2 and 3, got {factor}")
    y = x.data
    for axis in (2, 3, 4):
        y = np.repeat(y, factor, axis=axis)
    out = _result(y, (x,), "nn_upsample")

    def _backward():
        b, c, nz, ny, nx = x.shape
        g = out.grad.reshape(b, c, nz, factor, ny, factor, nx, factor)
        x._accumulate(g.sum(axis=(3, 5, 7)))
    out._backward = _backward
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    out = _result(np.mean(diff * diff), (pred,), "mse")

    def _backward():
        pred._accumulate(out.grad * 2.0 * diff / diff.size)
    out._backward = _backward
    return out


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, st: AdamState) -> None:
    """Bias-corrected Adam update in place; no weight decay."""
    st.t += 1
    c1 = 1.0 - st.beta1 ** st.t
    c2 = 1.0 - st.beta2 ** st.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = st.m.get(name)
        v = st.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = st.beta1 * m + (1.0 - st.beta1) * g
        v = st.beta2 * v + (1.0 - st.beta2) * g * g
        st.m[name], st.v[name] = m, v
        p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
