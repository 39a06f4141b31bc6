"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Graph` records every operation as it is executed (values are
computed eagerly).  Calling :meth:`Graph.backward` on a scalar node walks the
record in reverse creation order, which is a valid topological order because
inputs always precede their consumers.

Leaves are either constants, free inputs (``g.input(..., requires_grad=True)``)
or bound :class:`Parameter` objects.  Parameter gradients accumulate into
``Parameter.grad`` so that two backward calls without zeroing double them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "Graph",
    "Node",
    "Parameter",
    "ShapeError",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operands of an op have incompatible shapes."""


class Parameter:
    """A trainable (or frozen) dense array with a same-shape gradient buffer."""

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Node:
    __slots__ = ("value", "parents", "backward_fn", "needs_grad", "grad", "param", "index")

    def __init__(self, value, parents=(), backward_fn=None, needs_grad=False, param=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.needs_grad = needs_grad
        self.grad = None
        self.param = param
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.value.shape}, needs_grad={self.needs_grad})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc
    # (n, 1) against (n,) silently builds an (n, n) table: mixed ranks where both
    # sides grow are rejected (same-rank outer products stay allowed)
    if (a.ndim != b.ndim and a.size > 1 and b.size > 1
            and out != a.shape and out != b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} would both be expanded to {out}")


class Graph:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._bound: dict[tuple[int, bool], Node] = {}

    # -- leaves ---------------------------------------------------------
    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push(Node(np.asarray(value)))

    def input(self, value, requires_grad: bool = False) -> Node:
        return self._push(Node(np.asarray(value), needs_grad=requires_grad))

    def param(self, p: Parameter, frozen: bool = False) -> Node:
        """Bind a parameter.  ``frozen=True`` yields a stop-gradient view."""
        key = (id(p), frozen)
        node = self._bound.get(key)
        if node is None:
            live = p.trainable and not frozen
            node = self._push(Node(p.value, needs_grad=live, param=p if live else None))
            self._bound[key] = node
        return node

    def _op(self, value, parents: Sequence[Node], backward_fn) -> Node:
        needs = any(p.needs_grad for p in parents)
        return self._push(Node(value, tuple(parents), backward_fn if needs else None, needs))

    # -- arithmetic -----------------------------------------------------
    def add(self, a: Node, b: Node) -> Node:
        _check_broadcast(a.value, b.value, "add")
        sa, sb, na, nb = a.value.shape, b.value.shape, a.needs_grad, b.needs_grad
        return self._op(a.value + b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa) if na else None,
                                   _unbroadcast(g, sb) if nb else None))

    def sub(self, a: Node, b: Node) -> Node:
        _check_broadcast(a.value, b.value, "sub")
        sa, sb, na, nb = a.value.shape, b.value.shape, a.needs_grad, b.needs_grad
        return self._op(a.value - b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa) if na else None,
                                   -_unbroadcast(g, sb) if nb else None))

    def mul(self, a: Node, b: Node) -> Node:
        _check_broadcast(a.value, b.value, "mul")
        av, bv, na, nb = a.value, b.value, a.needs_grad, b.needs_grad
        return self._op(av * bv, (a, b),
                        lambda g: (_unbroadcast(g * bv, av.shape) if na else None,
                                   _unbroadcast(g * av, bv.shape) if nb else None))

    def scale(self, a: Node, c: float) -> Node:
        c = a.value.dtype.type(c) if a.value.dtype.kind == "f" else c
        return self._op(a.value * c, (a,), lambda g: (g * c,))

    def shift(self, a: Node, c: float) -> Node:
        """``a + c`` for a Python scalar ``c``."""
        c = a.value.dtype.type(c)
        return self._op(a.value + c, (a,), lambda g: (g,))

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} are not aligned")
        need_a, need_b = a.needs_grad, b.needs_grad

        def back(g):
            return (g @ bv.T if need_a else None, av.T @ g if need_b else None)

        return self._op(av @ bv, (a, b), back)

    def linear(self, x: Node, w: Node, b: Node) -> Node:
        return self.add(self.matmul(x, w), b)

    # -- elementwise nonlinearities ------------------------------------
    def relu(self, a: Node) -> Node:
        av = a.value
        return self._op(np.maximum(av, 0), (a,), lambda g: (g * (av > 0),))

    def sigmoid(self, a: Node) -> Node:
        s = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
        s = s.astype(a.value.dtype)
        return self._op(s, (a,), lambda g: (g * s * (1 - s),))

    def softclamp(self, a: Node, lo: float, hi: float) -> Node:
        """Hard clamp with zero gradient outside ``[lo, hi]``."""
        inside = (a.value >= lo) & (a.value <= hi)
        return self._op(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))

    def sin(self, a: Node) -> Node:
        av = a.value
        return self._op(np.sin(av), (a,), lambda g: (g * np.cos(av),))

    def cos(self, a: Node) -> Node:
        av = a.value
        return self._op(np.cos(av), (a,), lambda g: (-g * np.sin(av),))

    def abs(self, a: Node) -> Node:
        av = a.value
        return self._op(np.abs(av), (a,), lambda g: (g * np.sign(av),))

    # -- structure ------------------------------------------------------
    def concat(self, parts: Sequence[Node], axis: int = -1) -> Node:
        vals = [p.value for p in parts]
        ndim = vals[0].ndim
        if any(v.ndim != ndim for v in vals):
            raise ShapeError("concat: operands differ in rank")
        axis = axis % ndim
        for v in vals[1:]:
            if v.shape[:axis] + v.shape[axis + 1:] != vals[0].shape[:axis] + vals[0].shape[axis + 1:]:
                raise ShapeError(f"concat: {v.shape} incompatible with {vals[0].shape} on axis {axis}")
        bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

        def back(g):
            out = []
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.needs_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    out.append(g[tuple(idx)])
                else:
                    out.append(None)
            return tuple(out)

        return self._op(np.concatenate(vals, axis=axis), parts, back)

    def slice(self, a: Node, start: int, stop: int, axis: int = -1) -> Node:
        axis = axis % a.value.ndim
        idx = [slice(None)] * a.value.ndim
        idx[axis] = slice(start, stop)
        idx = tuple(idx)
        shape, dtype = a.value.shape, a.value.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return self._op(a.value[idx], (a,), back)

    def take(self, a: Node, index, axis: int = 0) -> Node:
        """Gather ``a[index]`` along ``axis``; backward scatter-adds into the source."""
        index = np.asarray(index, dtype=np.intp)
        axis = axis % a.value.ndim
        shape, dtype = a.value.shape, a.value.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            dst = np.moveaxis(full, axis, 0)
            src = np.moveaxis(g, axis, 0)
            if index.ndim == 1 and (index.size < 2 or np.all(np.diff(index) > 0)):
                dst[index] = src
            elif index.ndim == 1 and shape[axis] <= 64 and src.ndim == 2:
                onehot = np.zeros((shape[axis], index.size), dtype=dtype)
                onehot[index, np.arange(index.size)] = 1
                dst[...] = onehot @ src
            else:
                np.add.at(dst, index, src)
            return (full,)

        return self._op(np.take(a.value, index, axis=axis), (a,), back)

    def reshape(self, a: Node, shape) -> Node:
        src = a.value.shape
        try:
            value = a.value.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: {src} -> {shape}") from exc
        return self._op(value, (a,), lambda g: (g.reshape(src),))

    def forward_diff(self, a: Node, axis: int) -> Node:
        """Forward differences ``a[i+1] - a[i]`` along ``axis``."""
        value = np.diff(a.value, axis=axis)
        shape, dtype = a.value.shape, a.value.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            n = shape[axis]
            hi = [slice(None)] * len(shape)
            lo = [slice(None)] * len(shape)
            hi[axis] = slice(1, n)
            lo[axis] = slice(0, n - 1)
            full[tuple(hi)] += g
            full[tuple(lo)] -= g
            return (full,)

        return self._op(value, (a,), back)

    # -- reductions (64-bit accumulation) ------------------------------
    def sum(self, a: Node) -> Node:
        shape, dtype = a.value.shape, a.value.dtype
        value = np.asarray(np.sum(a.value, dtype=np.float64), dtype=dtype)
        return self._op(value, (a,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))

    def mean(self, a: Node) -> Node:
        n = a.value.size
        if n == 0:
            return self.constant(np.asarray(0, dtype=a.value.dtype))
        return self.scale(self.sum(a), 1.0 / n)

    def l1(self, a: Node) -> Node:
        """Sum of absolute values; subgradient 0 at 0."""
        return self.sum(self.abs(a))

    def sqnorm(self, a: Node) -> Node:
        """Sum of squares."""
        av = a.value
        value = np.asarray(np.sum(np.square(av, dtype=np.float64)), dtype=av.dtype)
        return self._op(value, (a,), lambda g: (2 * g * av,))

    def norm(self, a: Node, axis: int = -1) -> Node:
        """Euclidean norm along ``axis`` (kept dims dropped); gradient 0 at the origin."""
        av = a.value
        n = np.sqrt(np.sum(np.square(av, dtype=np.float64), axis=axis, keepdims=True))
        safe = np.where(n > 0, n, 1.0)

        def back(g):
            gk = np.expand_dims(g, axis)
            return ((gk * av / safe * (n > 0)).astype(av.dtype),)

        return self._op(np.squeeze(n, axis=axis).astype(av.dtype), (a,), back)

    def bce(self, sigma: Node, target, eps: float = 1e-7) -> Node:
        """Elementwise binary cross entropy with probabilities clamped to ``[eps, 1-eps]``."""
        y = np.asarray(target.value if isinstance(target, Node) else target, dtype=sigma.value.dtype)
        s = sigma.value
        inside = (s >= eps) & (s <= 1 - eps)
        sc = np.clip(s, eps, 1 - eps)
        value = -(1 - y) * np.log1p(-sc) - y * np.log(sc)

        def back(g):
            return (g * inside * ((sc - y) / (sc * (1 - sc))),)

        return self._op(value.astype(s.dtype), (sigma,), back)

    # -- feature planes -------------------------------------------------
    def bilinear_sample(self, plane: Node, uv: Node) -> Node:
        """Bilinearly sample feature planes at ``uv`` in ``[-1, 1]^2``.

        ``plane`` is ``(N, N, K)`` with ``uv`` of shape ``(B, 2)`` (result
        ``(B, K)``), or a stack ``(P, N, N, K)`` with ``uv`` of shape
        ``(B, P, 2)`` (result ``(B, P, K)``).  ``u`` indexes columns and ``v``
        rows; ``-1`` and ``1`` map onto the outermost texel centres.
        Coordinates outside the square are clamped and receive zero gradient
        along the clamped axis.
        """
        P, q = plane.value, uv.value
        single = P.ndim == 3
        if single:
            P, q = P[None], q[:, None, :] if q.ndim == 2 else q
        if P.ndim != 4 or P.shape[1] != P.shape[2] or P.shape[1] < 2:
            raise ShapeError(f"bilinear_sample: plane must be (N, N, K) with N >= 2, got {plane.value.shape}")
        if q.ndim != 3 or q.shape[1:] != (P.shape[0], 2):
            raise ShapeError(f"bilinear_sample: uv shape {uv.value.shape} does not match planes {plane.value.shape}")
        n_planes, n, _, k = P.shape
        free = (q >= -1) & (q <= 1)
        f = (np.clip(q, -1, 1) + 1) * (0.5 * (n - 1))
        i0 = np.clip(np.floor(f).astype(np.intp), 0, n - 2)
        w = (f - i0).astype(P.dtype)
        wx, wy = w[..., :1], w[..., 1:]
        flat = P.reshape(-1, k)
        base = (np.arange(n_planes) * (n * n))[None, :] + i0[..., 1] * n + i0[..., 0]
        p00 = flat[base]
        p01 = flat[base + 1]
        p10 = flat[base + n]
        p11 = flat[base + n + 1]
        top = p00 + wx * (p01 - p00)
        bot = p10 + wx * (p11 - p10)
        value = top + wy * (bot - top)
        need_plane, need_uv = plane.needs_grad, uv.needs_grad
        size = flat.shape[0] * k

        def back(g):
            if single:
                g = g[:, None, :]
            gp = guv = None
            if need_plane:
                cols = np.arange(k)
                acc = np.zeros(size, dtype=np.float64)
                for offset, wt in ((0, (1 - wx) * (1 - wy)), (1, wx * (1 - wy)),
                                   (n, (1 - wx) * wy), (n + 1, wx * wy)):
                    idx = ((base + offset)[..., None] * k + cols).ravel()
                    acc += np.bincount(idx, weights=(wt * g).ravel(), minlength=size)
                gp = acc.astype(P.dtype).reshape(plane.value.shape)
            if need_uv:
                scale = 0.5 * (n - 1)
                du = np.sum(g * ((1 - wy) * (p01 - p00) + wy * (p11 - p10)), axis=-1) * scale
                dv = np.sum(g * (bot - top), axis=-1) * scale
                guv = (np.stack([du, dv], axis=-1) * free).astype(q.dtype).reshape(uv.value.shape)
            return (gp, guv)

        return self._op(value[:, 0] if single else value, (plane, uv), back)

    # -- reverse pass ---------------------------------------------------
    def backward(self, root: Node) -> None:
        if root.value.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        if not root.needs_grad:
            return
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            g = node.grad
            if g is None:
                continue
            if node.param is not None:
                node.param.grad += g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.needs_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg.astype(parent.value.dtype, copy=False)
                else:
                    parent.grad = parent.grad + pg


@dataclass
class _Group:
    params: list
    lr: float


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    """Bias-corrected Adam over one or more parameter groups."""

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8):
        if groups and isinstance(groups[0], Parameter):
            raise TypeError("Adam expects a list of (params, lr) groups")
        self.groups = [_Group(list(ps), lr) for ps, lr in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[int, AdamState] = {}

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.zero_grad()

    def set_lr(self, index: int, lr: float) -> None:
        self.groups[index].lr = lr

    def step(self) -> None:
        b1, b2 = self.beta1, self.beta2
        for group in self.groups:
            for p in group.params:
                if not p.trainable:
                    continue
                st = self.state.get(id(p))
                if st is None:
                    st = AdamState(np.zeros_like(p.value), np.zeros_like(p.value))
                    self.state[id(p)] = st
                st.step += 1
                g = p.grad
                st.m *= b1
                st.m += (1 - b1) * g
                st.v *= b2
                st.v += (1 - b2) * np.square(g)
                c1 = 1 - b1 ** st.step
                c2 = 1 - b2 ** st.step
                denom = np.sqrt(st.v) / math.sqrt(c2) + self.eps
                p.value -= ((group.lr / c1) * st.m / denom).astype(p.value.dtype)


def finite_diff_check(fn: Callable, point, h: float = 1e-4, grad=None) -> float:
    """Largest relative error between an analytic gradient and central differences.

    ``fn(x)`` must return ``(value, grad)``; alternatively pass ``grad``
    explicitly and let ``fn`` return the scalar value only.
    Relative error uses the denominator ``max(|a|, |b|, 1e-8)``.
    """
    x = np.array(point, dtype=np.float64)
    if grad is None:
        _, grad = fn(x.copy())

    def value(v):
        out = fn(v)
        return float(out[0] if isinstance(out, tuple) else out)

    analytic = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        numeric = (value(xp) - value(xm)) / (2 * h)
        a = analytic[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst
