"""Minimal reverse-mode tape over the primitives in :mod:`gazeguide.tensor`.

Each :class:`Node` holds a value and a closure mapping the upstream
gradient to gradients of its parents. The op vocabulary is fixed: it
covers the U-Net forward pass and the transposed operations needed to
replay a saliency backward pass as a differentiable graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


class Node:
    __slots__ = ("value", "parents", "vjp", "name")

    def __init__(self, value: np.ndarray, parents: Sequence["Node"] = (),
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
                 name: str = ""):
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or 'anon'}, shape={self.value.shape})"


def leaf(value: np.ndarray, name: str = "") -> Node:
    return Node(value, name=name)


def backward(out: Node, wrt: Sequence[Node], seed: np.ndarray | None = None) -> list[np.ndarray]:
    """Gradients of ``out`` (scalar unless ``seed`` given) w.r.t. ``wrt``.

    Leaves not reached by the graph get zero gradients.
    """
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    if seed is None:
        seed = np.ones_like(out.value)
    grads: dict[int, np.ndarray] = {id(out): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(n), np.zeros_like(n.value)) for n in wrt]


# ---------------------------------------------------------------------------
# forward-pass ops


def conv2d(x: Node, w: Node, b: Node | None, stride: int = 1, padding: int = 0) -> Node:
    y, cols = T.conv2d_forward_cols(x.value, w.value, None if b is None else b.value,
                                    stride, padding)

    def vjp(g):
        gx = T.conv2d_backward_input(g, w.value, x.value.shape, stride, padding)
        gw = T.conv2d_backward_weight(g, x.value, w.value.shape, stride, padding, cols)
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Node(y, parents, vjp, "conv2d")


def relu(x: Node) -> Node:
    def vjp(g):
        return (T.relu_backward(g, x.value, T.BackwardRule.BACKPROP),)

    return Node(T.relu_forward(x.value), (x,), vjp, "relu")


def maxpool2d(x: Node, factor: int = 2) -> tuple[Node, np.ndarray]:
    y, idx = T.maxpool2d_forward(x.value, factor)

    def vjp(g):
        return (T.maxpool2d_backward(g, idx, factor),)

    return Node(y, (x,), vjp, "maxpool2d"), idx


def upsample2d(x: Node, factor: int = 2) -> Node:
    def vjp(g):
        return (T.upsample2d_backward(g, factor),)

    return Node(T.upsample2d_forward(x.value, factor), (x,), vjp, "upsample2d")


def concat_channels(a: Node, b: Node) -> Node:
    ca = a.value.shape[1]

    def vjp(g):
        return g[:, :ca], g[:, ca:]

    return Node(np.concatenate([a.value, b.value], axis=1), (a, b), vjp, "concat")


def gap(x: Node) -> Node:
    shape = x.value.shape

    def vjp(g):
        return (T.gap_backward(g, shape),)

    return Node(T.gap_forward(x.value), (x,), vjp, "gap")


def affine(x: Node, w: Node, b: Node | None) -> Node:
    y = T.affine_forward(x.value, w.value, None if b is None else b.value)

    def vjp(g):
        gx, gw, gb = T.affine_backward(g, x.value, w.value)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Node(y, parents, vjp, "affine")


def sigmoid(x: Node) -> Node:
    def vjp(g):
        return (T.sigmoid_backward(g, x.value),)

    return Node(T.sigmoid_forward(x.value), (x,), vjp, "sigmoid")


# ---------------------------------------------------------------------------
# transposed ops (saliency replay). Each is linear in the signal; the
# conv/affine transposes are also linear in the weight.


def conv2d_transpose(g: Node, w: Node, x_shape, stride: int = 1, padding: int = 0) -> Node:
    y = T.conv2d_backward_input(g.value, w.value, x_shape, stride, padding)

    def vjp(u):
        gg = T.conv2d_forward(u, w.value, None, stride, padding)
        gw = T.conv2d_backward_weight(g.value, u, w.value.shape, stride, padding)
        return gg, gw

    return Node(y, (g, w), vjp, "conv2d_transpose")


def affine_transpose(g: Node, w: Node) -> Node:
    """``g @ W``: the input-gradient of an affine layer."""

    def vjp(u):
        return u @ w.value.T, g.value.T @ u

    return Node(g.value @ w.value, (g, w), vjp, "affine_transpose")


def gap_transpose(g: Node, spatial: tuple[int, int]) -> Node:
    n, c = g.value.shape
    shape = (n, c, *spatial)

    def vjp(u):
        return (u.sum(axis=(2, 3)) / (spatial[0] * spatial[1]),)

    return Node(T.gap_backward(g.value, shape), (g,), vjp, "gap_transpose")


def mask(g: Node, keep: np.ndarray) -> Node:
    """Multiply by a constant boolean mask (gradient-stopped)."""
    zero = np.zeros((), dtype=g.value.dtype)

    def vjp(u):
        return (np.where(keep, u, zero),)

    return Node(np.where(keep, g.value, zero), (g,), vjp, "mask")


def unpool(g: Node, switches: np.ndarray, factor: int = 2) -> Node:
    def vjp(u):
        return (T.maxpool2d_gather(u, switches, factor),)

    return Node(T.maxpool2d_backward(g.value, switches, factor), (g,), vjp, "unpool")


# ---------------------------------------------------------------------------
# elementwise / reductions used by losses and map normalization


def add(a: Node, b: Node) -> Node:
    return Node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,), "scale")


def channel_max_abs(x: Node) -> Node:
    """Collapse NCHW to NHW by max over channel absolute values."""
    v = x.value
    idx = np.abs(v).argmax(axis=1)
    picked = np.take_along_axis(v, idx[:, None], axis=1)[:, 0]

    def vjp(u):
        gx = np.zeros_like(v)
        np.put_along_axis(gx, idx[:, None], (u * np.sign(picked))[:, None], axis=1)
        return (gx,)

    return Node(np.abs(picked), (x,), vjp, "channel_max_abs")


def max_normalize(x: Node) -> Node:
    """Per-example rectify-then-divide-by-max over all trailing axes.

    Maps that are identically zero after rectification stay zero and pass
    no gradient.
    """
    v = np.maximum(x.value, 0)
    n = v.shape[0]
    flat = v.reshape(n, -1)
    arg = flat.argmax(axis=1)
    peak = flat[np.arange(n), arg]
    live = peak > 0
    denom = np.where(live, peak, 1).astype(v.dtype)
    out = flat / denom[:, None]
    out[~live] = 0
    pos = (x.value > 0).reshape(n, -1)

    def vjp(u):
        uf = u.reshape(n, -1)
        g = uf / denom[:, None]
        corr = (uf * out).sum(axis=1) / denom
        g[np.arange(n), arg] -= corr
        g[~live] = 0
        g = np.where(pos, g, 0).astype(u.dtype)
        return (g.reshape(x.value.shape),)

    return Node(out.reshape(v.shape), (x,), vjp, "max_normalize")
