"""Reverse-mode automatic differentiation over numpy arrays.

A forward pass records :class:`Node` objects. :func:`backward` visits each
node once, in reverse topological order, and returns gradients for the
requested leaves. The tape is first-order only; Hessian-vector products are
obtained from central differences of gradients (:func:`hvp`).
"""

from __future__ import annotations

import logging
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""

    def __init__(self, node: str):
        super().__init__(f"non-finite value produced by node {node!r}")
        self.node = node


class ZeroVectorError(ValueError):
    pass


class Node:
    """One recorded value on the tape.

    ``grad_scale`` multiplies the backward signal arriving at this node
    before it is passed to the parents (1.0 keeps the exact chain rule).
    """

    __slots__ = ("value", "parents", "backward_fn", "op", "grad_scale")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf"):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.grad_scale = 1.0

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def leaf(value, dtype=None) -> Node:
    return Node(np.asarray(value, dtype=dtype))


def _node(op: str, value: np.ndarray, parents, backward_fn) -> Node:
    if not np.isfinite(value).all():
        raise NonFiniteError(op)
    return Node(value, parents, backward_fn, op)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, wrt: Sequence[Node], seed=None) -> list[np.ndarray]:
    """Gradients of ``root`` with respect to each node in ``wrt``.

    Branches that cannot reach any requested node are never differentiated.
    """
    order = _topo_order(root)
    wanted = {id(n) for n in wrt}
    needs: dict[int, bool] = {}
    for node in order:  # parents come before children
        needs[id(node)] = id(node) in wanted or any(needs[id(p)] for p in node.parents)

    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.value) if seed is None else np.asarray(seed)
    }
    found: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_scale != 1.0:
            g = g * node.grad_scale
        if id(node) in wanted:
            found[id(node)] = g
        if node.backward_fn is None:
            continue
        mask = tuple(needs[id(p)] for p in node.parents)
        if not any(mask):
            continue
        for p, pg in zip(node.parents, node.backward_fn(g, mask)):
            if pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return [found[id(n)] if id(n) in found else np.zeros_like(n.value) for n in wrt]


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Node, b: Node, name: str = "add") -> Node:
    sa, sb = a.value.shape, b.value.shape

    def bw(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(g, sb) if need[1] else None)

    return _node(name, a.value + b.value, (a, b), bw)


def scale(x: Node, c: float, name: str = "scale") -> Node:
    c = x.value.dtype.type(c)

    def bw(g, need):
        return (g * c,)

    return _node(name, x.value * c, (x,), bw)


def matmul(x: Node, w: Node, name: str = "matmul") -> Node:
    xv, wv = x.value, w.value

    def bw(g, need):
        return (g @ wv.T if need[0] else None, xv.T @ g if need[1] else None)

    return _node(name, xv @ wv, (x, w), bw)


def linear(x: Node, w: Node, b: Node, name: str = "linear") -> Node:
    xv, wv = x.value, w.value

    def bw(g, need):
        return (g @ wv.T if need[0] else None,
                xv.T @ g if need[1] else None,
                g.sum(axis=0) if need[2] else None)

    return _node(name, xv @ wv + b.value, (x, w, b), bw)


def relu(x: Node, name: str = "relu") -> Node:
    mask = x.value > 0

    def bw(g, need):
        return (g * mask,)

    return _node(name, np.where(mask, x.value, 0).astype(x.value.dtype, copy=False), (x,), bw)


def global_avg_pool(x: Node, name: str = "gap") -> Node:
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    shape = x.value.shape
    area = shape[2] * shape[3]

    def bw(g, need):
        return (np.broadcast_to((g / area)[:, :, None, None], shape).astype(g.dtype),)

    return _node(name, x.value.mean(axis=(2, 3), dtype=np.float64).astype(x.value.dtype), (x,), bw)


def flatten(x: Node, name: str = "flatten") -> Node:
    shape = x.value.shape

    def bw(g, need):
        return (g.reshape(shape),)

    return _node(name, x.value.reshape(shape[0], -1), (x,), bw)


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, k, k)
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    return cols, Ho, Wo


def conv2d(x: Node, w: Node, b: Node | None = None, stride: int = 1, pad: int = 1,
           name: str = "conv2d") -> Node:
    """2-D cross-correlation, NCHW layout, square kernel, zero padding."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    xv, wv = x.value, w.value
    B, C, H, W = xv.shape
    O, Cw, k, _ = wv.shape
    if Cw != C:
        raise ShapeError(f"{name}: input has {C} channels, kernel expects {Cw}")
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    cols, Ho, Wo = _im2col(xp, k, stride)
    wmat = wv.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.value
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g, need):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = gb = None
        if need[0]:
            dcols = (gf @ wmat).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros(xp.shape, dtype=xv.dtype)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        if need[1]:
            gw = (gf.T @ cols).reshape(wv.shape)
        if len(need) > 2 and need[2]:
            gb = gf.sum(axis=0)
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(name, np.ascontiguousarray(out), parents, bw)


def maxpool2x2(x: Node, name: str = "maxpool") -> Node:
    xv = x.value
    B, C, H, W = xv.shape
    if H % 2 or W % 2:
        raise ShapeError(f"{name}: spatial size {H}x{W} is not even")
    blocks = xv.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g, need):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(B, C, H, W),)

    return _node(name, out, (x,), bw)


def batchnorm(x: Node, gamma: Node, beta: Node, running_mean: np.ndarray,
              running_var: np.ndarray, train: bool, eps: float = 1e-5,
              name: str = "batchnorm"):
    """Batch normalization over every axis except the channel axis 1.

    Returns ``(node, (batch_mean, batch_var))``; the batch statistics are
    ``None`` in eval mode. Running statistics are constants for backward.
    """
    xv = x.value
    dt = xv.dtype
    axes = (0,) if xv.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if xv.ndim == 2 else (1, -1, 1, 1)
    if train:
        x64 = xv.astype(np.float64)
        mean64 = x64.mean(axis=axes)
        var64 = ((x64 - mean64.reshape(bshape)) ** 2).mean(axis=axes)
        mean, var = mean64.astype(dt), var64.astype(dt)
        stats = (mean, var)
    else:
        mean, var = running_mean.astype(dt, copy=False), running_var.astype(dt, copy=False)
        stats = None
    inv = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (xv - mean.reshape(bshape)) * inv.reshape(bshape)
    gv = gamma.value.reshape(bshape)
    out = xhat * gv + beta.value.reshape(bshape)
    n = xv.size // xv.shape[1]

    def bw(g, need):
        gx = ggamma = gbeta = None
        if need[1]:
            ggamma = (g * xhat).sum(axis=axes)
        if need[2]:
            gbeta = g.sum(axis=axes)
        if need[0]:
            gxhat = g * gv
            if train:
                s1 = gxhat.sum(axis=axes, dtype=np.float64).astype(dt).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes, dtype=np.float64).astype(dt).reshape(bshape)
                gx = inv.reshape(bshape) * (gxhat - s1 / n - xhat * s2 / n)
            else:
                gx = gxhat * inv.reshape(bshape)
        return (gx, ggamma, gbeta)

    return _node(name, out, (x, gamma, beta), bw), stats


def resize_nearest(x: Node, size: int, name: str = "resize") -> Node:
    """Nearest-neighbour resize of the two trailing axes to ``size`` x ``size``."""
    H, W = x.value.shape[-2:]
    ri = (np.arange(size) * H) // size
    ci = (np.arange(size) * W) // size
    out = x.value[..., ri[:, None], ci[None, :]]

    def bw(g, need):
        gx = np.zeros(x.value.shape, dtype=g.dtype)
        np.add.at(gx, (Ellipsis, ri[:, None], ci[None, :]), g)
        return (gx,)

    return _node(name, out, (x,), bw)


def pad_to(x: Node, top: int, left: int, size: int, name: str = "pad") -> Node:
    """Place ``x`` inside a zero canvas of ``size`` x ``size`` at (top, left)."""
    h, w = x.value.shape[-2:]
    out = np.zeros(x.value.shape[:-2] + (size, size), dtype=x.value.dtype)
    out[..., top:top + h, left:left + w] = x.value

    def bw(g, need):
        return (g[..., top:top + h, left:left + w],)

    return _node(name, out, (x,), bw)


def softmax_cross_entropy(logits: Node, labels: np.ndarray, name: str = "xent") -> Node:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    z = logits.value
    B = z.shape[0]
    z64 = z.astype(np.float64)
    z64 = z64 - z64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z64).sum(axis=1))
    logp = z64 - lse[:, None]
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    probs = np.exp(logp)
    dt = z.dtype

    def bw(g, need):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return ((d * (float(g) / B)).astype(dt),)

    return _node(name, np.asarray(loss, dtype=dt), (logits,), bw)


# ---------------------------------------------------------------------------
# graph-level entry points (duck-typed on ``graph.forward``)


def _leaves(params: Mapping[str, np.ndarray], names: Sequence[str]) -> dict[str, Node]:
    return {k: Node(params[k]) for k in names}


class FwdBwd(NamedTuple):
    loss: float
    grads: dict
    bn_stats: dict
    logits: np.ndarray


def forward_backward(graph, params, inputs, labels, mode: str = "train", **fw) -> FwdBwd:
    """Mean cross-entropy and its gradient w.r.t. every trainable parameter.

    ``bn_stats`` maps batch-norm layer names to the batch statistics seen in
    train mode; the caller decides whether to fold them into running stats.
    """
    graph.check_batch(inputs, labels)
    names = graph.trainable_names(params)
    nodes = _leaves(params, names)
    x = Node(np.asarray(inputs, dtype=graph.dtype_of(params)))
    logits, bn_stats = graph.forward(params, x, mode=mode, nodes=nodes, **fw)
    loss = softmax_cross_entropy(logits, np.asarray(labels))
    gs = backward(loss, [nodes[k] for k in names])
    return FwdBwd(float(loss.value), dict(zip(names, gs)), bn_stats, logits.value)


def grad_wrt_input(graph, params, inputs, labels, mode: str = "eval", **fw) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. ``inputs``; params untouched."""
    loss, g = loss_and_input_grad(graph, params, inputs, labels, mode=mode, **fw)
    return g


def loss_and_input_grad(graph, params, inputs, labels, mode: str = "eval", **fw):
    graph.check_batch(inputs, labels)
    x = Node(np.asarray(inputs, dtype=graph.dtype_of(params)))
    logits, _ = graph.forward(params, x, mode=mode, **fw)
    loss = softmax_cross_entropy(logits, np.asarray(labels))
    (g,) = backward(loss, [x])
    return float(loss.value), g


# ---------------------------------------------------------------------------
# flat-vector helpers and Hessian-vector products


def flat(tensors: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in tensors.values()])


def unflat(vec: np.ndarray, like: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for k, v in like.items():
        n = v.size
        out[k] = vec[i:i + n].reshape(v.shape).astype(v.dtype, copy=False)
        i += n
    return out


def norm(tensors: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.dot(np.ravel(v).astype(np.float64),
                                          np.ravel(v).astype(np.float64)))
                             for v in tensors.values())))


def default_delta(dtype) -> float:
    """Relative HVP probe step: 1e-3 at 32-bit, 1e-5 at 64-bit (about cbrt of eps)."""
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-3


def hvp(loss_at: Callable, params: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray],
        delta: float | None = None) -> dict[str, np.ndarray]:
    """Hessian-vector product by central differences of gradients.

    ``loss_at(p)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params``. The probe step is ``h = delta * (1 + ||w||)`` along the unit
    vector ``v / ||v||``; truncation error is O(h^2). ``delta=None`` picks
    :func:`default_delta` for the parameter dtype.
    """
    if delta is None:
        delta = default_delta(next(iter(params.values())).dtype)
    vnorm = norm(v)
    if vnorm == 0.0:
        raise ZeroVectorError("hvp direction has zero norm")
    h = delta * (1.0 + norm(params))
    plus, minus = {}, {}
    for k, w in params.items():
        step = (np.asarray(v[k], dtype=np.float64) * (h / vnorm)).astype(w.dtype)
        plus[k] = w + step
        minus[k] = w - step
    _, gp = loss_at(plus)
    _, gm = loss_at(minus)
    c = vnorm / (2.0 * h)
    return {k: ((gp[k].astype(np.float64) - gm[k].astype(np.float64)) * c).astype(params[k].dtype)
            for k in params}
