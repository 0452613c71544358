"""Reverse-mode automatic differentiation over numpy float64 arrays.

Every backward rule builds Node expressions rather than raw arrays, so the
result of grad() is itself differentiable. That closure under differentiation
is what makes second and third derivatives of class scores (and training
losses that contain gradient terms) come out of the same machinery.

Values are computed eagerly; the graph records how to differentiate, not how
to recompute.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K


class Node:
    """One value in the computation graph.

    parents is a tuple of (input_node, vjp) pairs; each vjp maps the cotangent
    of this node to the cotangent contribution of that input, as a Node.
    """

    __slots__ = ("value", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_node(other))

    def __radd__(self, other):
        return add(as_node(other), self)

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __rsub__(self, other):
        return sub(as_node(other), self)

    def __mul__(self, other):
        return mul(self, as_node(other))

    def __rmul__(self, other):
        return mul(as_node(other), self)

    def __truediv__(self, other):
        return div(self, as_node(other))

    def __rtruediv__(self, other):
        return div(as_node(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, as_node(other))


def as_node(x):
    """Wrap arrays and scalars as constant Nodes; pass Nodes through."""
    if isinstance(x, Node):
        return x
    return Node(x)


def constant(x):
    return Node(x)


def leaf(x):
    """A differentiation root: parameters and inputs."""
    return Node(x, requires_grad=True)


def detach(x):
    """Cut the graph: same value, no gradient flows through."""
    return Node(x.value)


# ---------------------------------------------------------------------------
# broadcasting arithmetic


def _unbroadcast(g, shape):
    """Reduce a gradient Node back to `shape` after numpy broadcasting."""
    while g.value.ndim > len(shape):
        g = sum(g, axis=0)
    axes = tuple(
        i for i, (gs, ts) in enumerate(zip(g.value.shape, shape)) if ts == 1 and gs != 1
    )
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    val = a.value + b.value
    parents = []
    if a.requires_grad:
        parents.append((a, lambda g: _unbroadcast(g, a.value.shape)))
    if b.requires_grad:
        parents.append((b, lambda g: _unbroadcast(g, b.value.shape)))
    return Node(val, parents)


def sub(a, b):
    val = a.value - b.value
    parents = []
    if a.requires_grad:
        parents.append((a, lambda g: _unbroadcast(g, a.value.shape)))
    if b.requires_grad:
        parents.append((b, lambda g: _unbroadcast(neg(g), b.value.shape)))
    return Node(val, parents)


def mul(a, b):
    val = a.value * b.value
    parents = []
    if a.requires_grad:
        parents.append((a, lambda g: _unbroadcast(mul(g, b), a.value.shape)))
    if b.requires_grad:
        parents.append((b, lambda g: _unbroadcast(mul(g, a), b.value.shape)))
    return Node(val, parents)


def div(a, b):
    val = a.value / b.value
    parents = []
    if a.requires_grad:
        parents.append((a, lambda g: _unbroadcast(div(g, b), a.value.shape)))
    if b.requires_grad:
        parents.append((b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.value.shape)))
    return Node(val, parents)


def neg(x):
    if not x.requires_grad:
        return Node(-x.value)
    return Node(-x.value, [(x, lambda g: neg(g))])


def power(x, p):
    """x**p for a constant exponent p."""
    p = float(p)
    val = x.value**p
    if not x.requires_grad:
        return Node(val)
    if p == 0.0:
        return Node(val, [(x, lambda g: mul(g, Node(np.zeros_like(x.value))))])
    return Node(val, [(x, lambda g: mul(g, mul(Node(p), power(x, p - 1.0))))])


def exp(x):
    val = np.exp(x.value)
    if not x.requires_grad:
        return Node(val)
    out = Node(val, [])
    out.parents = ((x, lambda g: mul(g, out)),)
    out.requires_grad = True
    return out


def log(x):
    val = np.log(x.value)
    if not x.requires_grad:
        return Node(val)
    return Node(val, [(x, lambda g: div(g, x))])


def relu(x):
    val = np.maximum(x.value, 0.0)
    if not x.requires_grad:
        return Node(val)
    mask = Node((x.value > 0.0).astype(np.float64))
    return Node(val, [(x, lambda g: mul(g, mask))])


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x, shape):
    val = x.value.reshape(shape)
    if not x.requires_grad:
        return Node(val)
    orig = x.value.shape
    return Node(val, [(x, lambda g: reshape(g, orig))])


def transpose(x):
    val = x.value.T
    if not x.requires_grad:
        return Node(val)
    return Node(val, [(x, lambda g: transpose(g))])


def broadcast_to(x, shape):
    val = np.broadcast_to(x.value, shape).copy()
    if not x.requires_grad:
        return Node(val)
    orig = x.value.shape
    return Node(val, [(x, lambda g: _unbroadcast(g, orig))])


def sum(x, axis=None, keepdims=False):
    val = x.value.sum(axis=axis, keepdims=keepdims)
    if not x.requires_grad:
        return Node(val)
    in_shape = x.value.shape

    def vjp(g):
        if axis is None:
            return broadcast_to(reshape(g, (1,) * len(in_shape)), in_shape)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(in_shape) for a in axes)
        gk = g
        if not keepdims:
            kshape = tuple(1 if i in axes else in_shape[i] for i in range(len(in_shape)))
            gk = reshape(g, kshape)
        return broadcast_to(gk, in_shape)

    return Node(val, [(x, vjp)])


def mean(x, axis=None, keepdims=False):
    n = x.value.size if axis is None else np.prod(
        [x.value.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum(x, axis=axis, keepdims=keepdims), Node(1.0 / float(n)))


def matmul(a, b):
    val = a.value @ b.value
    parents = []
    if a.requires_grad:
        parents.append((a, lambda g: matmul(g, transpose(b))))
    if b.requires_grad:
        parents.append((b, lambda g: matmul(transpose(a), g)))
    return Node(val, parents)


def take_flat(x, idx):
    """Gather x.ravel()[idx] as a 1-D node; idx is a constant index array."""
    idx = np.asarray(idx, dtype=np.int64)
    val = x.value.ravel()[idx]
    if not x.requires_grad:
        return Node(val)
    shape = x.value.shape
    size = x.value.size
    return Node(val, [(x, lambda g: reshape(put_flat(size, idx, g), shape))])


def put_flat(size, idx, values):
    """Scatter-add a 1-D values node into zeros(size) at flat positions idx."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros(size)
    np.add.at(out, idx, values.value)
    if not values.requires_grad:
        return Node(out)
    return Node(out, [(values, lambda g: take_flat(g, idx))])


def take_per_row(x, cols):
    """x[i, cols[i]] for a 2-D node, as a 1-D node."""
    n, c = x.value.shape
    flat = np.arange(n, dtype=np.int64) * c + np.asarray(cols, dtype=np.int64)
    return take_flat(x, flat)


def max_all(x):
    """Maximum over all elements; gradient flows to the first argmax."""
    pos = int(np.argmax(x.value))
    val = np.asarray(x.value.ravel()[pos])
    if not x.requires_grad:
        return Node(val)
    shape = x.value.shape
    size = x.value.size

    def vjp(g):
        return reshape(put_flat(size, np.array([pos]), reshape(g, (1,))), shape)

    return Node(val, [(x, vjp)])


def min_all(x):
    return neg(max_all(neg(x)))


# ---------------------------------------------------------------------------
# convolution: three ops tied by the adjoint identities
#   <gy, conv(x, w)> = <data_adjoint(w, gy), x> = <weight_adjoint(x, gy), w>


def conv2d(x, w, stride=1, pad=0):
    val = K.conv2d_forward(x.value, w.value, stride, pad)
    parents = []
    if x.requires_grad:
        in_hw = x.value.shape[2:]
        parents.append((x, lambda g: conv2d_data_adjoint(w, g, in_hw, stride, pad)))
    if w.requires_grad:
        k_hw = w.value.shape[2:]
        parents.append((w, lambda g: conv2d_weight_adjoint(x, g, k_hw, stride, pad)))
    return Node(val, parents)


def conv2d_data_adjoint(w, gy, input_hw, stride=1, pad=0):
    val = K.conv2d_backward_data(w.value, gy.value, input_hw, stride, pad)
    parents = []
    if w.requires_grad:
        k_hw = w.value.shape[2:]
        parents.append((w, lambda u: conv2d_weight_adjoint(u, gy, k_hw, stride, pad)))
    if gy.requires_grad:
        parents.append((gy, lambda u: conv2d(u, w, stride, pad)))
    return Node(val, parents)


def conv2d_weight_adjoint(x, gy, kernel_hw, stride=1, pad=0):
    val = K.conv2d_backward_weight(x.value, gy.value, kernel_hw, stride, pad)
    parents = []
    if x.requires_grad:
        in_hw = x.value.shape[2:]
        parents.append((x, lambda u: conv2d_data_adjoint(u, gy, in_hw, stride, pad)))
    if gy.requires_grad:
        parents.append((gy, lambda u: conv2d(x, u, stride, pad)))
    return Node(val, parents)


# ---------------------------------------------------------------------------
# max pooling: scatter and gather against frozen argmax positions


def maxpool2d(x, k, stride):
    val, idx = K.maxpool2d_forward(x.value, k, stride)
    if not x.requires_grad:
        return Node(val)
    in_hw = x.value.shape[2:]
    return Node(val, [(x, lambda g: maxpool2d_scatter(g, idx, in_hw))])


def maxpool2d_scatter(g, idx, input_hw):
    val = K.maxpool2d_backward(g.value, idx, input_hw)
    if not g.requires_grad:
        return Node(val)
    return Node(val, [(g, lambda u: maxpool2d_gather(u, idx))])


def maxpool2d_gather(u, idx):
    val = K.maxpool2d_gather(u.value, idx)
    if not u.requires_grad:
        return Node(val)
    in_hw = u.value.shape[2:]
    return Node(val, [(u, lambda g: maxpool2d_scatter(g, idx, in_hw))])


# ---------------------------------------------------------------------------
# bilinear resize: linear operator and its transpose


def _axis_weights(n_in, n_out):
    """Corner-aligned source positions for resizing a length-n_in axis."""
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _resize_value(v, out_hw):
    r0, r1, fr = _axis_weights(v.shape[0], out_hw[0])
    c0, c1, fc = _axis_weights(v.shape[1], out_hw[1])
    wr0, wr1 = (1.0 - fr)[:, None], fr[:, None]
    wc0, wc1 = (1.0 - fc)[None, :], fc[None, :]
    return (
        wr0 * wc0 * v[np.ix_(r0, c0)]
        + wr0 * wc1 * v[np.ix_(r0, c1)]
        + wr1 * wc0 * v[np.ix_(r1, c0)]
        + wr1 * wc1 * v[np.ix_(r1, c1)]
    )


def _resize_adjoint_value(u, in_hw):
    r0, r1, fr = _axis_weights(in_hw[0], u.shape[0])
    c0, c1, fc = _axis_weights(in_hw[1], u.shape[1])
    wr0, wr1 = (1.0 - fr)[:, None], fr[:, None]
    wc0, wc1 = (1.0 - fc)[None, :], fc[None, :]
    out = np.zeros(in_hw)
    np.add.at(out, (r0[:, None], c0[None, :]), wr0 * wc0 * u)
    np.add.at(out, (r0[:, None], c1[None, :]), wr0 * wc1 * u)
    np.add.at(out, (r1[:, None], c0[None, :]), wr1 * wc0 * u)
    np.add.at(out, (r1[:, None], c1[None, :]), wr1 * wc1 * u)
    return out


def resize_bilinear(x, out_hw):
    """Resize a 2-D node with corner-aligned bilinear interpolation."""
    val = _resize_value(x.value, tuple(out_hw))
    if not x.requires_grad:
        return Node(val)
    in_hw = x.value.shape
    return Node(val, [(x, lambda g: resize_bilinear_adjoint(g, in_hw))])


def resize_bilinear_adjoint(u, in_hw):
    val = _resize_adjoint_value(u.value, tuple(in_hw))
    if not u.requires_grad:
        return Node(val)
    out_hw = u.value.shape
    return Node(val, [(u, lambda g: resize_bilinear(g, out_hw))])


# ---------------------------------------------------------------------------
# softmax composites (stable via a constant shift; the shift cancels exactly)


def log_softmax(x, axis=-1):
    m = Node(np.max(x.value, axis=axis, keepdims=True))
    z = sub(x, m)
    lse = log(sum(exp(z), axis=axis, keepdims=True))
    return sub(z, lse)


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis=axis))


# ---------------------------------------------------------------------------
# reverse-mode driver


def _topo(root):
    """Post-order over the requires_grad subgraph: inputs before outputs."""
    order = []
    seen = set()
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
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output, wrt, seed=None):
    """Gradients of output with respect to each node in wrt, as Nodes.

    seed is the cotangent of output (defaults to ones). The returned Nodes are
    differentiable, so grad() can be applied to expressions built from them.
    """
    if not output.requires_grad:
        raise ValueError("output does not depend on any differentiation root")
    if seed is None:
        seed = Node(np.ones_like(output.value))
    elif seed.value.shape != output.value.shape:
        raise ValueError(
            f"seed shape {seed.value.shape} does not match output shape {output.value.shape}"
        )
    grads = {id(output): seed}
    order = _topo(output)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Node(np.zeros_like(w.value)))
    return out
