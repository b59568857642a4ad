"""Small reverse-mode differentiation engine for convolutional graphs.

Operations evaluate eagerly and record a backward closure on the node they
return.  :func:`backward` walks the graph once in reverse topological order
and accumulates gradients into ``Node.grad``.

Values are batched ``(N, C, H, W)`` arrays, except parameters, which keep
their natural shape.  ReLU uses a zero subgradient at zero.
"""

import numpy as np

from . import tensor


class GraphError(RuntimeError):
    pass


class Node:
    __slots__ = ("op", "inputs", "value", "grad", "name", "requires_grad", "_backward")

    def __init__(self, op, value, inputs=(), name=None, requires_grad=None, backward=None):
        self.op = op
        self.value = value
        self.inputs = tuple(inputs)
        self.name = name
        if requires_grad is None:
            requires_grad = any(n.requires_grad for n in self.inputs)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = backward

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}{label} shape={np.shape(self.value)}>"

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


def constant(value, name=None):
    return Node("input", np.asarray(value), name=name, requires_grad=False)


def param(value, name=None):
    return Node("input", np.asarray(value), name=name, requires_grad=True)


def conv(x, k, stride=1, pads=None, groups=1):
    """Cross-correlation of ``x`` with kernel node ``k``, reflect-padding first if ``pads``."""
    xv = x.value
    xp = tensor.pad_reflect(xv, pads=pads) if pads else xv
    out = tensor.conv2d_valid(xp, k.value, stride, groups=groups)

    def backward(g):
        if x.requires_grad:
            gx = tensor.conv2d_transposed(g, k.value, stride, xp.shape[-2:], groups=groups)
            x.accumulate(tensor.reflect_pad_adjoint(gx, pads) if pads else gx)
        if k.requires_grad:
            k.accumulate(tensor.conv2d_kernel_grad(xp, g, k.value.shape[2], stride, groups=groups))

    return Node("conv", out, (x, k), backward=backward)


def conv_transposed(y, k, stride, out_shape, groups=1):
    out = tensor.conv2d_transposed(y.value, k.value, stride, out_shape, groups=groups)

    def backward(g):
        if y.requires_grad:
            y.accumulate(tensor.conv2d_valid(g, k.value, stride, groups=groups))
        if k.requires_grad:
            # <convT(y, K), g> = <y, conv(g, K)>, so the kernel sees (g, y) swapped
            k.accumulate(tensor.conv2d_kernel_grad(g, y.value, k.value.shape[2], stride, groups=groups))

    return Node("conv_transposed", out, (y, k), backward=backward)


def relu(x):
    mask = x.value > 0
    out = np.where(mask, x.value, 0).astype(x.value.dtype)

    def backward(g):
        x.accumulate(g * mask)

    return Node("relu", out, (x,), backward=backward)


def add(*nodes):
    out = nodes[0].value.copy()
    for n in nodes[1:]:
        out += n.value

    def backward(g):
        for n in nodes:
            n.accumulate(g)

    return Node("add", out, nodes, backward=backward)


def scale(x, s, index=None):
    """Multiply ``x`` by a scalar held in node ``s`` (at ``index`` if given)."""
    idx = () if index is None else index
    factor = s.value[idx] if s.value.ndim else s.value

    def backward(g):
        x.accumulate(g * factor)
        if s.requires_grad:
            gs = np.zeros_like(s.value)
            gs[idx] = np.sum(g * x.value)
            s.accumulate(gs)

    return Node("scale", x.value * factor, (x, s), backward=backward)


def bias(x, b):
    """Add a per-channel bias vector ``b`` of shape ``(C,)``."""
    out = x.value + b.value[None, :, None, None]

    def backward(g):
        x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return Node("bias", out, (x, b), backward=backward)


def zero_fill(y, shape, stride, offset=0):
    """Scatter measurement maps onto an image-sized grid, zeros elsewhere.

    Entry ``(i, j)`` of each map lands at pixel ``(offset + i*stride, offset + j*stride)``.
    """
    N, C, gh, gw = y.value.shape
    rows = slice(offset, offset + stride * (gh - 1) + 1, stride)
    cols = slice(offset, offset + stride * (gw - 1) + 1, stride)
    out = np.zeros((N, C, *shape), dtype=y.value.dtype)
    out[:, :, rows, cols] = y.value

    def backward(g):
        y.accumulate(g[:, :, rows, cols])

    return Node("zero_fill", out, (y,), backward=backward)


def topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root, grad):
    """Back-propagate ``grad`` (d loss / d root.value) through the graph of ``root``."""
    if root.value is None:
        raise GraphError("backward called before forward")
    grad = np.asarray(grad)
    if grad.shape != root.value.shape:
        raise GraphError(f"gradient shape {grad.shape} does not match output {root.value.shape}")
    order = topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.array(grad, dtype=root.value.dtype, copy=True)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None and node.requires_grad:
            node._backward(node.grad)
