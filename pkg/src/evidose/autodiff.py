"""Reverse-mode automatic differentiation over dense numpy grids.

A `Node` wraps an ndarray plus the bookkeeping needed to backpropagate:
parent links and a closure that routes the incoming gradient to each parent.
Volumes follow the rank-4 (channels, depth, height, width) convention;
convolution kernels are rank-5 and biases rank-1, wrapped in the same Node
type. Graphs are built dynamically by the functional ops below and torn down
by garbage collection after `backward`.

Only first-order derivatives are supported. Gradient accumulation never
mutates a stored array in place, so shared gradients may alias safely.
"""

import numpy as np

from . import kernels as K
from . import special


class Node:
    __slots__ = ("data", "grad", "parents", "requires_grad", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        data = np.asarray(data)
        if data.ndim and not data.flags.c_contiguous:
            # ascontiguousarray only when needed: it would promote 0-d to 1-d
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        flag = "param" if self.requires_grad and not self.parents else "node"
        return f"Node({flag}, shape={self.data.shape}, dtype={self.data.dtype})"


def parameter(data):
    return Node(data, requires_grad=True)


def constant(data):
    return Node(data, requires_grad=False)


def _as_node(x, like=None):
    if isinstance(x, Node):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Node(np.asarray(x, dtype=dtype))


def _accumulate(node, g):
    if not node.requires_grad:
        return
    if g.dtype != node.data.dtype:
        g = g.astype(node.data.dtype)
    if g.shape != node.data.shape:
        g = np.broadcast_to(g, node.data.shape)
    node.grad = g if node.grad is None else node.grad + g


def backward(root, seed=None):
    """Backpropagate from `root`, visiting each reachable node exactly once.

    Traversal is pruned at nodes that do not require gradients.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    if seed is None:
        seed = np.ones_like(root.data)
    root.grad = np.asarray(seed, dtype=root.data.dtype)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grad(nodes):
    for n in nodes:
        n.grad = None


# ---------------------------------------------------------------------------
# structural ops

def conv3d(x, w, b, padding="same"):
    """Stride-1 3D convolution with channel mixing and bias.

    `padding` is 'same' (output spatial extent preserved, odd kernels only)
    or 'valid'.
    """
    if x.data.ndim != 4 or w.data.ndim != 5 or b.data.ndim != 1:
        raise ValueError(
            f"conv3d expects rank-4 input, rank-5 kernel, rank-1 bias; got "
            f"{x.data.ndim}/{w.data.ndim}/{b.data.ndim}"
        )
    Cout, Cin, kd, kh, kw = w.data.shape
    if x.data.shape[0] != Cin:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.data.shape[0]} channels, "
            f"kernel expects {Cin}"
        )
    if b.data.shape[0] != Cout:
        raise ValueError(
            f"conv3d bias length {b.data.shape[0]} != {Cout} output channels"
        )
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv3d kernel extents must be odd, got {(kd, kh, kw)}")
    if kd != kh or kh != kw:
        raise ValueError(f"conv3d kernel must be cubic, got {(kd, kh, kw)}")
    if padding == "same":
        pad = (kd - 1) // 2
    elif padding == "valid":
        pad = 0
        if any(s < kd for s in x.data.shape[1:]):
            raise ValueError("conv3d valid padding needs input >= kernel extent")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    y = K.conv3d_forward(x.data, w.data, b.data, pad)
    out = Node(y, parents=(x, w, b))

    def _bk(g):
        gx, gw, gb = K.conv3d_backward(
            x.data, w.data, np.ascontiguousarray(g), pad,
            need_input_grad=x.requires_grad,
        )
        if x.requires_grad:
            _accumulate(x, gx)
        _accumulate(w, gw)
        _accumulate(b, gb)

    out._backward = _bk
    return out


def maxpool3d(x, window=2):
    if x.data.ndim != 4:
        raise ValueError("maxpool3d expects a rank-4 grid")
    spatial = x.data.shape[1:]
    if any(s % window for s in spatial):
        raise ValueError(
            f"maxpool3d window {window} does not divide spatial extents {spatial}"
        )
    y, idx = K.maxpool3d_forward(x.data, window)
    out = Node(y, parents=(x,))

    def _bk(g):
        _accumulate(x, K.maxpool3d_backward(np.ascontiguousarray(g), idx, spatial))

    out._backward = _bk
    return out


def _upsample2(a):
    return a.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample_concat(low, skip):
    """Nearest-neighbor 2x upsample of `low`, concatenated before `skip`."""
    ls, ss = low.data.shape, skip.data.shape
    if low.data.ndim != 4 or skip.data.ndim != 4:
        raise ValueError("upsample_concat expects rank-4 grids")
    if tuple(2 * e for e in ls[1:]) != ss[1:]:
        raise ValueError(
            f"upsample_concat extent mismatch: low {ls[1:]} must be half of "
            f"skip {ss[1:]}"
        )
    cl = ls[0]
    y = np.concatenate([_upsample2(low.data), skip.data], axis=0)
    out = Node(y, parents=(low, skip))

    def _bk(g):
        gl = g[:cl]
        # undo the nearest-neighbor repeat by summing each 2x2x2 block
        C, D, H, W = gl.shape
        gl = gl.reshape(C, D // 2, 2, H // 2, 2, W // 2, 2).sum(axis=(2, 4, 6))
        _accumulate(low, gl)
        _accumulate(skip, g[cl:])

    out._backward = _bk
    return out


def channel_slice(x, start, stop):
    if x.data.ndim != 4:
        raise ValueError("channel_slice expects a rank-4 grid")
    if not (0 <= start < stop <= x.data.shape[0]):
        raise ValueError(
            f"channel_slice [{start}:{stop}] out of range for "
            f"{x.data.shape[0]} channels"
        )
    out = Node(x.data[start:stop], parents=(x,))

    def _bk(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        _accumulate(x, gx)

    out._backward = _bk
    return out


def dropout(x, rate, rng, training):
    """Inverted dropout: zero with probability `rate`, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep * scale
    out = Node(x.data * mask, parents=(x,))

    def _bk(g):
        _accumulate(x, g * mask)

    out._backward = _bk
    return out


def masked_mean(x, mask):
    """Mean of x over voxels where mask is nonzero; float64 accumulation."""
    m = np.asarray(mask)
    if m.shape != x.data.shape:
        raise ValueError(f"mask shape {m.shape} != value shape {x.data.shape}")
    m = (m != 0)
    count = int(m.sum())
    if count == 0:
        raise ValueError("masked_mean over an empty mask")
    val = np.float64(x.data[m].sum(dtype=np.float64) / count)
    out = Node(np.asarray(val), parents=(x,))
    mf = m.astype(x.data.dtype) / count

    def _bk(g):
        _accumulate(x, float(g) * mf)

    out._backward = _bk
    return out


# ---------------------------------------------------------------------------
# elementwise ops

def _unary(x, y, dydx_fn):
    out = Node(y, parents=(x,))

    def _bk(g):
        _accumulate(x, g * dydx_fn())

    out._backward = _bk
    return out


def relu(x):
    y = np.maximum(x.data, 0)
    return _unary(x, y, lambda: (x.data > 0).astype(x.data.dtype))


def sigmoid(x):
    y = special.sigmoid(x.data).astype(x.data.dtype)
    return _unary(x, y, lambda: y * (1 - y))


def softplus(x):
    y = special.softplus(x.data).astype(x.data.dtype)
    return _unary(x, y, lambda: special.sigmoid(x.data).astype(x.data.dtype))


def exp(x):
    y = np.exp(x.data)
    return _unary(x, y, lambda: y)


def log(x):
    if not np.all(x.data > 0):
        bad = float(np.min(x.data))
        raise ValueError(f"log requires strictly positive input, min is {bad}")
    y = np.log(x.data)
    return _unary(x, y, lambda: 1.0 / x.data)


def lgamma(x):
    if not np.all(x.data > 0):
        bad = float(np.min(x.data))
        raise ValueError(f"lgamma requires strictly positive input, min is {bad}")
    y = special.lgamma(x.data).astype(x.data.dtype)
    return _unary(x, y, lambda: special.digamma(x.data).astype(x.data.dtype))


def absval(x):
    y = np.abs(x.data)
    return _unary(x, y, lambda: np.sign(x.data))


def square(x):
    y = np.square(x.data)
    return _unary(x, y, lambda: 2 * x.data)


def _binary_shapes(a, b):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    # scalar operand: collapse the broadcast
    return np.asarray(g.sum(dtype=np.float64)).reshape(shape)


def add(a, b):
    a = _as_node(a, like=b if isinstance(b, Node) else None)
    b = _as_node(b, like=a)
    _binary_shapes(a, b)
    out = Node(a.data + b.data, parents=(a, b))

    def _bk(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(g, b.data.shape))

    out._backward = _bk
    return out


def sub(a, b):
    a = _as_node(a, like=b if isinstance(b, Node) else None)
    b = _as_node(b, like=a)
    _binary_shapes(a, b)
    out = Node(a.data - b.data, parents=(a, b))

    def _bk(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(-g, b.data.shape))

    out._backward = _bk
    return out


def mul(a, b):
    a = _as_node(a, like=b if isinstance(b, Node) else None)
    b = _as_node(b, like=a)
    _binary_shapes(a, b)
    out = Node(a.data * b.data, parents=(a, b))

    def _bk(g):
        _accumulate(a, _reduce_to(g * b.data, a.data.shape))
        _accumulate(b, _reduce_to(g * a.data, b.data.shape))

    out._backward = _bk
    return out
