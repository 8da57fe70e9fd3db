"""Reverse-mode autodiff on top of numpy float64 arrays.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. Node ids come from a global monotone counter, so
sorting the reachable nodes by id yields a valid topological order; that sorted
list is the tape.
"""

import itertools
import math

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericError, ParameterError

_node_ids = itertools.count()


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_node_ids)
        self._parents = _parents
        # which parents wanted gradients when this node was built
        self._live = tuple(p.requires_grad for p in _parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_item():
    raise ContractError("item() needs a single-element tensor")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")


def _node(data, parents, backward_fn, op):
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# tape and backward

class Tape:
    """Topologically ordered records of every node that leads to ``loss``."""

    def __init__(self, loss):
        seen = {}
        stack = [loss]
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            seen[node.node_id] = node
            stack.extend(p for p, live in zip(node._parents, node._live) if live)
        self.records = sorted(seen.values(), key=lambda n: n.node_id)
        self.loss = loss

    def __len__(self):
        return len(self.records)

    def run(self):
        """Propagate d(loss)/d(node) backwards; returns {node_id: grad} for leaves."""
        loss = self.loss
        grads = {loss.node_id: np.ones_like(loss.data)}
        leaf_grads = {}
        for node in reversed(self.records):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                leaf_grads[node.node_id] = g
                continue
            parent_grads = node._backward(g)
            for parent, live, pg in zip(node._parents, node._live, parent_grads):
                if pg is None or not live:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
        return leaf_grads


def backward(loss):
    """Accumulate gradients of a scalar ``loss`` into ``.grad`` of every leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    leaf_grads = tape.run()
    for node in tape.records:
        if node._backward is None and node.requires_grad:
            g = leaf_grads.get(node.node_id)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
    return tape


def grad(loss, wrt):
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt`` (zeros if unused)."""
    if loss.data.size != 1:
        raise ContractError(f"grad needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in wrt]
    leaf_grads = Tape(loss).run()
    return [leaf_grads.get(t.node_id, np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    return _node(a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1.0),), "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def l2_norm(a):
    """Euclidean norm of all entries; the subgradient at the origin is zero."""
    a = as_tensor(a)
    n = float(np.sqrt(np.sum(a.data * a.data)))

    def bw(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _node(np.array(n), (a,), bw, "l2_norm")


# ---------------------------------------------------------------------------
# reductions and shape

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), bw, "getitem")


def take(a, indices, axis):
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(a.data, indices, axis=axis), (a,), bw, "take")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), bw, "stack")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), bw, "concat")


def pad2d(a, pad, mode="zero"):
    """Pad the last two axes by ``pad`` on every side (mode 'zero' or 'edge')."""
    a = as_tensor(a)
    if pad == 0:
        return a
    if mode == "edge":
        h, w = a.shape[-2:]
        rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
        cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
        return take(take(a, rows, a.ndim - 2), cols, a.ndim - 1)
    if mode != "zero":
        raise ParameterError(f"unknown pad mode {mode!r}")
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[..., pad:-pad, pad:-pad],), "pad")


# ---------------------------------------------------------------------------
# linear algebra / nn

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2:
        raise DimensionError("matmul supports 1-D and 2-D operands only")

    def bw(g):
        A, B = a.data, b.data
        ga = gb = None
        if a.requires_grad:
            if B.ndim == 1:
                ga = np.multiply.outer(g, B) if A.ndim == 2 else g * B
            else:
                ga = g @ B.T
        if b.requires_grad:
            if A.ndim == 1:
                gb = np.multiply.outer(A, g) if B.ndim == 2 else g * A
            else:
                gb = A.T @ g if B.ndim == 2 else g @ A
        return ga, gb

    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _node(out, (a, b), bw, "matmul")


def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """Cross-correlation of a (C_in,H,W) or (N,C_in,H,W) input with (C_out,C_in,k,k)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    single = x.ndim == 3
    X = x.data[None] if single else x.data
    W = kernel.data
    if X.ndim != 4 or W.ndim != 4:
        raise DimensionError(f"conv2d expects 3-D/4-D input and 4-D kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = X.shape
    c_out, kc, kh, kw = W.shape
    if kc != c_in or kh != kw:
        raise DimensionError(f"kernel {kernel.shape} incompatible with input channels {c_in}")
    k, s, p = kh, int(stride), int(padding)
    if k > h + 2 * p or k > w + 2 * p:
        raise DimensionError(f"kernel size {k} exceeds padded input {h + 2 * p}x{w + 2 * p}")
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    Xp = np.pad(X, ((0, 0), (0, 0), (p, p), (p, p))) if p else X
    cols = np.lib.stride_tricks.sliding_window_view(Xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(cols, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    if single:
        out = out[0]

    def bw(g):
        G = g[None] if single else g
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(Xp)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(G, W[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            if single:
                gx = gx[0]
        if kernel.requires_grad:
            gk = np.tensordot(G, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = G.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return _node(out, tuple(parents), bw, "conv2d")


def max_pool2d(x, k=2):
    """Non-overlapping k x k max pooling over the last two axes (trailing rows/cols dropped).

    Tied maxima share the incoming gradient equally.
    """
    x = as_tensor(x)
    *lead, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x.data[..., :ho * k, :wo * k].reshape(*lead, ho, k, wo, k)
    out = blocks.max(axis=(-3, -1))

    def bw(g):
        hit = blocks == out[..., :, None, :, None]
        share = hit / hit.sum(axis=(-3, -1), keepdims=True)
        full = np.zeros_like(x.data)
        full[..., :ho * k, :wo * k] = (share * g[..., :, None, :, None]).reshape(*lead, ho * k, wo * k)
        return (full,)

    return _node(out, (x,), bw, "max_pool2d")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _node(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (N, classes) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    lp = log_softmax(logits, axis=1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return -mean(picked)


def normalize(x, axis=-1):
    """Scale to unit L2 norm along ``axis``."""
    x = as_tensor(x)
    norms = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return x / sqrt(tsum(x * x, axis=axis, keepdims=True))


def cosine_similarity(a, b, axis=-1):
    """Cosine similarity along ``axis``; a scalar tensor for 1-D inputs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise DimensionError(f"length mismatch {a.shape} vs {b.shape}")
    return tsum(normalize(a, axis) * normalize(b, axis), axis=axis)


# ---------------------------------------------------------------------------
# image losses

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _pixel_gradient_norm(dd, dr, eps):
    # exact sqrt and exact derivative; eps only stands in for a zero norm,
    # where the numerator is zero too, giving the 0 subgradient
    dd, dr = as_tensor(dd), as_tensor(dr)
    out = np.sqrt(dd.data ** 2 + dr.data ** 2)
    denom = np.where(out > 0, out, np.sqrt(eps))
    return _node(out, (dd, dr), lambda g: (g * dd.data / denom, g * dr.data / denom), "grad_norm")


def tv_loss(p, eps=1e-8, mask=None):
    """Total variation: sum over pixels of sqrt(d_down^2 + d_right^2).

    Differences to neighbours past the last row/column count as zero. With
    ``mask`` (H x W, binary) only pairs whose both pixels lie in the mask count.
    """
    p = as_tensor(p)
    if p.ndim < 2 or p.shape[-1] < 1 or p.shape[-2] < 1:
        raise DimensionError(f"tv_loss needs (..., H, W), got {p.shape}")
    h, w = p.shape[-2:]
    zero_row = Tensor(np.zeros(p.shape[:-2] + (1, w)))
    zero_col = Tensor(np.zeros(p.shape[:-2] + (h, 1)))
    dd = concat([p[..., 1:, :] - p[..., :-1, :], zero_row], axis=-2)
    dr = concat([p[..., :, 1:] - p[..., :, :-1], zero_col], axis=-1)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        md = np.zeros_like(m)
        md[:-1] = m[:-1] * m[1:]
        mr = np.zeros_like(m)
        mr[:, :-1] = m[:, :-1] * m[:, 1:]
        dd, dr = dd * md, dr * mr
    return tsum(_pixel_gradient_norm(dd, dr, eps))


def laplacian_response(x):
    """4-neighbour Laplacian of every channel, zero padded; same shape as x."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 3 or x.shape[-1] < 3:
        raise DimensionError(f"laplacian needs at least 3x3 spatial extent, got {x.shape}")
    h, w = x.shape[-2:]
    flat = reshape(x, (-1, 1, h, w))
    resp = conv2d(flat, LAPLACIAN_KERNEL[None, None], padding=1)
    return reshape(resp, x.shape)


def laplacian_energy(x):
    """L2 norm of the Laplacian response over all channels and pixels."""
    return l2_norm(laplacian_response(x))


# ---------------------------------------------------------------------------
# non-differentiable utilities

def median_blur(x, k=3):
    """k x k median filter with edge-replicated borders over the last two axes."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"median_blur needs an odd kernel size, got {k}")
    r = k // 2
    widths = [(0, 0)] * (arr.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(arr, widths, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(-2, -1))
    out = np.median(windows.reshape(windows.shape[:-2] + (k * k,)), axis=-1)
    return Tensor(out) if isinstance(x, Tensor) else out


def quantile(values, q):
    """Order statistic: the ceil(q*N)-th smallest value (q=0 gives the minimum)."""
    arr = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    flat = np.sort(arr.reshape(-1), kind="stable")
    if flat.size == 0:
        raise ParameterError("quantile of an empty input")
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"quantile level must be in [0, 1], got {q}")
    rank = max(math.ceil(q * flat.size - 1e-9), 1)
    return float(flat[rank - 1])
