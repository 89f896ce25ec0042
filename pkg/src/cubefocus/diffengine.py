"""Dense float64 tensors with reverse-mode differentiation.

A deliberately small op set: enough for the two conv encoders, the policy
and classifier heads, and the differentiable cropping paths. Values are
numpy float64 arrays. Every op validates its output for NaN/Inf so a bad
value is caught at the op that produced it, not three modules later.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

Array = np.ndarray

TENSOR_MAGIC = b"ATSR"


def as_tensor(data) -> Array:
    """Coerce to a C-contiguous float64 array and reject non-finite values."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("tensor contains NaN or Inf")
    return arr


class Node:
    """A value in the computation graph.

    ``parents`` pairs each upstream node with the vector-Jacobian product
    mapping this node's output gradient to that parent's gradient. Nodes
    without gradient-requiring ancestors are pruned from backward passes.
    """

    __slots__ = ("value", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=None):
        self.value = as_tensor(value)
        self.parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, lift(other))

    def __radd__(self, other):
        return add(lift(other), self)

    def __sub__(self, other):
        return sub(self, lift(other))

    def __rsub__(self, other):
        return sub(lift(other), self)

    def __mul__(self, other):
        return mul(self, lift(other))

    def __rmul__(self, other):
        return mul(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(value) -> Node:
    """Leaf node that receives gradients."""
    return Node(value, requires_grad=True)


def constant(value) -> Node:
    """Leaf node excluded from backward passes."""
    return Node(value, requires_grad=False)


def lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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


def backward(root: Node) -> dict[Node, Array]:
    """Reverse-mode gradients of a scalar root.

    Returns a dict mapping every gradient-requiring node reachable from
    ``root`` to dRoot/dNode, each with the node's own shape. Each node's
    gradient is accumulated exactly once before being propagated.
    """
    if root.value.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _toposort(root)
    grads: dict[Node, Array] = {root: np.ones(())}
    for node in reversed(order):
        g = grads[node]
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            acc = grads.get(parent)
            grads[parent] = pg if acc is None else acc + pg
    return grads


def grad_of(grads: dict[Node, Array], node: Node) -> Array:
    """Gradient of ``node`` from a backward result, zeros if unreached."""
    g = grads.get(node)
    return np.zeros(node.shape) if g is None else g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- basic ops


def add(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    return Node(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ),
    )


def sub(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    return Node(
        a.value - b.value,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ),
    )


def mul(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    return Node(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ),
    )


def neg(a: Node) -> Node:
    return Node(-a.value, ((a, lambda g: -g),))


def sum_all(a: Node) -> Node:
    """Sum of all elements, as a scalar node."""
    return Node(a.value.sum(), ((a, lambda g: np.full(a.shape, float(g))),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), ((a, lambda g: g * mask),))


def sigmoid(a: Node) -> Node:
    x = a.value
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Node(s, ((a, lambda g: g * s * (1.0 - s)),))


def maximum(a: Node, b: Node) -> Node:
    """Elementwise max; gradient routes to the larger input (ties to the first)."""
    if a.shape != b.shape:
        raise ValueError(f"maximum: shapes {a.shape} and {b.shape} differ")
    mask = a.value >= b.value
    return Node(
        np.where(mask, a.value, b.value),
        ((a, lambda g: g * mask), (b, lambda g: g * ~mask)),
    )


def take(a: Node, indices) -> Node:
    """Gather elements of a 1-D node by index."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.value.ndim != 1:
        raise ValueError(f"take expects a 1-D node, got shape {a.shape}")

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return out

    return Node(a.value[idx], ((a, vjp),))


def concat(parts: Sequence[Node]) -> Node:
    """Concatenate 1-D nodes."""
    parts = [lift(p) for p in parts]
    for p in parts:
        if p.value.ndim != 1:
            raise ValueError(f"concat expects 1-D nodes, got shape {p.shape}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        return lambda g: g[offsets[i] : offsets[i + 1]]

    return Node(
        np.concatenate([p.value for p in parts]),
        tuple((p, make_vjp(i)) for i, p in enumerate(parts)),
    )


def global_average_pool(a: Node) -> Node:
    """Mean over the three leading axes of an (X, Y, Z, C) node."""
    if a.value.ndim != 4:
        raise ValueError(f"global_average_pool expects 4-D input, got shape {a.shape}")
    n = a.shape[0] * a.shape[1] * a.shape[2]
    return Node(
        a.value.mean(axis=(0, 1, 2)),
        ((a, lambda g: np.broadcast_to(g / n, a.shape).copy()),),
    )


def stop_gradient(a: Node) -> Node:
    """Identity in the forward direction; zero in the backward direction."""
    return Node(a.value, parents=(), requires_grad=False)


# ------------------------------------------------------------- layered ops


def linear(x: Node, weights: Node, bias: Node) -> Node:
    """weights @ x + bias for a 1-D input."""
    x, weights, bias = lift(x), lift(weights), lift(bias)
    if x.value.ndim != 1 or weights.value.ndim != 2:
        raise ValueError(f"linear: weights {weights.shape} with input {x.shape}")
    m, n = weights.shape
    if x.shape[0] != n or bias.shape != (m,):
        raise ValueError(
            f"linear: weights {weights.shape} incompatible with input {x.shape} and bias {bias.shape}"
        )
    return Node(
        weights.value @ x.value + bias.value,
        (
            (x, lambda g: weights.value.T @ g),
            (weights, lambda g: np.outer(g, x.value)),
            (bias, lambda g: g),
        ),
    )


def conv3d(x: Node, kernels: Node, stride: tuple[int, int, int]) -> Node:
    """Valid 3-D cross-correlation over an (X, Y, Z, Cin) input.

    Kernels have shape (kx, ky, kz, Cin, Cout); output extent per axis is
    floor((in - k) / stride) + 1 and must be positive.
    """
    x, kernels = lift(x), lift(kernels)
    if x.value.ndim != 4 or kernels.value.ndim != 5:
        raise ValueError(f"conv3d: input {x.shape} with kernels {kernels.shape}")
    kx, ky, kz, cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise ValueError(f"conv3d: input channels {x.shape[3]} != kernel Cin {cin}")
    if any(s < 1 for s in stride):
        raise ValueError(f"conv3d: stride {stride} must be positive")
    out_ext = tuple((x.shape[i] - kernels.shape[i]) // stride[i] + 1 for i in range(3))
    if any(e < 1 for e in out_ext):
        raise ValueError(
            f"conv3d: input {x.shape} too small for kernels {kernels.shape} at stride {stride}"
        )

    sx, sy, sz = stride
    ox, oy, oz = out_ext

    def in_view(arr, a, b, c):
        return arr[
            a : a + sx * (ox - 1) + 1 : sx,
            b : b + sy * (oy - 1) + 1 : sy,
            c : c + sz * (oz - 1) + 1 : sz,
            :,
        ]

    out = np.zeros((ox, oy, oz, cout))
    for a in range(kx):
        for b in range(ky):
            for c in range(kz):
                out += in_view(x.value, a, b, c) @ kernels.value[a, b, c]

    def vjp_x(g):
        gx = np.zeros(x.shape)
        for a in range(kx):
            for b in range(ky):
                for c in range(kz):
                    in_view(gx, a, b, c)[...] += g @ kernels.value[a, b, c].T
        return gx

    def vjp_k(g):
        gk = np.empty(kernels.shape)
        for a in range(kx):
            for b in range(ky):
                for c in range(kz):
                    gk[a, b, c] = np.einsum("xyzi,xyzo->io", in_view(x.value, a, b, c), g)
        return gk

    return Node(out, ((x, vjp_x), (kernels, vjp_k)))


def softmax(logits: Array) -> Array:
    """Numerically stable softmax of a plain 1-D array."""
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits: Node, label: int) -> Node:
    """Cross-entropy of softmax(logits) against an integer label."""
    if logits.value.ndim != 1:
        raise ValueError(f"softmax_cross_entropy expects 1-D logits, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    z = logits.value - logits.value.max()
    lse = np.log(np.exp(z).sum())
    p = np.exp(z - lse)
    loss = lse - z[label]

    def vjp(g):
        grad = p.copy()
        grad[label] -= 1.0
        return grad * g

    return Node(loss, ((logits, vjp),))


# ------------------------------------------------------------- grad checks


def finite_difference(f: Callable[[Array], float], x: Array, step: float = 1e-5) -> Array:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def relative_error(a: Array, b: Array, floor: float = 1e-6) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


# ---------------------------------------------------------------- file io


def write_tensor_stream(fh: BinaryIO, arr: Array) -> None:
    arr = as_tensor(arr)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        fh.write(struct.pack("<I", ext))
    fh.write(arr.astype("<f8").tobytes(order="C"))


def read_tensor_stream(fh: BinaryIO) -> Array:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"truncated tensor payload: wanted {8 * count} bytes, got {len(payload)}")
    return as_tensor(np.frombuffer(payload, dtype="<f8").reshape(shape))


def write_tensor(path, arr: Array) -> None:
    """Write one array in the raw tensor format (magic, rank, extents, float64)."""
    with open(path, "wb") as fh:
        write_tensor_stream(fh, arr)


def read_tensor(path) -> Array:
    with open(path, "rb") as fh:
        return read_tensor_stream(fh)
