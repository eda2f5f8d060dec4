"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Node wraps a numpy array plus the closure needed to push gradients to its
parents. Graphs are built implicitly by calling the op functions below;
``backward`` runs one reverse sweep in topological order. One graph per
training step, single-threaded; distinct graphs are independent.

Supported broadcasting follows numpy; gradients of broadcast operands are
summed back to the operand shape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue, NonScalarLoss, ShapeMismatch

LEAKY_SLOPE = 0.01


class Node:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "trainable", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool | None = None,
        trainable: bool = False,
        name: str = "",
    ):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteValue(f"non-finite forward value in node '{name}'")
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.trainable = trainable
        if requires_grad is None:
            requires_grad = trainable or any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, trainable={self.trainable}, name={self.name!r})"


def constant(value, name: str = "") -> Node:
    return Node(value, requires_grad=False, name=name)


def parameter(value, name: str = "") -> Node:
    return Node(value, trainable=True, name=name)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Node, b: Node, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "add")
    return Node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "sub")
    return Node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    """Elementwise (Hadamard) product, with numpy broadcasting."""
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "mul")
    return Node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> Node:
    """Elementwise division; b must be nonzero everywhere."""
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a, b, "div")
    if np.any(b.value == 0.0):
        raise NonFiniteValue("division by zero")
    return Node(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / b.value**2, b.shape),
        ),
    )


def scale(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), lambda g: (g * c,))


def neg(a) -> Node:
    return scale(a, -1.0)


def matmul(a, b) -> Node:
    """Matrix product; supports stacked (batched) operands like np.matmul."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(value, (a, b), vjp)


def transpose_last2(a) -> Node:
    a = _as_node(a)
    return Node(
        np.swapaxes(a.value, -1, -2),
        (a,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    return Node(
        value,
        nodes,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Node:
    """Leaky rectifier; the subgradient at exactly 0 is the positive slope 1."""
    a = _as_node(a)
    mask = a.value >= 0.0
    value = np.where(mask, a.value, slope * a.value)
    return Node(value, (a,), lambda g: (np.where(mask, g, slope * g),), name="leaky_relu")


ABS_KINK_TOL = 1e-12


def absolute(a, zero_tol: float = ABS_KINK_TOL) -> Node:
    """Elementwise |x|; subgradient 0 within zero_tol of the kink.

    The dead zone makes the gradient exactly zero at optima reached up to
    floating-point round-off; it is far below any residual seen in training.
    """
    a = _as_node(a)
    s = np.sign(a.value) * (np.abs(a.value) > zero_tol)
    return Node(np.abs(a.value), (a,), lambda g: (g * s,), name="absolute")


def total(a) -> Node:
    """Sum of all entries, as a scalar node."""
    a = _as_node(a)
    shape = a.shape
    return Node(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axes(a, axes, keepdims: bool = False) -> Node:
    a = _as_node(a)
    axes = tuple(ax % a.value.ndim for ax in axes)
    value = a.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(value, (a,), vjp)


def l1_sum(a) -> Node:
    """Sum of absolute values of all entries (the L1 norm of the flattening)."""
    return total(absolute(a))


def frobenius_norm(a, axes=None, keepdims: bool = False, eps: float = 0.0) -> Node:
    """sqrt(sum of squares) over the given axes (all axes when None).

    With eps > 0 the norm is floored at eps, which keeps the gradient finite
    for all-zero inputs (the gradient is zero where the floor is active).
    """
    a = _as_node(a)
    if axes is None:
        axes = tuple(range(a.value.ndim))
    else:
        axes = tuple(ax % a.value.ndim for ax in axes)
    raw = np.sqrt((a.value**2).sum(axis=axes, keepdims=True))
    clipped = np.maximum(raw, eps)
    if np.any(clipped == 0.0):
        raise NonFiniteValue("Frobenius norm of zero input is not differentiable")
    active = raw >= eps

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((g * active) * a.value / clipped,)

    value = clipped if keepdims else clipped.reshape(
        [n for i, n in enumerate(a.shape) if i not in axes]
    )
    return Node(value, (a,), vjp)


def vector_norm(a) -> Node:
    """2-norm of a vector (or flattened array), as a scalar node."""
    return frobenius_norm(a)


def sin(a) -> Node:
    a = _as_node(a)
    c = np.cos(a.value)
    return Node(np.sin(a.value), (a,), lambda g: (g * c,))


def cos(a) -> Node:
    a = _as_node(a)
    s = np.sin(a.value)
    return Node(np.cos(a.value), (a,), lambda g: (-g * s,))


def skew_batch(v) -> Node:
    """(..., 3) axis vectors -> (..., 3, 3) cross-product matrices."""
    v = _as_node(v)
    if v.shape[-1] != 3:
        raise ShapeMismatch(f"skew_batch expects (..., 3), got {v.shape}")
    x, y, z = v.value[..., 0], v.value[..., 1], v.value[..., 2]
    zero = np.zeros_like(x)
    value = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )

    def vjp(g):
        gx = g[..., 2, 1] - g[..., 1, 2]
        gy = g[..., 0, 2] - g[..., 2, 0]
        gz = g[..., 1, 0] - g[..., 0, 1]
        return (np.stack([gx, gy, gz], axis=-1),)

    return Node(value, (v,), vjp)


# Series cutoff for the removable singularity of the rotation coefficients.
_ROT_SERIES_EPS = 1e-8


def rotation_coeffs(sq) -> tuple[Node, Node]:
    """Coefficients (sin t / t, (1 - cos t) / t^2) as functions of s = t^2.

    Both are analytic in s with removable singularities at 0; below
    _ROT_SERIES_EPS the truncated Taylor series in s is used for value and
    derivative, so the composition stays differentiable through zero rotation.
    """
    sq = _as_node(sq)
    s = sq.value
    small = s < _ROT_SERIES_EPS
    s_safe = np.where(small, 1.0, s)
    t = np.sqrt(s_safe)
    k1 = np.where(small, 1.0 - s / 6.0 + s**2 / 120.0, np.sin(t) / t)
    k2 = np.where(small, 0.5 - s / 24.0 + s**2 / 720.0, (1.0 - np.cos(t)) / s_safe)
    dk1 = np.where(
        small, -1.0 / 6.0 + s / 60.0, (t * np.cos(t) - np.sin(t)) / (2.0 * s_safe * t)
    )
    dk2 = np.where(
        small, -1.0 / 24.0 + s / 360.0, (np.sin(t) / t - 2.0 * k2) / (2.0 * s_safe)
    )
    n1 = Node(k1, (sq,), lambda g: (g * dk1,))
    n2 = Node(k2, (sq,), lambda g: (g * dk2,))
    return n1, n2


def rodrigues_batch(v) -> Node:
    """(..., 3) axis-angle vectors -> (..., 3, 3) rotation matrices.

    Same closed form as geometry.rodrigues, expressed through differentiable
    primitives so rotations can be trained through.
    """
    v = _as_node(v)
    sq = sum_axes(mul(v, v), axes=(-1,))  # theta^2 per vector
    k1, k2 = rotation_coeffs(sq)
    a = skew_batch(v)
    a2 = matmul(a, a)
    eye = np.broadcast_to(np.eye(3), a.shape)
    k1e = reshape(k1, k1.shape + (1, 1))
    k2e = reshape(k2, k2.shape + (1, 1))
    return add(constant(eye), add(mul(k1e, a), mul(k2e, a2)))


def take_rows(a, index: np.ndarray) -> Node:
    """Gather along axis 0 (used to permute samples within a batch)."""
    a = _as_node(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), vjp)


def center_rows(a, root_index: int) -> Node:
    """Subtract row `root_index` of axis -2 from every row (per sample)."""
    a = _as_node(a)
    root = a.value[..., root_index : root_index + 1, :]

    def vjp(g):
        out = g.copy()
        out[..., root_index, :] -= g.sum(axis=-2)
        return (out,)

    return Node(a.value - root, (a,), vjp)


def backward(loss: Node) -> None:
    """Reverse sweep from a scalar loss; accumulates .grad on every node
    reachable through requires_grad parents."""
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += g


def check_gradients(
    f: Callable[[dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    max_params: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of f against central finite differences.

    f builds a scalar node from a dict of parameter nodes. Relative error per
    coordinate is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|); the max over all
    checked coordinates is returned. With max_coords_per_param set, a random
    subset of coordinates is checked per parameter, and with max_params a
    random subset of the parameter tensors (for large models; repeated calls
    with a shared rng cover everything).

    Coordinates whose +/- eps interval crosses a leaky-rectifier or
    absolute-value kink are resampled: the central difference is not a valid
    derivative estimate across a slope discontinuity. Crossings are detected
    by comparing the signs of every kink argument at the two endpoints.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    nodes = {k: parameter(v.copy(), name=k) for k, v in params.items()}
    loss = f(nodes)
    backward(loss)

    def kink_signs(out: Node) -> np.ndarray:
        seen = {id(out)}
        stack = [out]
        signs = []
        while stack:
            node = stack.pop()
            if node.name in ("leaky_relu", "absolute"):
                signs.append(node.parents[0].value.ravel() >= 0.0)
            for p in node.parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        return np.concatenate(signs) if signs else np.empty(0, dtype=bool)

    def eval_at(perturbed: dict[str, np.ndarray]) -> tuple[float, np.ndarray]:
        out = f({k: parameter(v) for k, v in perturbed.items()})
        return float(out.value), kink_signs(out)

    keys = list(params)
    if max_params is not None and len(keys) > max_params:
        keys = [keys[i] for i in rng.choice(len(keys), size=max_params, replace=False)]

    worst = 0.0
    for key in keys:
        base = params[key]
        g_ad = nodes[key].grad
        if g_ad is None:
            g_ad = np.zeros_like(base)
        flat = base.size
        if max_coords_per_param is not None and flat > max_coords_per_param:
            quota = max_coords_per_param
            pool = rng.permutation(flat)
        else:
            quota = flat
            pool = np.arange(flat)
        checked = 0
        for c in pool:
            if checked == quota:
                break
            idx = np.unravel_index(c, base.shape)
            work = {k: v.copy() for k, v in params.items()}
            work[key][idx] = base[idx] + eps
            hi, signs_hi = eval_at(work)
            work[key][idx] = base[idx] - eps
            lo, signs_lo = eval_at(work)
            if not np.array_equal(signs_hi, signs_lo):
                continue  # interval straddles a kink; pick another coordinate
            checked += 1
            g_fd = (hi - lo) / (2.0 * eps)
            g = g_ad[idx]
            err = abs(g - g_fd) / max(1.0, abs(g), abs(g_fd))
            worst = max(worst, err)
    return worst
