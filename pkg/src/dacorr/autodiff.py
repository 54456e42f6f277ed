"""Reverse-mode differentiation on a per-evaluation tape of numpy arrays.

The tape records every primitive application in execution order (a Wengert
list), so the reverse sweep is a single backwards pass with no topological
sort.  Values are plain numpy arrays; leading batch axes are allowed
everywhere because all stencil and convolution primitives act on the last
axes only.

Primitives are the functions defined in this module (arithmetic, tanh,
cyclic stencils, periodic convolution, reductions, slicing/concatenation)
plus anything registered through :func:`lift` with an exact hand-written
vector-Jacobian product.  Applying unsupported operations to a
:class:`Node` (e.g. ``np.sin``) raises immediately.
"""

import numpy as np

__all__ = [
    "Tape", "Node", "GradientResult", "evaluate_with_gradient", "vjp",
    "lift", "tanh", "roll", "stencil_product", "segment_sum", "repeat_each",
    "conv1d_periodic", "matvec", "axpy", "asum", "sum_sq", "dot",
    "take_block", "concat", "reshape",
]


class Tape:
    """Execution trace: parallel lists of parent indices and local vjps."""

    def __init__(self):
        self.parents = []  # tuple of parent node indices per record
        self.vjps = []     # callable g -> tuple of parent gradients

    def append(self, value, parent_indices, vjp_fn):
        idx = len(self.parents)
        self.parents.append(parent_indices)
        self.vjps.append(vjp_fn)
        return Node(value, idx, self)

    def leaf(self, value):
        return self.append(np.asarray(value, dtype=float), (), None)

    def backward(self, out, seed):
        """Accumulated gradients for every tape slot, seeded at ``out``."""
        grads = [None] * (out.index + 1)
        grads[out.index] = seed
        parents = self.parents
        vjps = self.vjps
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None or not parents[i]:
                continue
            for j, pg in zip(parents[i], vjps[i](g)):
                if grads[j] is None:
                    grads[j] = pg
                else:
                    # out-of-place: vjps may alias their upstream gradient
                    grads[j] = grads[j] + pg
        return grads


class Node:
    """A value on the tape.  Supports +, -, * and the module primitives."""

    __slots__ = ("value", "index", "tape")
    __array_ufunc__ = None  # block silent numpy dispatch on nodes

    def __init__(self, value, index, tape):
        self.value = value
        self.index = index
        self.tape = tape

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        if isinstance(other, Node):
            _check_shapes(self, other)
            v = self.value + other.value
            return self.tape.append(v, (self.index, other.index),
                                    lambda g: (g, g))
        c = _const(other)
        return self.tape.append(self.value + c, (self.index,),
                                lambda g: (g,))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            _check_shapes(self, other)
            v = self.value - other.value
            return self.tape.append(v, (self.index, other.index),
                                    lambda g: (g, -g))
        c = _const(other)
        return self.tape.append(self.value - c, (self.index,),
                                lambda g: (g,))

    def __rsub__(self, other):
        c = _const(other)
        return self.tape.append(c - self.value, (self.index,),
                                lambda g: (-g,))

    def __mul__(self, other):
        if isinstance(other, Node):
            _check_shapes(self, other)
            a, b = self.value, other.value
            return self.tape.append(a * b, (self.index, other.index),
                                    lambda g: (g * b, g * a))
        c = _const(other)
        return self.tape.append(self.value * c, (self.index,),
                                lambda g: (g * c,))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division between nodes is not a registered primitive")
        return self * (1.0 / _const(other))

    def __neg__(self):
        return self.tape.append(-self.value, (self.index,), lambda g: (-g,))

    def __bool__(self):
        raise TypeError("nodes cannot be used in boolean context; "
                        "only registered primitives are differentiable")

    def __repr__(self):
        return f"Node(shape={self.shape}, index={self.index})"


def _const(x):
    if isinstance(x, Node):
        raise TypeError("expected a constant, got a Node")
    return x if np.isscalar(x) else np.asarray(x, dtype=float)


def _check_shapes(a, b):
    if np.shape(a.value) != np.shape(b.value):
        raise ValueError(f"node shape mismatch: {np.shape(a.value)} vs "
                         f"{np.shape(b.value)} (broadcasting between nodes "
                         "is not a registered primitive)")


def lift(value, parents, vjp_fn):
    """Register one application of a custom primitive.

    ``vjp_fn(g)`` must return exact gradients for ``parents`` (in order);
    this is the extension point for fused model-specific primitives.
    """
    tape = parents[0].tape
    return tape.append(value, tuple(p.index for p in parents), vjp_fn)


# ---------------------------------------------------------------------------
# elementwise / stencil primitives

def tanh(x):
    if not isinstance(x, Node):
        return np.tanh(x)
    y = np.tanh(x.value)
    return x.tape.append(y, (x.index,), lambda g: (g * (1.0 - y * y),))


def roll(x, shift):
    """Cyclic shift along the last axis; roll(x, s)[n] = x[n - s]."""
    if not isinstance(x, Node):
        return np.roll(x, shift, axis=-1)
    v = np.roll(x.value, shift, axis=-1)
    return x.tape.append(v, (x.index,),
                         lambda g: (np.roll(g, -shift, axis=-1),))


def stencil_product_value(x, a, b, c):
    return np.roll(x, a, axis=-1) * (np.roll(x, b, axis=-1) -
                                     np.roll(x, c, axis=-1))


def stencil_product_vjp(x, a, b, c, g):
    ra = np.roll(x, a, axis=-1)
    diff = np.roll(x, b, axis=-1) - np.roll(x, c, axis=-1)
    gra = g * ra
    return (np.roll(g * diff, -a, axis=-1) + np.roll(gra, -b, axis=-1)
            - np.roll(gra, -c, axis=-1))


def stencil_product(x, a, b, c):
    """Cyclic advection term roll(x,a) * (roll(x,b) - roll(x,c))."""
    if not isinstance(x, Node):
        return stencil_product_value(x, a, b, c)
    xv = x.value
    v = stencil_product_value(xv, a, b, c)
    return x.tape.append(
        v, (x.index,), lambda g: (stencil_product_vjp(xv, a, b, c, g),))


def segment_sum(x, group_size):
    """Sum consecutive groups of ``group_size`` entries along the last axis."""
    if not isinstance(x, Node):
        return x.reshape(x.shape[:-1] + (-1, group_size)).sum(axis=-1)
    v = segment_sum(x.value, group_size)
    return x.tape.append(v, (x.index,),
                         lambda g: (np.repeat(g, group_size, axis=-1),))


def repeat_each(x, k):
    """Repeat each entry k times along the last axis (transpose of segment_sum)."""
    if not isinstance(x, Node):
        return np.repeat(x, k, axis=-1)
    v = np.repeat(x.value, k, axis=-1)
    return x.tape.append(
        v, (x.index,),
        lambda g: (g.reshape(g.shape[:-1] + (-1, k)).sum(axis=-1),))


# ---------------------------------------------------------------------------
# periodic convolution (cross-correlation, no kernel flip)

def conv1d_periodic_value(x, w, b):
    k = w.shape[-1]
    half = k // 2
    shifted = np.stack([np.roll(x, half - o, axis=-1) for o in range(k)],
                       axis=-3)
    flat = shifted.reshape((-1,) + shifted.shape[-3:])
    y = np.einsum("oik,skin->son", w, flat)
    y = y.reshape(x.shape[:-2] + y.shape[-2:])
    return y + b[..., :, None], shifted


def conv1d_periodic(x, w, b):
    """Periodic 1-d cross-correlation: (..., C_in, N) -> (..., C_out, N).

    Weights w have shape (C_out, C_in, K) with K odd (symmetric padding),
    bias b has shape (C_out,).  Differentiable in whichever of x, w, b are
    nodes; the others are treated as constants.
    """
    xn, wn, bn = isinstance(x, Node), isinstance(w, Node), isinstance(b, Node)
    xv = x.value if xn else np.asarray(x, dtype=float)
    wv = w.value if wn else np.asarray(w, dtype=float)
    bv = b.value if bn else np.asarray(b, dtype=float)
    if not (xn or wn or bn):
        return conv1d_periodic_value(xv, wv, bv)[0]
    y, shifted = conv1d_periodic_value(xv, wv, bv)
    k = wv.shape[-1]
    half = k // 2
    batch_shape = xv.shape[:-2]
    sflat = shifted.reshape((-1,) + shifted.shape[-3:])

    def vjp_fn(g):
        gflat = g.reshape((-1,) + g.shape[-2:])
        out = []
        if xn:
            gshift = np.einsum("oik,son->skin", wv, gflat)
            gx = np.zeros_like(sflat[:, 0])
            for o in range(k):
                gx += np.roll(gshift[:, o], o - half, axis=-1)
            out.append(gx.reshape(batch_shape + gx.shape[-2:]))
        if wn:
            out.append(np.einsum("son,skin->oik", gflat, sflat))
        if bn:
            out.append(gflat.sum(axis=(0, 2)))
        return tuple(out)

    parents = [p for p, flag in ((x, xn), (w, wn), (b, bn)) if flag]
    return lift(y, parents, vjp_fn)


# ---------------------------------------------------------------------------
# affine maps, reductions, structure

def matvec(a, x):
    """Dense constant matrix times node vector."""
    if not isinstance(x, Node):
        return a @ x
    return x.tape.append(a @ x.value, (x.index,), lambda g: (a.T @ g,))


def axpy(alpha, x, y):
    """alpha * x + y with scalar constant alpha (fused RK4 glue)."""
    if not isinstance(x, Node) and not isinstance(y, Node):
        return alpha * x + y
    if isinstance(x, Node) and isinstance(y, Node):
        v = alpha * x.value + y.value
        return x.tape.append(v, (x.index, y.index),
                             lambda g: (alpha * g, g))
    if isinstance(x, Node):
        return x * alpha + y
    return y + alpha * x


def asum(x):
    if not isinstance(x, Node):
        return np.sum(x)
    shape = x.value.shape
    return x.tape.append(np.sum(x.value), (x.index,),
                         lambda g: (np.full(shape, g),))


def sum_sq(x):
    """Sum of squared entries (reduction used by every quadratic cost term)."""
    if not isinstance(x, Node):
        return float(np.sum(np.square(x)))
    xv = x.value
    return x.tape.append(np.sum(np.square(xv)), (x.index,),
                         lambda g: (2.0 * g * xv,))


def dot(x, y):
    if not isinstance(x, Node) and not isinstance(y, Node):
        return float(np.dot(x, y))
    if isinstance(x, Node) and isinstance(y, Node):
        xv, yv = x.value, y.value
        return x.tape.append(np.dot(xv, yv), (x.index, y.index),
                             lambda g: (g * yv, g * xv))
    if isinstance(x, Node):
        yv = _const(y)
        return x.tape.append(np.dot(x.value, yv), (x.index,),
                             lambda g: (g * yv,))
    return dot(y, x)


def take_block(x, start, stop):
    """Contiguous slice along the last axis."""
    if not isinstance(x, Node):
        return x[..., start:stop]
    n = x.value.shape[-1]
    v = x.value[..., start:stop]

    def vjp_fn(g):
        full = np.zeros(x.value.shape[:-1] + (n,))
        full[..., start:stop] = g
        return (full,)

    return x.tape.append(v, (x.index,), vjp_fn)


def concat(parts):
    """Concatenate nodes along the last axis."""
    if not any(isinstance(p, Node) for p in parts):
        return np.concatenate(parts, axis=-1)
    if not all(isinstance(p, Node) for p in parts):
        raise TypeError("concat requires all-node or all-array parts")
    values = [p.value for p in parts]
    sizes = [v.shape[-1] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp_fn(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]]
                     for i in range(len(sizes)))

    return lift(np.concatenate(values, axis=-1), parts, vjp_fn)


def reshape(x, shape):
    if not isinstance(x, Node):
        return np.reshape(x, shape)
    orig = x.value.shape
    return x.tape.append(x.value.reshape(shape), (x.index,),
                         lambda g: (g.reshape(orig),))


# ---------------------------------------------------------------------------
# driver API

class GradientResult:
    """Objective value plus per-input-block gradients from one reverse sweep."""

    __slots__ = ("value", "grads", "finite")

    def __init__(self, value, grads, finite):
        self.value = value
        self.grads = grads
        self.finite = finite

    def __repr__(self):
        return f"GradientResult(value={self.value!r}, blocks={sorted(self.grads)})"


def _run(program, inputs):
    tape = Tape()
    nodes = {name: tape.leaf(value) for name, value in inputs.items()}
    out = program(nodes)
    if not isinstance(out, Node):
        raise TypeError("program must return a Node built from registered primitives")
    return tape, nodes, out


def evaluate_with_gradient(program, inputs):
    """Evaluate a scalar program and its gradient for every named input.

    ``program`` maps a dict of nodes to a scalar node; the tape is rebuilt
    on every call.  Non-finite values are reported via ``finite`` rather
    than raised, so a minimizer's line search can reject the point.
    """
    tape, nodes, out = _run(program, inputs)
    if np.ndim(out.value) != 0:
        raise ValueError("evaluate_with_gradient requires a scalar program output")
    grads_all = tape.backward(out, 1.0)
    grads = {}
    finite = bool(np.isfinite(out.value))
    for name, node in nodes.items():
        g = grads_all[node.index]
        if g is None:
            g = np.zeros_like(node.value)
        g = np.broadcast_to(g, node.value.shape).astype(float, copy=False)
        grads[name] = g
        finite = finite and bool(np.all(np.isfinite(g)))
    return GradientResult(float(out.value), grads, finite)


def vjp(program, inputs, cotangent):
    """Vector-Jacobian product of a (possibly array-valued) program."""
    tape, nodes, out = _run(program, inputs)
    cotangent = np.asarray(cotangent, dtype=float)
    if cotangent.shape != np.shape(out.value):
        raise ValueError(
            f"cotangent shape {cotangent.shape} does not match "
            f"program output shape {np.shape(out.value)}")
    seed = cotangent if cotangent.ndim else float(cotangent)
    grads_all = tape.backward(out, seed)
    result = {}
    for name, node in nodes.items():
        g = grads_all[node.index]
        if g is None:
            g = np.zeros_like(node.value)
        result[name] = np.broadcast_to(g, node.value.shape).astype(float, copy=False)
    return result
