"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Graph` is declared once (leaves first, then primitive operations,
each appended in topological order), evaluated with :meth:`Graph.forward` and
differentiated with :meth:`Graph.backward`. Gradients are available for both
parameter leaves and input leaves, the latter being what attacks consume.

The primitive set is closed: add, mul, matmul, conv2d, maxpool2, relu,
softmax, log, sum, mean, reshape. Everything else is composed from these.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "Node",
    "GraphError",
    "ShapeError",
    "GraphStateError",
    "finite_diff_check",
]


class GraphError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeError(GraphError, ValueError):
    pass


class GraphStateError(GraphError, RuntimeError):
    pass


class Node:
    __slots__ = ("index", "op", "inputs", "attrs", "name", "shape")

    def __init__(self, index, op, inputs, attrs, name, shape):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name
        self.shape = shape

    def __repr__(self):
        return f"Node({self.name!r}, op={self.op}, shape={self.shape})"


def _broadcast_shape(a, b, name):
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f"node {name!r}: cannot broadcast {a} with {b}") from None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _reduced_shape(shape, axis, keepdims=False):
    if axis is None:
        return (1,) * len(shape) if keepdims else ()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


class Graph:
    """A static computation graph built from a closed set of primitives.

    Example::

        g = Graph()
        x = g.input("x", (2,))
        y = g.sum(g.mul(x, x))
        g.forward({"x": np.array([3.0, 1.0])})
        _, grads = g.backward()        # grads["x"] == [6.0, 2.0]
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._names: set[str] = set()
        self.output: Node | None = None
        self._values: list | None = None
        self._grads: list | None = None

    # -- construction ---------------------------------------------------

    def _add(self, op, inputs, attrs, shape, name=None):
        for node in inputs:
            if not isinstance(node, Node) or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
                raise GraphError(f"{op}: input {node!r} does not belong to this graph")
        if name is None:
            name = f"{op}_{len(self.nodes)}"
        if name in self._names:
            raise GraphError(f"duplicate node name {name!r}")
        node = Node(len(self.nodes), op, tuple(inputs), attrs, name, tuple(int(s) for s in shape))
        self.nodes.append(node)
        self._names.add(name)
        self.output = node
        self._values = None
        self._grads = None
        return node

    def input(self, name, shape):
        return self._add("input", (), {}, shape, name)

    def param(self, name, shape):
        return self._add("param", (), {}, shape, name)

    def constant(self, value, name=None):
        value = np.asarray(value, dtype=float)
        return self._add("const", (), {"value": value}, value.shape, name)

    def add(self, a, b, name=None):
        return self._add("add", (a, b), {}, _broadcast_shape(a.shape, b.shape, name or "add"), name)

    def mul(self, a, b, name=None):
        return self._add("mul", (a, b), {}, _broadcast_shape(a.shape, b.shape, name or "mul"), name)

    def matmul(self, a, b, transpose_b=False, name=None):
        label = name or "matmul"
        if len(a.shape) != 2 or len(b.shape) not in (1, 2):
            raise ShapeError(f"node {label!r}: matmul expects 2-D @ 1-D/2-D, got {a.shape} @ {b.shape}")
        bshape = b.shape[::-1] if (transpose_b and len(b.shape) == 2) else b.shape
        if a.shape[1] != bshape[0]:
            raise ShapeError(f"node {label!r}: inner dimensions differ, {a.shape} @ {bshape}")
        out = (a.shape[0],) if len(bshape) == 1 else (a.shape[0], bshape[1])
        return self._add("matmul", (a, b), {"transpose_b": bool(transpose_b)}, out, name)

    def conv2d(self, x, w, padding="valid", name=None):
        """Stride-1 2-D cross-correlation, NCHW input, KCHW kernel."""
        label = name or "conv2d"
        if len(x.shape) != 4 or len(w.shape) != 4:
            raise ShapeError(f"node {label!r}: conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        k, cw, kh, kw = w.shape
        if c != cw:
            raise ShapeError(f"node {label!r}: input has {c} channels, kernel expects {cw}")
        if padding == "same":
            if kh % 2 == 0 or kw % 2 == 0:
                raise ShapeError(f"node {label!r}: 'same' padding needs odd kernel sizes")
            out = (n, k, h, wd)
        elif padding == "valid":
            if kh > h or kw > wd:
                raise ShapeError(f"node {label!r}: kernel {kh}x{kw} larger than input {h}x{wd}")
            out = (n, k, h - kh + 1, wd - kw + 1)
        else:
            raise GraphError(f"node {label!r}: unknown padding {padding!r}")
        return self._add("conv2d", (x, w), {"padding": padding}, out, name)

    def maxpool2(self, x, name=None):
        """2x2 max-pool, stride 2; a trailing odd row/column is dropped."""
        if len(x.shape) != 4 or x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(f"node {name or 'maxpool2'!r}: needs 4-D input with H, W >= 2, got {x.shape}")
        n, c, h, w = x.shape
        return self._add("maxpool2", (x,), {}, (n, c, h // 2, w // 2), name)

    def relu(self, x, name=None):
        return self._add("relu", (x,), {}, x.shape, name)

    def softmax(self, x, name=None):
        """Softmax over the last axis."""
        if len(x.shape) == 0:
            raise ShapeError(f"node {name or 'softmax'!r}: softmax of a scalar")
        return self._add("softmax", (x,), {}, x.shape, name)

    def log(self, x, floor=None, name=None):
        """Natural log of ``max(x, floor)``; gradient is zero where the floor binds."""
        return self._add("log", (x,), {"floor": floor}, x.shape, name)

    def sum(self, x, axis=None, keepdims=False, name=None):
        return self._add("sum", (x,), {"axis": axis, "keepdims": keepdims},
                         _reduced_shape(x.shape, axis, keepdims), name)

    def mean(self, x, axis=None, keepdims=False, name=None):
        return self._add("mean", (x,), {"axis": axis, "keepdims": keepdims},
                         _reduced_shape(x.shape, axis, keepdims), name)

    def reshape(self, x, shape, name=None):
        shape = tuple(int(s) for s in shape)
        size = int(np.prod(x.shape))
        if shape.count(-1) == 1:
            known = int(np.prod([s for s in shape if s != -1]))
            if known > 0 and size % known == 0:
                shape = tuple(size // known if s == -1 else s for s in shape)
        if int(np.prod(shape)) != size or min(shape, default=0) < 0:
            raise ShapeError(f"node {name or 'reshape'!r}: cannot reshape {x.shape} to {shape}")
        return self._add("reshape", (x,), {}, shape, name)

    # -- composed helpers (no new primitives) ---------------------------

    def scale(self, x, factor, name=None):
        return self.mul(x, self.constant(float(factor)), name=name)

    def sub(self, a, b, name=None):
        return self.add(a, self.scale(b, -1.0), name=name)

    # -- evaluation -----------------------------------------------------

    def leaves(self, op):
        return [n for n in self.nodes if n.op == op]

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def forward(self, inputs=None, params=None, output=None):
        """Evaluate every node in order and return the value of ``output``.

        ``inputs`` and ``params`` map leaf names to arrays. Intermediate values
        are cached for :meth:`backward`.
        """
        inputs = inputs or {}
        params = params or {}
        values = [None] * len(self.nodes)
        for node in self.nodes:
            if node.op in ("input", "param"):
                source = inputs if node.op == "input" else params
                if node.name not in source:
                    raise GraphError(f"missing value for {node.op} leaf {node.name!r}")
                v = np.asarray(source[node.name])
                if v.dtype.kind != "f":
                    v = v.astype(np.float64)
                if v.shape != node.shape:
                    raise ShapeError(f"leaf {node.name!r}: expected shape {node.shape}, got {v.shape}")
            elif node.op == "const":
                v = node.attrs["value"]
            else:
                v = _FORWARD[node.op](node, *(values[i.index] for i in node.inputs))
            values[node.index] = v
        self._values = values
        self._grads = None
        out = output if output is not None else self.output
        return values[out.index]

    def value(self, node):
        if self._values is None:
            raise GraphStateError("forward has not run on this graph")
        return self._values[node.index]

    def backward(self, seed_grad=None, output=None):
        """Propagate ``seed_grad`` from ``output`` back to every node.

        Returns ``(param_grads, input_grads)`` keyed by leaf name. Leaves the
        output does not depend on get zero gradients.
        """
        if self._values is None:
            raise GraphStateError("backward called before forward")
        out = output if output is not None else self.output
        out_val = self._values[out.index]
        if seed_grad is None:
            if np.size(out_val) != 1:
                raise GraphError(f"output {out.name!r} is not scalar; pass seed_grad")
            seed_grad = np.ones_like(out_val)
        seed_grad = np.asarray(seed_grad, dtype=out_val.dtype)
        if seed_grad.shape != out_val.shape:
            raise ShapeError(f"seed_grad shape {seed_grad.shape} != output shape {out_val.shape}")

        grads = [None] * len(self.nodes)
        grads[out.index] = seed_grad
        for node in reversed(self.nodes[: out.index + 1]):
            g = grads[node.index]
            if g is None or not node.inputs:
                continue
            in_vals = [self._values[i.index] for i in node.inputs]
            for inp, gi in zip(node.inputs, _BACKWARD[node.op](node, g, self._values[node.index], *in_vals)):
                if gi is None:
                    continue
                prev = grads[inp.index]
                grads[inp.index] = gi if prev is None else prev + gi
        self._grads = grads

        def collect(op):
            result = {}
            for n in self.leaves(op):
                g = grads[n.index]
                result[n.name] = np.zeros(n.shape, dtype=out_val.dtype) if g is None else np.asarray(g)
            return result

        return collect("param"), collect("input")

    def grad(self, node):
        """Gradient of the last backward output with respect to any node."""
        if self._grads is None:
            raise GraphStateError("backward has not run on this graph")
        g = self._grads[node.index]
        return np.zeros(node.shape) if g is None else g


# -- primitive kernels ----------------------------------------------------

def _conv_pad(x, w, padding):
    if padding == "same":
        ph, pw = w.shape[2] // 2, w.shape[3] // 2
        return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return x


def _conv_cols(xp, kh, kw):
    # [N, C, Ho, Wo, kh, kw] -> [N*Ho*Wo, C*kh*kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), (n, ho, wo)


def _fwd_conv2d(node, x, w):
    xp = _conv_pad(x, w, node.attrs["padding"])
    k, c, kh, kw = w.shape
    cols, (n, ho, wo) = _conv_cols(xp, kh, kw)
    out = cols @ w.reshape(k, -1).T
    return out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)


def _bwd_conv2d(node, g, out, x, w):
    xp = _conv_pad(x, w, node.attrs["padding"])
    k, c, kh, kw = w.shape
    cols, (n, ho, wo) = _conv_cols(xp, kh, kw)
    gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
    gw = (gm.T @ cols).reshape(w.shape)
    gcols = (gm @ w.reshape(k, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if node.attrs["padding"] == "same":
        ph, pw = kh // 2, kw // 2
        gxp = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    return gxp, gw


def _pool_windows(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    return x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)


def _fwd_maxpool2(node, x):
    h, w = x.shape[2] // 2 * 2, x.shape[3] // 2 * 2
    top = np.maximum(x[:, :, 0:h:2, 0:w:2], x[:, :, 0:h:2, 1:w:2])
    return np.maximum(top, np.maximum(x[:, :, 1:h:2, 0:w:2], x[:, :, 1:h:2, 1:w:2]))


def _bwd_maxpool2(node, g, out, x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = _pool_windows(x)
    # ties route the gradient to the first maximal element
    first = np.argmax(win, axis=-1)
    gwin = np.zeros(win.shape, dtype=g.dtype)
    np.put_along_axis(gwin, first[..., None], g[..., None], axis=-1)
    gx = np.zeros_like(x, dtype=g.dtype)
    gx[:, :, : 2 * ho, : 2 * wo] = (
        gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
    return (gx,)


def _fwd_softmax(node, x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_log(node, x):
    floor = node.attrs["floor"]
    return np.log(np.maximum(x, floor) if floor is not None else x)


def _bwd_log(node, g, out, x):
    floor = node.attrs["floor"]
    if floor is None:
        return (g / x,)
    safe = np.maximum(x, floor)
    return (np.where(x > floor, g / safe, 0.0),)


def _fwd_matmul(node, a, b):
    return a @ (b.T if node.attrs["transpose_b"] else b)


def _bwd_matmul(node, g, out, a, b):
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if node.attrs["transpose_b"]:
        return g @ b, g.T @ a
    return g @ b.T, a.T @ g


def _bwd_reduce(node, g, x, count):
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    if not keepdims:
        g = g.reshape(_reduced_shape(x.shape, axis, keepdims=True))
    return (np.broadcast_to(g / count, x.shape).copy(),)


def _count(node, x):
    axis = node.attrs["axis"]
    if axis is None:
        return x.size
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([x.shape[a] for a in axes]))


_FORWARD = {
    "add": lambda n, a, b: a + b,
    "mul": lambda n, a, b: a * b,
    "matmul": _fwd_matmul,
    "conv2d": _fwd_conv2d,
    "maxpool2": _fwd_maxpool2,
    "relu": lambda n, x: np.maximum(x, 0.0),
    "softmax": _fwd_softmax,
    "log": _fwd_log,
    "sum": lambda n, x: np.sum(x, axis=n.attrs["axis"], keepdims=n.attrs["keepdims"]),
    "mean": lambda n, x: np.mean(x, axis=n.attrs["axis"], keepdims=n.attrs["keepdims"]),
    "reshape": lambda n, x: x.reshape(n.shape),
}

_BACKWARD = {
    "add": lambda n, g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "mul": lambda n, g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    "matmul": _bwd_matmul,
    "conv2d": _bwd_conv2d,
    "maxpool2": _bwd_maxpool2,
    # subgradient at 0 is 0
    "relu": lambda n, g, o, x: (np.where(x > 0, g, 0.0),),
    "softmax": lambda n, g, o, x: (o * (g - np.sum(g * o, axis=-1, keepdims=True)),),
    "log": _bwd_log,
    "sum": lambda n, g, o, x: _bwd_reduce(n, g, x, 1),
    "mean": lambda n, g, o, x: _bwd_reduce(n, g, x, _count(n, x)),
    "reshape": lambda n, g, o, x: (g.reshape(x.shape),),
}


def _central(graph, inputs, params, flat, i, step):
    orig = flat[i]
    flat[i] = orig + step
    f_plus = float(graph.forward(inputs, params))
    flat[i] = orig - step
    f_minus = float(graph.forward(inputs, params))
    flat[i] = orig
    return (f_plus - f_minus) / (2.0 * step)


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(graph, inputs=None, params=None, step=1e-5, wrt=("param", "input"), refine=2, tol=1e-4):
    """Largest relative disagreement between analytic and central-difference gradients.

    The error for one coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``; the
    maximum over every coordinate of the selected leaf kinds is returned.

    Max-pool and ReLU make the function piecewise smooth, so a switch point
    within ``step`` of the evaluation point spoils the central difference.
    A coordinate whose error exceeds ``tol`` is re-measured with steps
    ``step / 10``, ``step / 100`` (``refine`` times) and keeps the smallest
    error. ``refine=0`` gives the plain single-step check.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in (inputs or {}).items()}
    params = {k: np.array(v, dtype=np.float64) for k, v in (params or {}).items()}
    out = graph.forward(inputs, params)
    if np.size(out) != 1:
        raise GraphError(f"finite_diff_check needs a scalar output, got shape {np.shape(out)}")
    param_grads, input_grads = graph.backward()
    analytic = {"param": param_grads, "input": input_grads}
    sources = {"param": params, "input": inputs}

    worst = 0.0
    for kind in wrt:
        for name, grad in analytic[kind].items():
            flat = sources[kind][name].reshape(-1)
            a = grad.reshape(-1)
            for i in range(flat.size):
                err = _rel_err(a[i], _central(graph, inputs, params, flat, i, step))
                h = step
                for _ in range(refine):
                    if err <= tol:
                        break
                    h /= 10.0
                    err = min(err, _rel_err(a[i], _central(graph, inputs, params, flat, i, h)))
                worst = max(worst, err)
    graph.forward(inputs, params)
    return worst
