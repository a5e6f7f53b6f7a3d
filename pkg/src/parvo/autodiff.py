"""Reverse-mode automatic differentiation over dense float64 tensors.

A small tape: every applied primitive appends a node holding its cached
output, so a finished graph can be re-evaluated with new leaf values
(`Graph.forward`) and differentiated (`Graph.backward`) without being
rebuilt. Softplus ships with closed-form first and second derivatives as
primitives of their own, which keeps gradient *expressions* (that mention
sigma') differentiable by plain first-order backprop.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def _arr(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _sigmoid(x: Array) -> Array:
    # exp(-|x|) never overflows
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(
        "%s: incompatible shapes %s" % (op, " and ".join(str(tuple(s)) for s in shapes))
    )


# ---------------------------------------------------------------------------
# primitive registry: name -> (forward, vjp)
#
# forward(inputs, params) -> output array
# vjp(inputs, params, out, grad) -> tuple of cotangents (None for an input
# that needs no gradient path, e.g. none here; conv bias handled by arity)
# ---------------------------------------------------------------------------


def _matmul_fwd(ins, params):
    a, b = ins
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError("matmul: only 1-D/2-D operands, got %d-D and %d-D" % (a.ndim, b.ndim))
    if a.shape[-1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return _arr(a @ b)


def _matmul_vjp(ins, params, out, g):
    a, b = ins
    if a.ndim == 1 and b.ndim == 1:
        return (g * b, g * a)
    if a.ndim == 1:
        return (b @ g, np.outer(a, g))
    if b.ndim == 1:
        return (np.outer(g, b), a.T @ g)
    return (g @ b.T, a.T @ g)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise _shape_error(op, a.shape, b.shape)


def _add_fwd(ins, params):
    a, b = ins
    _same_shape("add", a, b)
    return a + b


def _mul_fwd(ins, params):
    a, b = ins
    _same_shape("mul", a, b)
    return a * b


def _scale_fwd(ins, params):
    return ins[0] * float(params["factor"])


def _scalar_mul_fwd(ins, params):
    x, s = ins
    if s.shape != ():
        raise ValueError("scalar-mul: second operand must be a scalar, got shape %s" % (s.shape,))
    return x * s


def _scalar_mul_vjp(ins, params, out, g):
    x, s = ins
    return (g * s, _arr((g * x).sum()))


def _im2col(x, kh, kw):
    # x [C,H,W], stride 1, zero "same" padding -> [C*kh*kw, H*W]
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + h, j : j + w]
    return cols.reshape(c * kh * kw, h * w)


def _col2im(dcols, c, h, w, kh, kw):
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    d = dcols.reshape(c, kh, kw, h, w)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + h, j : j + w] += d[:, i, j]
    return dxp[:, ph : ph + h, pw : pw + w]


def _conv2d_fwd(ins, params):
    x, k = ins[0], ins[1]
    if x.ndim != 3 or k.ndim != 4:
        raise ValueError("conv2d: expects input [C,H,W] and kernel [OC,C,kh,kw]")
    oc, kc, kh, kw = k.shape
    if kc != x.shape[0]:
        raise _shape_error("conv2d", x.shape, k.shape)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel extents must be odd for same padding")
    c, h, w = x.shape
    cols = _im2col(x, kh, kw)
    out = (k.reshape(oc, -1) @ cols).reshape(oc, h, w)
    if len(ins) == 3:
        bias = ins[2]
        if bias.shape != (oc,):
            raise _shape_error("conv2d bias", bias.shape, (oc,))
        out = out + bias[:, None, None]
    return out


def _conv2d_vjp(ins, params, out, g):
    x, k = ins[0], ins[1]
    oc, _, kh, kw = k.shape
    c, h, w = x.shape
    cols = _im2col(x, kh, kw)
    g2 = g.reshape(oc, h * w)
    dk = (g2 @ cols.T).reshape(k.shape)
    dcols = k.reshape(oc, -1).T @ g2
    dx = _col2im(dcols, c, h, w, kh, kw)
    if len(ins) == 3:
        return (dx, dk, g.sum(axis=(1, 2)))
    return (dx, dk)


def _l2norm_fwd(ins, params):
    x = ins[0]
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(n, 1e-300)


def _l2norm_vjp(ins, params, out, g):
    x = ins[0]
    n = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), 1e-300)
    return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)


def _softmax_fwd(ins, params):
    y = ins[0]
    if y.ndim != 1:
        raise ValueError("softmax: expects a 1-D logit vector, got shape %s" % (y.shape,))
    e = np.exp(y - y.max())
    return e / e.sum()


def _softmax_vjp(ins, params, out, g):
    p = out
    return (p * (g - (g * p).sum()),)


def _xent_fwd(ins, params):
    y = ins[0]
    t = int(params["target"])
    if y.ndim != 1:
        raise ValueError("cross-entropy-with-index-target: expects 1-D logits")
    if not 0 <= t < y.shape[0]:
        raise ValueError(
            "cross-entropy-with-index-target: target %d out of range for %d classes"
            % (t, y.shape[0])
        )
    m = y.max()
    return _arr(m + np.log(np.exp(y - m).sum()) - y[t])


def _xent_vjp(ins, params, out, g):
    y = ins[0]
    t = int(params["target"])
    p = _softmax_fwd((y,), {})
    p = p.copy()
    p[t] -= 1.0
    return (g * p,)


def _meanpool_fwd(ins, params):
    x = ins[0]
    if x.ndim != 2:
        raise ValueError("mean-pool: expects a [T,D] matrix, got shape %s" % (x.shape,))
    return x.mean(axis=0)


def _meanpool_vjp(ins, params, out, g):
    x = ins[0]
    t = x.shape[0]
    return (np.broadcast_to(g / t, x.shape).copy(),)


def _sqdist_fwd(ins, params):
    a, b = ins
    _same_shape("squared-l2-distance", a, b)
    d = a - b
    return _arr((d * d).sum())


def _sqdist_vjp(ins, params, out, g):
    a, b = ins
    d = 2.0 * g * (a - b)
    return (d, -d)


def _tv_fwd(ins, params):
    x = ins[0]
    if x.ndim == 2:
        x3 = x[None]
    elif x.ndim == 3:
        x3 = x
    else:
        raise ValueError("total-variation: expects [H,W] or [C,H,W], got shape %s" % (x.shape,))
    dh = x3[:, 1:, :] - x3[:, :-1, :]
    dw = x3[:, :, 1:] - x3[:, :, :-1]
    return _arr((dh * dh).sum() + (dw * dw).sum())


def _tv_vjp(ins, params, out, g):
    x = ins[0]
    x3 = x[None] if x.ndim == 2 else x
    dh = x3[:, 1:, :] - x3[:, :-1, :]
    dw = x3[:, :, 1:] - x3[:, :, :-1]
    dx = np.zeros_like(x3)
    dx[:, 1:, :] += 2.0 * dh
    dx[:, :-1, :] -= 2.0 * dh
    dx[:, :, 1:] += 2.0 * dw
    dx[:, :, :-1] -= 2.0 * dw
    dx *= g
    return (dx[0] if x.ndim == 2 else dx,)


def _reshape_fwd(ins, params):
    x = ins[0]
    shape = tuple(params["shape"])
    if int(np.prod(shape)) != x.size:
        raise ValueError("reshape: cannot reshape %s to %s" % (x.shape, shape))
    return x.reshape(shape)


def _concat_fwd(ins, params):
    a, b = ins
    if a.ndim != b.ndim or a.shape[1:] != b.shape[1:]:
        raise _shape_error("concat", a.shape, b.shape)
    return np.concatenate([a, b], axis=0)


def _concat_vjp(ins, params, out, g):
    a, _ = ins
    return (g[: a.shape[0]], g[a.shape[0] :])


def _softplus_fwd(ins, params):
    return np.logaddexp(0.0, ins[0])


def _sp_prime(x):
    return _sigmoid(x)


def _sp_curv(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


PRIMITIVES = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (_add_fwd, lambda ins, p, o, g: (g, g)),
    "mul": (_mul_fwd, lambda ins, p, o, g: (g * ins[1], g * ins[0])),
    "scale": (_scale_fwd, lambda ins, p, o, g: (g * float(p["factor"]),)),
    "scalar-mul": (_scalar_mul_fwd, _scalar_mul_vjp),
    "conv2d": (_conv2d_fwd, _conv2d_vjp),
    "relu": (
        lambda ins, p: np.maximum(ins[0], 0.0),
        lambda ins, p, o, g: (g * (ins[0] > 0.0),),
    ),
    "softplus": (_softplus_fwd, lambda ins, p, o, g: (g * _sp_prime(ins[0]),)),
    "softplus-prime": (
        lambda ins, p: _sp_prime(ins[0]),
        lambda ins, p, o, g: (g * _sp_curv(ins[0]),),
    ),
    "softplus-curv": (
        lambda ins, p: _sp_curv(ins[0]),
        # third derivative: s(1-s)(1-2s)
        lambda ins, p, o, g: (g * _sp_curv(ins[0]) * (1.0 - 2.0 * _sp_prime(ins[0])),),
    ),
    "sqrt": (
        lambda ins, p: np.sqrt(ins[0]),
        lambda ins, p, o, g: (g / (2.0 * np.maximum(o, 1e-300)),),
    ),
    "reciprocal": (
        lambda ins, p: 1.0 / ins[0],
        lambda ins, p, o, g: (-g * o * o,),
    ),
    "l2-normalize": (_l2norm_fwd, _l2norm_vjp),
    "softmax": (_softmax_fwd, _softmax_vjp),
    "cross-entropy-with-index-target": (_xent_fwd, _xent_vjp),
    "mean-pool": (_meanpool_fwd, _meanpool_vjp),
    "squared-l2-distance": (_sqdist_fwd, _sqdist_vjp),
    "total-variation": (_tv_fwd, _tv_vjp),
    "reshape": (_reshape_fwd, lambda ins, p, o, g: (g.reshape(ins[0].shape),)),
    "concat": (_concat_fwd, _concat_vjp),
}


class Node:
    """One tape entry: a leaf, a constant, or a primitive application."""

    __slots__ = ("graph", "idx", "op", "inputs", "params", "value", "diff")

    def __init__(self, graph, idx, op, inputs, params, value, diff):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.params = params
        self.value = value
        self.diff = diff

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = self.op or ("leaf" if self.diff else "const")
        return "Node(%d, %s, shape=%s)" % (self.idx, kind, self.value.shape)


class Graph:
    """Append-only tape of primitive applications.

    Nodes are stored in the order they were created, which is a topological
    order by construction (an input must already exist to be referenced), so
    cycles cannot be formed and backward visits each node once.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _register(self, op, inputs, params, value, diff):
        value = _arr(value)
        if not np.isfinite(value).all():
            raise FloatingPointError("%s: non-finite values in output" % (op or "leaf"))
        node = Node(self, len(self.nodes), op, tuple(inputs), params, value, diff)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """A differentiable input."""
        return self._register(None, (), {}, value, True)

    def constant(self, value) -> Node:
        return self._register(None, (), {}, value, False)

    def apply(self, op: str, *inputs: Node, **params) -> Node:
        if op not in PRIMITIVES:
            raise ValueError("unknown primitive %r" % op)
        for x in inputs:
            if not isinstance(x, Node) or x.graph is not self:
                raise ValueError("%s: inputs must be nodes of this graph" % op)
        fwd, _ = PRIMITIVES[op]
        value = fwd(tuple(x.value for x in inputs), params)
        diff = any(x.diff for x in inputs)
        return self._register(op, inputs, params, value, diff)

    def forward(self, feed: dict) -> None:
        """Re-evaluate the whole tape with new values for the given leaves."""
        for node, value in feed.items():
            if node.op is not None:
                raise ValueError("forward: node %d is not a leaf" % node.idx)
            value = _arr(value)
            if value.shape != node.value.shape:
                raise _shape_error("forward feed", value.shape, node.value.shape)
            node.value = value
        for node in self.nodes:
            if node.op is None:
                continue
            fwd, _ = PRIMITIVES[node.op]
            node.value = fwd(tuple(x.value for x in node.inputs), node.params)
            if not np.isfinite(node.value).all():
                raise FloatingPointError("%s: non-finite values in output" % node.op)

    def backward(self, output: Node, seed=None) -> dict:
        """Gradients of `output` w.r.t. every differentiable leaf.

        Leaves with no path to the output get exact zeros. `seed` defaults
        to 1 for a scalar output and must match the output shape otherwise.
        """
        if output.graph is not self:
            raise ValueError("backward: output node belongs to a different graph")
        if seed is None:
            if output.value.shape != ():
                raise ValueError(
                    "backward: non-scalar output of shape %s needs an explicit seed"
                    % (output.value.shape,)
                )
            seed = np.float64(1.0)
        seed = _arr(seed)
        if seed.shape != output.value.shape:
            raise _shape_error("backward seed", seed.shape, output.value.shape)

        grads: dict[int, Array] = {output.idx: seed}
        for node in reversed(self.nodes[: output.idx + 1]):
            g = grads.pop(node.idx, None)
            if g is None or node.op is None:
                if g is not None and node.op is None:
                    grads[node.idx] = g  # keep leaf grads
                continue
            if not node.diff:
                continue
            _, vjp = PRIMITIVES[node.op]
            cots = vjp(tuple(x.value for x in node.inputs), node.params, node.value, g)
            for x, c in zip(node.inputs, cots):
                if not x.diff or c is None:
                    continue
                if x.idx in grads:
                    grads[x.idx] = grads[x.idx] + c
                else:
                    grads[x.idx] = _arr(c)

        result = {}
        for node in self.nodes:
            if node.op is None and node.diff:
                result[node] = grads.get(node.idx, np.zeros_like(node.value))
        return result

    def ops(self) -> list:
        """Primitive ids in tape order (diagnostics and structural tests)."""
        return [n.op for n in self.nodes if n.op is not None]


def apply_primitive(graph: Graph, name: str, inputs, **params) -> Node:
    """Functional alias for Graph.apply."""
    return graph.apply(name, *inputs, **params)


def activation_derivatives(graph: Graph, name: str, x: Node):
    """Value, first and second derivative of an activation, as graph nodes.

    Only softplus qualifies: its derivatives have closed forms that are
    themselves registered primitives, so expressions using them stay
    differentiable. relu is rejected because its second derivative does not
    exist at the kink.
    """
    if name == "relu":
        raise ValueError(
            "relu has no second derivative; a twice-differentiable activation "
            "(softplus) is required here"
        )
    if name != "softplus":
        raise ValueError("activation_derivatives: unsupported activation %r" % name)
    return (
        graph.apply("softplus", x),
        graph.apply("softplus-prime", x),
        graph.apply("softplus-curv", x),
    )


def grad_check(build, x, step: float = 1e-4) -> float:
    """Max relative error between the AD gradient and central differences.

    `build(graph, x_node)` must return a scalar node. The finite-difference
    side re-runs the same tape forward, so it shares no backward code with
    the gradient under test.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x = _arr(x)
    g = Graph()
    xn = g.leaf(x)
    out = build(g, xn)
    if out.value.shape != ():
        raise ValueError("grad_check: builder must produce a scalar output")
    ad = g.backward(out)[xn].ravel()

    worst = 0.0
    flat = x.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        g.forward({xn: xp.reshape(x.shape)})
        fp = float(out.value)
        xm = flat.copy()
        xm[i] -= step
        g.forward({xn: xm.reshape(x.shape)})
        fm = float(out.value)
        fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(ad[i] - fd) / (abs(fd) + 1e-8))
    g.forward({xn: x})
    return worst
