"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run engine: every operation records its input tensors and
a gradient closure on the output. Calling :func:`backward` on a scalar loss
walks the recorded graph in reverse topological order and accumulates
gradients into ``Tensor.grad`` for every tensor with ``requires_grad``.

Design constraints honoured throughout:

* float64 everywhere, so finite-difference checks stay sharp;
* NCHW layout for image tensors;
* no implicit broadcasting (elementwise ops demand identical shapes, the one
  sanctioned exception being ``channel_bias``);
* graphs are rebuilt on every forward pass, which keeps alternating
  optimisation of two networks trivially correct.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

Number = (int, float, np.integer, np.floating)


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph management ----------------------------------------------

    def _in_graph(self) -> bool:
        return self.requires_grad or self._grad_fn is not None

    def detach(self) -> "Tensor":
        """Same data, cut off from the recorded graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __truediv__(self, other):
        return div(self, other)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean_(self)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(data: np.ndarray, parents, grad_fn) -> Tensor:
    """Create the result tensor, recording the op iff a parent needs grads."""
    out = Tensor(data)
    if any(p._in_graph() for p in parents):
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor.

    ``loss`` must be a scalar. Repeated calls without zeroing gradients add
    their contributions, matching the usual accumulate-then-step pattern.
    """
    if loss.size != 1:
        raise UsageError(
            f"backward expects a scalar loss, got shape {loss.shape}"
        )

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent._in_graph():
                stack.append((parent, False))

    # Pass-local flow buffers keep repeated backward() calls independent.
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        upstream = flow.pop(id(node), None)
        if upstream is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += upstream
        if node._grad_fn is None:
            continue
        grads = node._grad_fn(upstream)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent._in_graph():
                continue
            key = id(parent)
            if key in flow:
                flow[key] = flow[key] + grad
            else:
                flow[key] = grad


def check_finite(t: Tensor, context: str = "tensor"):
    if not np.all(np.isfinite(t.data)):
        raise UsageError(f"{context} contains non-finite values")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(
            f"{op}: operand shapes {a.shape} and {b.shape} differ"
        )


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Number):
        return _record(a.data + float(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    _require_same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Number):
        s = float(b)
        return _record(a.data * s, (a,), lambda g: (g * s,))
    b = _as_tensor(b)
    _require_same_shape(a, b, "mul")

    def grad_fn(g):
        return (g * b.data, g * a.data)

    return _record(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Number):
        return mul(a, 1.0 / float(b))
    b = _as_tensor(b)
    _require_same_shape(a, b, "div")

    def grad_fn(g):
        return (g / b.data, -g * a.data / (b.data * b.data))

    return _record(a.data / b.data, (a, b), grad_fn)


def sum_(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        return (np.full(shape, float(g)),)

    return _record(np.sum(a.data), (a,), grad_fn)


def mean_(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size

    def grad_fn(g):
        return (np.full(shape, float(g) / n),)

    return _record(np.mean(a.data), (a,), grad_fn)


def abs_(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sign,))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn
    )


# ---------------------------------------------------------------------------
# activations and regularisers
# ---------------------------------------------------------------------------


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in [0, 1), got {slope}")
    a = _as_tensor(a)
    factor = np.where(a.data > 0.0, 1.0, slope)
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise form avoids overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated stably; derivative is sigmoid(x)."""
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    s = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * s,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the sampled mask is reused in the backward pass."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    a = _as_tensor(a)
    if rate == 0.0:
        return _record(a.data.copy(), (a,), lambda g: (g,))
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_geometry(h, w, kh, kw, stride, padding, op):
    if stride < 1:
        raise ConfigError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"{op}: padding must be >= 0, got {padding}")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_w < 0:
        raise DimensionError(
            f"{op}: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if span_h % stride or span_w % stride:
        raise ConfigError(
            f"{op}: spatial size {h}x{w} with kernel {kh}x{kw}, stride {stride}, "
            f"padding {padding} does not divide exactly"
        )
    return span_h // stride + 1, span_w // stride + 1


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """(N, C, Hp, Wp) -> (N, oh*ow, C*kh*kw) patch matrix."""
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride][:, :, :oh, :ow]
    n, c = padded.shape[:2]
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, n, c, hp, wp, kh, kw, stride, oh, ow):
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the canvas."""
    out = np.zeros((n, c, hp, wp))
    patches = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                patches[:, :, i, j]
            )
    return out


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an (O, I, Kh, Kw) kernel."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise DimensionError(
            f"conv2d: input has {c} channels but kernel expects {ci}"
        )
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding, "conv2d")

    padded = _pad(x.data, padding)
    cols = _im2col(padded, kh, kw, stride, oh, ow)
    wmat = kernel.data.reshape(o, ci * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, o, oh, ow)

    def grad_fn(g):
        gcols = g.reshape(n, o, oh * ow).transpose(0, 2, 1)  # (N, L, O)
        gw = (gcols.reshape(-1, o).T @ cols.reshape(-1, ci * kh * kw)) \
            .reshape(kernel.shape)
        gx_cols = gcols @ wmat  # (N, L, C*kh*kw)
        gx_pad = _col2im(gx_cols, n, c, h + 2 * padding, w + 2 * padding,
                         kh, kw, stride, oh, ow)
        if padding:
            gx = gx_pad[:, :, padding:-padding, padding:-padding]
        else:
            gx = gx_pad
        return (gx, gw)

    return _record(out, (x, kernel), grad_fn)


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Exact linear adjoint of :func:`conv2d`.

    The kernel is laid out (C_in, C_out, Kh, Kw); with stride 2, a 4x4 kernel
    and padding 1 the spatial dimensions double.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    ci, co, kh, kw = kernel.shape
    if c != ci:
        raise DimensionError(
            f"conv2d_transpose: input has {c} channels but kernel expects {ci}"
        )
    if stride < 1:
        raise ConfigError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d_transpose: padding must be >= 0, got {padding}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d_transpose: output size {oh}x{ow} is empty for input {h}x{w}"
        )

    wmat = kernel.data.reshape(ci, co * kh * kw)
    x_l = x.data.reshape(n, ci, h * w).transpose(0, 2, 1)  # (N, L, Cin)
    cols = x_l @ wmat  # (N, L, Cout*kh*kw)
    out_pad = _col2im(cols, n, co, oh + 2 * padding, ow + 2 * padding,
                      kh, kw, stride, h, w)
    out = out_pad[:, :, padding:-padding, padding:-padding] if padding else out_pad

    def grad_fn(g):
        gpad = _pad(g, padding)
        gcols = _im2col(gpad, kh, kw, stride, h, w)  # (N, L, Cout*kh*kw)
        gx = (gcols @ wmat.T).transpose(0, 2, 1).reshape(n, ci, h, w)
        gw = (x_l.reshape(-1, ci).T @ gcols.reshape(-1, co * kh * kw)) \
            .reshape(kernel.shape)
        return (gx, gw)

    return _record(out, (x, kernel), grad_fn)


# ---------------------------------------------------------------------------
# normalisation and bias
# ---------------------------------------------------------------------------


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial axes.

    Valid for batch size 1, unlike batch norm, which matters because the
    adversarial training loop runs small batches.
    """
    x = _as_tensor(x)
    gain = _as_tensor(gain)
    bias = _as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 2:
        raise ConfigError("instance_norm requires at least 2 spatial elements")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"instance_norm: gain/bias must have shape ({c},), got {gain.shape} and {bias.shape}"
        )

    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    g4 = gain.data[None, :, None, None]
    out = g4 * xn + bias.data[None, :, None, None]

    def grad_fn(g):
        dxn = g * g4
        d_mean = dxn.mean(axis=(2, 3), keepdims=True)
        d_proj = (dxn * xn).mean(axis=(2, 3), keepdims=True)
        gx = inv * (dxn - d_mean - xn * d_proj)
        ggain = (g * xn).sum(axis=(0, 2, 3))
        gbias = g.sum(axis=(0, 2, 3))
        return (gx, ggain, gbias)

    return _record(out, (x, gain, bias), grad_fn)


def channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    x = _as_tensor(x)
    bias = _as_tensor(bias)
    if x.ndim != 4 or bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(
            f"channel_bias: input {x.shape} incompatible with bias {bias.shape}"
        )

    def grad_fn(g):
        return (g, g.sum(axis=(0, 2, 3)))

    return _record(x.data + bias.data[None, :, None, None], (x, bias), grad_fn)
