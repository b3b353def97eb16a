"""Rank-4 tensors with reverse-mode automatic differentiation.

Everything is float64 and channel-first: value buffers are laid out row-major
as (batch, channels, height, width); biases are rank-1. Each operation records
a graph node holding its input tensors, and ``backward`` replays the recorded
graph in reverse topological order, accumulating (never overwriting) gradients
into every tensor that requires them.

Convolutions run through im2col / col2im so the heavy lifting is a single
batched matmul; the column matrices are rebuilt during backward instead of
being kept alive, which keeps peak memory proportional to the activations.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class NumericalError(RuntimeError):
    """Raised when a computation produces or encounters non-finite values."""


class Tensor:
    """A dense float64 array plus an optional gradient and graph node.

    ``op`` is None for leaves (parameters, inputs); for derived tensors it is
    the producing operation, which keeps references to the parent tensors.
    """

    def __init__(self, data, requires_grad=False, op=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        kind = "leaf" if self.op is None else type(self.op).__name__
        return f"Tensor(shape={self.data.shape}, node={kind}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def sum(self):
        return _Sum.apply(self)

    def backward(self):
        backward(self)

    # Small elementwise helpers, mainly for building test losses. Same-shape
    # only; scalars go through _Scale / _Shift.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return _Add.apply(self, other)
        return _Shift.apply(self, offset=float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _Mul.apply(self, other)
        return _Scale.apply(self, factor=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return _Scale.apply(self, factor=-1.0)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))


class Op:
    """Base graph node. Subclasses implement forward/backward on raw arrays.

    ``backward`` receives dLoss/dOutput and returns one gradient array (or
    None) per parent, in parent order.
    """

    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *tensors, **kwargs):
        op = cls(*tensors)
        out = op.forward(*(t.data for t in tensors), **kwargs)
        requires = any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires, op=op if requires else None)

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class GraphTape:
    """The recorded compute graph in topological order (inputs first).

    Replaying it backward visits each node exactly once and accumulates
    gradients into every tensor marked as requiring them.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, output):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.op is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.op.parents:
                stack.append((p, False))
        return cls(order)

    def replay_backward(self, output, seed):
        flows = {id(output): np.asarray(seed, dtype=np.float64)}
        tensors = {id(output): output}
        for t in reversed(self.nodes):
            g = flows.pop(id(t), None)
            tensors.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            parent_grads = t.op.backward(g)
            for p, pg in zip(t.op.parents, parent_grads):
                if pg is None or not (p.requires_grad or p.op is not None):
                    continue
                k = id(p)
                flows[k] = pg if k not in flows else flows[k] + pg
                tensors[k] = p
        # whatever is left in flows belongs to leaves
        for k, g in flows.items():
            t = tensors[k]
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss):
    """Accumulate dLoss/dLeaf into every leaf that requires gradients."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.op is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    GraphTape.trace(loss).replay_backward(loss, np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# im2col plumbing shared by conv2d and transposed_conv2d


def _im2col(x, k, stride, pad):
    """(n,c,h,w) -> (n, c*k*k, oh*ow) patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(cols, x_shape, k, stride, pad):
    """Adjoint of _im2col: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(n, c, k, k, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def _require_rank4(name, a):
    if a.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n,c,h,w), got shape {a.shape}")


class _Conv2d(Op):
    def forward(self, x, w, b, stride=1, pad=0):
        _require_rank4("conv2d input", x)
        _require_rank4("conv2d kernel", w)
        if stride < 1 or pad < 0:
            raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
        n, cin, h, wd = x.shape
        cout, cin_w, kh, kw = w.shape
        if kh != kw:
            raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
        if cin != cin_w:
            raise ShapeError(
                f"conv2d channel mismatch: input {x.shape} has {cin} channels, "
                f"kernel {w.shape} expects {cin_w}")
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
        if h + 2 * pad < kh or wd + 2 * pad < kw:
            raise ShapeError(f"conv2d input {x.shape} too small for kernel {w.shape} at pad {pad}")
        self.stride, self.pad = stride, pad
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (wd + 2 * pad - kw) // stride + 1
        cols = _im2col(x, kh, stride, pad)
        out = np.matmul(w.reshape(cout, -1)[None], cols) + b[:, None]
        return out.reshape(n, cout, oh, ow)

    def backward(self, grad):
        x, w, b = (t.data for t in self.parents)
        n = x.shape[0]
        cout, _, kh, _ = w.shape
        g2 = grad.reshape(n, cout, -1)
        cols = _im2col(x, kh, self.stride, self.pad)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = grad.sum(axis=(0, 2, 3))
        gcols = np.matmul(w.reshape(cout, -1).T[None], g2)
        gx = _col2im(gcols, x.shape, kh, self.stride, self.pad)
        return gx, gw, gb


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlate x with kernel w and add bias.

    x: (n, cin, h, w); w: (cout, cin, k, k); b: (cout,).
    Output spatial dims are floor((h + 2*pad - k)/stride) + 1.
    """
    return _Conv2d.apply(x, w, b, stride=stride, pad=pad)


class _TransposedConv2d(Op):
    def forward(self, x, w, b=None, stride=2, pad=1, output_padding=1):
        _require_rank4("transposed_conv2d input", x)
        _require_rank4("transposed_conv2d kernel", w)
        n, cin, h, wd = x.shape
        cin_w, cout, kh, kw = w.shape
        if kh != kw:
            raise ShapeError(f"transposed_conv2d kernel must be square, got {w.shape}")
        if cin != cin_w:
            raise ShapeError(
                f"transposed_conv2d channel mismatch: input {x.shape} has {cin} channels, "
                f"kernel {w.shape} expects {cin_w}")
        if output_padding >= stride:
            raise ShapeError(f"output_padding {output_padding} must be < stride {stride}")
        self.stride, self.pad, self.outp = stride, pad, output_padding
        self.has_bias = b is not None
        oh = (h - 1) * stride - 2 * pad + kh + output_padding
        ow = (wd - 1) * stride - 2 * pad + kw + output_padding
        if oh < 1 or ow < 1:
            raise ShapeError(f"transposed_conv2d output would be empty for input {x.shape}")
        a = w.reshape(cin, cout * kh * kw)
        cols = np.matmul(a.T[None], x.reshape(n, cin, h * wd))
        cols = cols.reshape(n, cout, kh, kw, h, wd)
        buf = np.zeros((n, cout, (h - 1) * stride + kh + output_padding,
                        (wd - 1) * stride + kw + output_padding), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                buf[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += cols[:, :, i, j]
        out = buf[:, :, pad:pad + oh, pad:pad + ow]
        if self.has_bias:
            out = out + b[:, None, None]
        return out

    def backward(self, grad):
        x, w = self.parents[0].data, self.parents[1].data
        n, cin, h, wd = x.shape
        _, cout, kh, kw = w.shape
        s, p = self.stride, self.pad
        buf = np.zeros((n, cout, (h - 1) * s + kh + self.outp, (wd - 1) * s + kw + self.outp),
                       dtype=np.float64)
        buf[:, :, p:p + grad.shape[2], p:p + grad.shape[3]] = grad
        gcols = np.empty((n, cout, kh, kw, h, wd), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, i, j] = buf[:, :, i:i + s * h:s, j:j + s * wd:s]
        gcols2 = gcols.reshape(n, cout * kh * kw, h * wd)
        a = w.reshape(cin, cout * kh * kw)
        gx = np.matmul(a[None], gcols2).reshape(x.shape)
        gw = np.matmul(x.reshape(n, cin, h * wd), gcols2.transpose(0, 2, 1)).sum(axis=0)
        out = [gx, gw.reshape(w.shape)]
        if self.has_bias:
            out.append(grad.sum(axis=(0, 2, 3)))
        return tuple(out)


def transposed_conv2d(x, w, b=None, stride=2, pad=1, output_padding=1):
    """Fractionally-strided convolution (the adjoint of conv2d).

    x: (n, cin, h, w); w: (cin, cout, k, k). With the defaults (k=3, stride 2,
    pad 1, output_padding 1) the spatial dims exactly double.
    """
    if b is None:
        return _TransposedConv2d.apply(x, w, stride=stride, pad=pad, output_padding=output_padding)
    return _TransposedConv2d.apply(x, w, b, stride=stride, pad=pad, output_padding=output_padding)


class _Relu(Op):
    def forward(self, x):
        self.mask = x > 0  # relu'(0) := 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (np.where(self.mask, grad, 0.0),)


def relu(x):
    return _Relu.apply(x)


class _MaxPool2d(Op):
    def forward(self, x, k=2, stride=2):
        _require_rank4("max_pool2d input", x)
        if k != 2 or stride != 2:
            raise ShapeError(f"max_pool2d supports k=2, stride=2 only, got k={k} stride={stride}")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max_pool2d needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        self.argmax = win.argmax(axis=-1)  # ties resolve to the first window element
        self.x_shape = x.shape
        return win.max(axis=-1)

    def backward(self, grad):
        n, c, h, w = self.x_shape
        onehot = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
        np.put_along_axis(onehot, self.argmax[..., None], 1.0, axis=-1)
        gwin = onehot * grad[..., None]
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)


def max_pool2d(x, k=2, stride=2):
    return _MaxPool2d.apply(x, k=k, stride=stride)


class _ConcatChannels(Op):
    def forward(self, *xs):
        if not xs:
            raise ShapeError("concat_channels needs at least one input")
        base = xs[0].shape
        for a in xs:
            _require_rank4("concat_channels input", a)
            if a.shape[0] != base[0] or a.shape[2:] != base[2:]:
                raise ShapeError(
                    "concat_channels inputs must agree on batch and spatial dims, got "
                    + " vs ".join(str(x.shape) for x in xs))
        self.sizes = [a.shape[1] for a in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        grads, start = [], 0
        for c in self.sizes:
            grads.append(grad[:, start:start + c])
            start += c
        return tuple(grads)


def concat_channels(xs):
    return _ConcatChannels.apply(*xs)


class _ChannelSlice(Op):
    def forward(self, x, start=0, stop=None):
        _require_rank4("channel_slice input", x)
        self.start, self.stop = start, stop
        self.x_shape = x.shape
        return x[:, start:stop].copy()

    def backward(self, grad):
        gx = np.zeros(self.x_shape, dtype=np.float64)
        gx[:, self.start:self.stop] = grad
        return (gx,)


def channel_slice(x, start, stop):
    """View x's channel range [start, stop) as a new tensor."""
    return _ChannelSlice.apply(x, start=start, stop=stop)


def split_channels(x, sizes):
    """Split x into tensors of the given channel counts, in order."""
    if sum(sizes) != x.data.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not cover {x.data.shape[1]} channels")
    parts, start = [], 0
    for c in sizes:
        parts.append(channel_slice(x, start, start + c))
        start += c
    return parts


class _SoftmaxChannels(Op):
    def forward(self, x):
        _require_rank4("softmax_channels input", x)
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self.s = e / e.sum(axis=1, keepdims=True)
        return self.s

    def backward(self, grad):
        s = self.s
        return (s * (grad - (grad * s).sum(axis=1, keepdims=True)),)


def softmax_channels(x):
    """Per-pixel softmax over the channel axis; channels sum to 1 everywhere."""
    return _SoftmaxChannels.apply(x)


class _CrossEntropyLoss(Op):
    def forward(self, logits, target=None, class_weights=None):
        _require_rank4("cross_entropy logits", logits)
        n, c, h, w = logits.shape
        target = np.asarray(target)
        if target.shape != (n, h, w):
            raise ShapeError(
                f"cross_entropy target shape {target.shape} must match logits spatial dims {(n, h, w)}")
        if not np.issubdtype(target.dtype, np.integer):
            raise ShapeError(f"cross_entropy target must be integer labels, got dtype {target.dtype}")
        if target.size and (target.min() < 0 or target.max() >= c):
            bad = int(target.min()) if target.min() < 0 else int(target.max())
            raise ValueError(f"cross_entropy target label {bad} outside [0, {c})")
        weights = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
        if weights.shape != (c,):
            raise ShapeError(f"class_weights must have shape ({c},), got {weights.shape}")
        m = logits.max(axis=1, keepdims=True)
        z = logits - m
        lse = np.log(np.exp(z).sum(axis=1))  # (n,h,w)
        picked = np.take_along_axis(z, target[:, None], axis=1)[:, 0]
        self.target, self.weights = target, weights
        self.z, self.lse = z, lse
        self.npix = n * h * w
        return np.asarray((weights[target] * (lse - picked)).sum() / self.npix)

    def backward(self, grad):
        p = np.exp(self.z - self.lse[:, None])
        wmap = self.weights[self.target][:, None]  # (n,1,h,w)
        g = p * wmap
        np.put_along_axis(
            g, self.target[:, None],
            np.take_along_axis(g, self.target[:, None], axis=1) - wmap, axis=1)
        return (g * (float(grad) / self.npix),)


def cross_entropy_loss(logits, target, class_weights=None):
    """Mean over pixels of the weighted negative log softmax probability.

    target is an integer label map of shape (n, h, w); class_weights, when
    given, scales each pixel's term by the weight of its true class.
    """
    return _CrossEntropyLoss.apply(logits, target=target, class_weights=class_weights)


class _Sum(Op):
    def forward(self, x):
        self.x_shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.full(self.x_shape, float(grad)),)


class _Add(Op):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add needs matching shapes, got {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


class _Mul(Op):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul needs matching shapes, got {a.shape} vs {b.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class _Scale(Op):
    def forward(self, x, factor=1.0):
        self.factor = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


class _Shift(Op):
    def forward(self, x, offset=0.0):
        return x + offset

    def backward(self, grad):
        return (grad,)


class _ScaleGrad(Op):
    """Identity forward, scaled backward. Used to inject a known-bad gradient
    so the gradient-check harness can prove it detects failures."""

    def forward(self, x, factor=1.0):
        self.factor = factor
        return x.copy()

    def backward(self, grad):
        return (grad * self.factor,)


def scale_grad(x, factor):
    return _ScaleGrad.apply(x, factor=factor)


def grad_check(f, inputs, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f must map the given leaf tensors to a scalar tensor. The error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None

    def run():
        out = f(*inputs)
        if out.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued f, got shape {out.data.shape}")
        if not np.isfinite(out.data).all():
            raise NumericalError("grad_check: f produced a non-finite value")
        return out

    out = run()
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        for i in range(t.data.size):
            orig = t.data.flat[i]
            t.data.flat[i] = orig + h
            fp = run().data
            t.data.flat[i] = orig - h
            fm = run().data
            t.data.flat[i] = orig
            numeric.flat[i] = (float(fp) - float(fm)) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        err = float((np.abs(analytic - numeric) / denom).max()) if t.data.size else 0.0
        worst = max(worst, err)
    return worst
