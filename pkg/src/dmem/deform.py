"""Deformable 2D convolution: learned fractional sampling offsets per kernel
tap, evaluated by bilinear interpolation, with gradients flowing to the input,
the kernel, the bias, and the offsets themselves.

Offset fields have shape (n, 2*k*k, oh, ow): for tap t in row-major kernel
order, channel 2t is the vertical offset and channel 2t+1 the horizontal one,
both in pixels. An all-zero field reproduces regular convolution bit-exactly.

Positions outside the image sample the value 0 and send no gradient to the
input. Interpolation uses the product of 1D hat kernels; at exactly integer
positions the derivative takes the hat function's left-sided slope (corners
are anchored at ceil(p) - 1), so gradient checks should probe offsets away
from integer coordinates.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .tensor import Op, ShapeError, Tensor, conv2d

__all__ = [
    "kernel_grid",
    "bilinear_sample",
    "deformable_conv2d",
    "OffsetPredictor",
    "DeformConv2dLayer",
]


def kernel_grid(k):
    """Centered relative tap positions of a k x k kernel, row-major.

    Odd k only; for k=3 this is (-1,-1), (-1,0), ..., (0,1), (1,1).
    """
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"kernel_grid needs an odd kernel size, got {k}")
    r = k // 2
    return np.array([(i - r, j - r) for i in range(k) for j in range(k)], dtype=np.int64)


@njit(cache=True)
def _gather_cols(x, off, pad, k, cols):
    """Sample x at each tap's offset position into an im2col-style matrix.

    cols has shape (n, cin*k*k, oh*ow) with row index ci*k*k + t, matching
    a (cout, cin*k*k) reshape of the kernel.
    """
    n, cin, h, w = x.shape
    k2 = k * k
    oh = off.shape[2]
    ow = off.shape[3]
    for nn in range(n):
        for t in range(k2):
            ti = t // k
            tj = t % k
            for oy in range(oh):
                for ox in range(ow):
                    py = oy - pad + ti + off[nn, 2 * t, oy, ox]
                    px = ox - pad + tj + off[nn, 2 * t + 1, oy, ox]
                    y0 = int(np.ceil(py)) - 1
                    x0 = int(np.ceil(px)) - 1
                    fy = py - y0
                    fx = px - x0
                    y1 = y0 + 1
                    x1 = x0 + 1
                    w00 = (1.0 - fy) * (1.0 - fx)
                    w01 = (1.0 - fy) * fx
                    w10 = fy * (1.0 - fx)
                    w11 = fy * fx
                    in00 = y0 >= 0 and y0 < h and x0 >= 0 and x0 < w
                    in01 = y0 >= 0 and y0 < h and x1 >= 0 and x1 < w
                    in10 = y1 >= 0 and y1 < h and x0 >= 0 and x0 < w
                    in11 = y1 >= 0 and y1 < h and x1 >= 0 and x1 < w
                    m = oy * ow + ox
                    for ci in range(cin):
                        v = 0.0
                        if in00:
                            v += w00 * x[nn, ci, y0, x0]
                        if in01:
                            v += w01 * x[nn, ci, y0, x1]
                        if in10:
                            v += w10 * x[nn, ci, y1, x0]
                        if in11:
                            v += w11 * x[nn, ci, y1, x1]
                        cols[nn, ci * k2 + t, m] = v


@njit(cache=True)
def _scatter_grads(x, off, pad, k, gcols, gx, goff):
    """Push column gradients back to the input (4-corner scatter) and to the
    offsets (chain rule through the interpolation weights)."""
    n, cin, h, w = x.shape
    k2 = k * k
    oh = off.shape[2]
    ow = off.shape[3]
    for nn in range(n):
        for t in range(k2):
            ti = t // k
            tj = t % k
            for oy in range(oh):
                for ox in range(ow):
                    py = oy - pad + ti + off[nn, 2 * t, oy, ox]
                    px = ox - pad + tj + off[nn, 2 * t + 1, oy, ox]
                    y0 = int(np.ceil(py)) - 1
                    x0 = int(np.ceil(px)) - 1
                    fy = py - y0
                    fx = px - x0
                    y1 = y0 + 1
                    x1 = x0 + 1
                    w00 = (1.0 - fy) * (1.0 - fx)
                    w01 = (1.0 - fy) * fx
                    w10 = fy * (1.0 - fx)
                    w11 = fy * fx
                    in00 = y0 >= 0 and y0 < h and x0 >= 0 and x0 < w
                    in01 = y0 >= 0 and y0 < h and x1 >= 0 and x1 < w
                    in10 = y1 >= 0 and y1 < h and x0 >= 0 and x0 < w
                    in11 = y1 >= 0 and y1 < h and x1 >= 0 and x1 < w
                    m = oy * ow + ox
                    sy = 0.0
                    sx = 0.0
                    for ci in range(cin):
                        g = gcols[nn, ci * k2 + t, m]
                        v00 = 0.0
                        v01 = 0.0
                        v10 = 0.0
                        v11 = 0.0
                        if in00:
                            v00 = x[nn, ci, y0, x0]
                            gx[nn, ci, y0, x0] += g * w00
                        if in01:
                            v01 = x[nn, ci, y0, x1]
                            gx[nn, ci, y0, x1] += g * w01
                        if in10:
                            v10 = x[nn, ci, y1, x0]
                            gx[nn, ci, y1, x0] += g * w10
                        if in11:
                            v11 = x[nn, ci, y1, x1]
                            gx[nn, ci, y1, x1] += g * w11
                        sy += g * (-(1.0 - fx) * v00 - fx * v01 + (1.0 - fx) * v10 + fx * v11)
                        sx += g * (-(1.0 - fy) * v00 + (1.0 - fy) * v01 - fy * v10 + fy * v11)
                    goff[nn, 2 * t, oy, ox] = sy
                    goff[nn, 2 * t + 1, oy, ox] = sx


class _BilinearSample(Op):
    def forward(self, x, p):
        if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 1:
            raise ShapeError(f"bilinear_sample needs a (1,1,h,w) channel plane, got {x.shape}")
        if p.shape != (2,):
            raise ShapeError(f"bilinear_sample position must have shape (2,), got {p.shape}")
        if not np.isfinite(p).all():
            raise ValueError(f"bilinear_sample position must be finite, got {p}")
        h, w = x.shape[2], x.shape[3]
        py, px = float(p[0]), float(p[1])
        y0 = int(np.ceil(py)) - 1
        x0 = int(np.ceil(px)) - 1
        fy, fx = py - y0, px - x0
        corners = []  # (yi, xi, weight, value)
        for yi, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
            for xi, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
                inside = 0 <= yi < h and 0 <= xi < w
                corners.append((yi, xi, wy * wx, x[0, 0, yi, xi] if inside else 0.0))
        self.geom = (y0, x0, fy, fx, h, w)
        self.corners = corners
        return np.asarray(sum(wgt * val for _, _, wgt, val in corners))

    def backward(self, grad):
        y0, x0, fy, fx, h, w = self.geom
        g = float(grad)
        gx = np.zeros((1, 1, h, w))
        for yi, xi, wgt, _ in self.corners:
            if 0 <= yi < h and 0 <= xi < w:
                gx[0, 0, yi, xi] += g * wgt
        (v00, v01, v10, v11) = (c[3] for c in self.corners)
        dvdy = -(1 - fx) * v00 - fx * v01 + (1 - fx) * v10 + fx * v11
        dvdx = -(1 - fy) * v00 + (1 - fy) * v01 - fy * v10 + fy * v11
        return gx, np.array([g * dvdy, g * dvdx])


def bilinear_sample(x, p):
    """Sample a (1,1,h,w) plane at the fractional position p = (y, x).

    Returns a scalar tensor; differentiable in both the plane values and the
    position. Out-of-bounds neighbors contribute 0.
    """
    return _BilinearSample.apply(x, p)


class _DeformableConv2d(Op):
    def forward(self, x, w, b, off, pad=1):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"deformable_conv2d needs rank-4 input/kernel, got {x.shape} / {w.shape}")
        n, cin, h, wd = x.shape
        cout, cin_w, kh, kw = w.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"deformable_conv2d kernel must be square with odd size, got {w.shape}")
        if cin != cin_w:
            raise ShapeError(
                f"deformable_conv2d channel mismatch: input {x.shape} has {cin} channels, "
                f"kernel {w.shape} expects {cin_w}")
        if b.shape != (cout,):
            raise ShapeError(f"deformable_conv2d bias must have shape ({cout},), got {b.shape}")
        k = kh
        oh = h + 2 * pad - k + 1
        ow = wd + 2 * pad - k + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"deformable_conv2d input {x.shape} too small for kernel {w.shape}")
        if off.shape != (n, 2 * k * k, oh, ow):
            raise ShapeError(
                f"offset field shape {off.shape} does not match expected {(n, 2 * k * k, oh, ow)} "
                f"(2*k*k = {2 * k * k} channels for k = {k})")
        self.pad, self.k = pad, k
        cols = np.empty((n, cin * k * k, oh * ow), dtype=np.float64)
        _gather_cols(x, off, pad, k, cols)
        out = np.matmul(w.reshape(cout, -1)[None], cols) + b[:, None]
        return out.reshape(n, cout, oh, ow)

    def backward(self, grad):
        x, w, b, off = (t.data for t in self.parents)
        n, cin = x.shape[0], x.shape[1]
        cout = w.shape[0]
        k, pad = self.k, self.pad
        g2 = grad.reshape(n, cout, -1)
        cols = np.empty((n, cin * k * k, g2.shape[2]), dtype=np.float64)
        _gather_cols(x, off, pad, k, cols)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = grad.sum(axis=(0, 2, 3))
        gcols = np.matmul(w.reshape(cout, -1).T[None], g2)
        gx = np.zeros_like(x)
        goff = np.zeros_like(off)
        _scatter_grads(x, off, pad, k, np.ascontiguousarray(gcols), gx, goff)
        return gx, gw, gb, goff


def deformable_conv2d(x, w, b, offsets, pad=1):
    """Convolution whose taps sample at per-pixel fractional offsets (stride 1).

    x: (n, cin, h, w); w: (cout, cin, k, k) with odd k; b: (cout,);
    offsets: (n, 2*k*k, oh, ow) as described in the module docstring.
    """
    return _DeformableConv2d.apply(x, w, b, offsets, pad=pad)


class OffsetPredictor:
    """Companion 3x3 convolution that maps features to an offset field.

    Weights and bias start at exactly zero, so a freshly built layer behaves
    like regular convolution until training moves the offsets.
    """

    def __init__(self, cin, k):
        self.k = k
        self.w = Tensor(np.zeros((2 * k * k, cin, 3, 3)), requires_grad=True)
        self.b = Tensor(np.zeros(2 * k * k), requires_grad=True)

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=1, pad=1)

    def named_params(self, prefix):
        return [
            (f"{prefix}.w", self.w, "zero", 0),
            (f"{prefix}.b", self.b, "zero", 0),
        ]


class DeformConv2dLayer:
    """Deformable 3x3 convolution with its own offset predictor."""

    def __init__(self, cin, cout, k=3, pad=1):
        self.pad = pad
        self.w = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.offset_predictor = OffsetPredictor(cin, k)

    def __call__(self, x):
        offsets = self.offset_predictor(x)
        return deformable_conv2d(x, self.w, self.b, offsets, pad=self.pad)

    def named_params(self, prefix):
        fan_in = self.w.data.shape[1] * self.w.data.shape[2] * self.w.data.shape[3]
        return [
            (f"{prefix}.w", self.w, "he", fan_in),
            (f"{prefix}.b", self.b, "zero", 0),
        ] + self.offset_predictor.named_params(f"{prefix}.offset")
