"""Dense blocks and the stage connectors of the U-shaped network.

A dense block of L layers, each adding g channels, maps c input channels to
c + L*g: layer l consumes the concatenation of the block input with every
previous layer's output, applies relu then a 3x3 convolution (regular or
deformable), and contributes exactly g new channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deform import DeformConv2dLayer
from .tensor import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    max_pool2d,
    relu,
    transposed_conv2d,
)


@dataclass
class DenseBlockConfig:
    num_layers: int
    growth_rate: int
    deformable: bool = False

    def __post_init__(self):
        if self.num_layers < 1 or self.growth_rate < 1:
            raise ValueError(
                f"dense block needs num_layers >= 1 and growth_rate >= 1, "
                f"got L={self.num_layers} g={self.growth_rate}")


class Conv2dLayer:
    """Plain convolution layer owning its kernel and bias."""

    def __init__(self, cin, cout, k, stride=1, pad=0):
        self.stride, self.pad = stride, pad
        self.w = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def named_params(self, prefix):
        fan_in = int(np.prod(self.w.data.shape[1:]))
        return [(f"{prefix}.w", self.w, "he", fan_in), (f"{prefix}.b", self.b, "zero", 0)]


class DenseLayer:
    """relu -> 3x3 conv (pad 1), producing growth_rate channels."""

    def __init__(self, cin, cfg: DenseBlockConfig):
        if cfg.deformable:
            self.conv = DeformConv2dLayer(cin, cfg.growth_rate, k=3, pad=1)
        else:
            self.conv = Conv2dLayer(cin, cfg.growth_rate, k=3, pad=1)

    def __call__(self, x):
        return self.conv(relu(x))

    def named_params(self, prefix):
        return self.conv.named_params(f"{prefix}.conv")


class DenseBlock:
    """Stack of dense layers; output concatenates the input with every
    layer's channels, so out_channels = in_channels + L * growth_rate."""

    def __init__(self, cin, cfg: DenseBlockConfig):
        self.cfg = cfg
        self.in_channels = cin
        self.layers = [DenseLayer(cin + i * cfg.growth_rate, cfg) for i in range(cfg.num_layers)]
        self.out_channels = cin + cfg.num_layers * cfg.growth_rate

    def __call__(self, x, trace=None):
        state = x
        features = [x]
        for layer in self.layers:
            if trace is not None:
                trace.append(state)
            new = layer(state)
            features.append(new)
            state = concat_channels(features)
        return state

    def named_params(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}.layer{i}"))
        return out


class TransitionDown:
    """1x1 conv (channel count preserved) then 2x2 max pool: halves both
    spatial dims, which must be even."""

    def __init__(self, channels):
        self.conv = Conv2dLayer(channels, channels, k=1)

    def __call__(self, x):
        h, w = x.data.shape[2], x.data.shape[3]
        if h % 2 or w % 2:
            raise ShapeError(f"transition_down needs even spatial dims, got {h}x{w}")
        return max_pool2d(self.conv(x))

    def named_params(self, prefix):
        return self.conv.named_params(f"{prefix}.conv")


class TransitionUp:
    """3x3 transposed conv, stride 2: exactly doubles both spatial dims."""

    def __init__(self, cin, cout):
        self.w = Tensor(np.zeros((cin, cout, 3, 3)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return transposed_conv2d(x, self.w, self.b, stride=2, pad=1, output_padding=1)

    def named_params(self, prefix):
        fan_in = self.w.data.shape[0] * 9
        return [(f"{prefix}.w", self.w, "he", fan_in), (f"{prefix}.b", self.b, "zero", 0)]
