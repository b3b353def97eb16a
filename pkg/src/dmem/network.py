"""U-shaped dense segmentation network in three variants.

Layout: stem 3x3 conv -> N stages of [dense block -> transition down] with the
pre-pool feature map kept as a skip -> bottleneck dense block -> N stages of
[transition up -> concat matching skip -> dense block] -> 1x1 conv to class
logits. Skips join by channel concatenation, so the decoder stage paired with
encoder stage i sees that stage's full pre-pool features.

Variants: "plain" uses regular convolutions everywhere; "deform-contract"
makes every encoder dense-layer conv deformable; "deform-expand" does the same
on the decoder. The bottleneck, stem, transitions, and head stay regular in
all variants.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .blocks import Conv2dLayer, DenseBlock, DenseBlockConfig, TransitionDown, TransitionUp
from .tensor import ShapeError, Tensor, concat_channels

PLAIN = "plain"
DEFORM_CONTRACT = "deform-contract"
DEFORM_EXPAND = "deform-expand"
VARIANTS = (PLAIN, DEFORM_CONTRACT, DEFORM_EXPAND)


@dataclass
class ArchConfig:
    stages: int = 3
    in_channels: int = 1
    initial_channels: int = 16
    growth_rate: int = 8
    layers_per_block: int = 3
    variant: str = PLAIN
    num_classes: int = 4
    input_size: tuple = (64, 64)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        h, w = self.input_size
        div = 2 ** self.stages
        if h % div or w % div:
            raise ShapeError(
                f"input size {h}x{w} must be divisible by 2^{self.stages} = {div}")

    def to_mapping(self):
        h, w = self.input_size
        return {
            "stages": self.stages,
            "in_channels": self.in_channels,
            "initial_channels": self.initial_channels,
            "growth_rate": self.growth_rate,
            "layers_per_block": self.layers_per_block,
            "variant": self.variant,
            "num_classes": self.num_classes,
            "input_h": h,
            "input_w": w,
        }

    @classmethod
    def from_mapping(cls, kv):
        return cls(
            stages=int(kv["stages"]),
            in_channels=int(kv["in_channels"]),
            initial_channels=int(kv["initial_channels"]),
            growth_rate=int(kv["growth_rate"]),
            layers_per_block=int(kv["layers_per_block"]),
            variant=kv["variant"],
            num_classes=int(kv["num_classes"]),
            input_size=(int(kv["input_h"]), int(kv["input_w"])),
        )

    def with_variant(self, variant):
        return replace(self, variant=variant)


class Model:
    """A built network: layer objects plus a flat named-parameter table."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.stem = None
        self.down_stages = []  # (DenseBlock, TransitionDown)
        self.bottleneck = None
        self.up_stages = []  # (TransitionUp, DenseBlock)
        self.head = None
        self.param_specs = []  # (name, tensor, init_kind, fan_in)
        self.params = {}

    def _register(self, layer, prefix):
        for name, tensor, kind, fan_in in layer.named_params(prefix):
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name}")
            self.param_specs.append((name, tensor, kind, fan_in))
            self.params[name] = tensor
        return layer

    def forward(self, batch):
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        n, c, h, w = batch.data.shape
        if (h, w) != tuple(self.cfg.input_size):
            raise ShapeError(
                f"input spatial dims {h}x{w} do not match configured "
                f"{self.cfg.input_size[0]}x{self.cfg.input_size[1]}")
        if c != self.cfg.in_channels:
            raise ShapeError(f"input has {c} channels, model expects {self.cfg.in_channels}")
        x = self.stem(batch)
        skips = []
        for block, down in self.down_stages:
            x = block(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for (up, block), skip in zip(self.up_stages, reversed(skips)):
            x = concat_channels([up(x), skip])
            x = block(x)
        return self.head(x)

    __call__ = forward

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def parameter_count(self):
        return sum(t.data.size for t in self.params.values())

    def state_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def load_state_arrays(self, arrays):
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params))
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing {missing}, unexpected {extra}")
        for name, t in self.params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.size != t.data.size:
                raise ShapeError(
                    f"parameter {name}: stored size {a.size} does not match expected shape {t.data.shape}")
            t.data = a.reshape(t.data.shape).copy()

    def checksum(self):
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def save(self, ckpt_path, manifest_path=None, extra=None):
        checkpoint.save_tensors(ckpt_path, self.state_arrays())
        if manifest_path is not None:
            kv = self.cfg.to_mapping()
            if extra:
                kv.update(extra)
            checkpoint.write_kv(manifest_path, kv)


def build_network(cfg, seed=0):
    """Construct a model for the config and initialize it from the seed.

    The same (cfg, seed) pair always produces bit-identical parameters.
    """
    cfg.validate()
    model = Model(cfg)
    g, L = cfg.growth_rate, cfg.layers_per_block
    deform_down = cfg.variant == DEFORM_CONTRACT
    deform_up = cfg.variant == DEFORM_EXPAND

    model.stem = model._register(
        Conv2dLayer(cfg.in_channels, cfg.initial_channels, k=3, pad=1), "stem")
    c = cfg.initial_channels
    skip_channels = []
    for i in range(cfg.stages):
        block = DenseBlock(c, DenseBlockConfig(L, g, deformable=deform_down))
        model._register(block, f"down{i}.block")
        c = block.out_channels
        skip_channels.append(c)
        down = model._register(TransitionDown(c), f"down{i}.trans")
        model.down_stages.append((block, down))

    model.bottleneck = model._register(
        DenseBlock(c, DenseBlockConfig(L, g, deformable=False)), "bottleneck")
    c = model.bottleneck.out_channels

    up_width = L * g  # channels carried through each transition up
    for i in range(cfg.stages):
        up = model._register(TransitionUp(c, up_width), f"up{i}.trans")
        c = up_width + skip_channels[cfg.stages - 1 - i]
        block = DenseBlock(c, DenseBlockConfig(L, g, deformable=deform_up))
        model._register(block, f"up{i}.block")
        c = block.out_channels
        model.up_stages.append((up, block))

    model.head = model._register(Conv2dLayer(c, cfg.num_classes, k=1), "head")
    init_parameters(model, seed)
    return model


def init_parameters(model, seed):
    """He fan-in init for conv kernels, zeros for biases and every offset
    predictor; deterministic in registration order for a given seed."""
    rng = np.random.default_rng(seed)
    for _, tensor, kind, fan_in in model.param_specs:
        if kind == "he":
            tensor.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tensor.data.shape)
        elif kind == "zero":
            tensor.data = np.zeros(tensor.data.shape)
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        tensor.grad = None


def save_model(model, ckpt_path, manifest_path, extra=None):
    model.save(ckpt_path, manifest_path, extra)


def load_model(ckpt_path, manifest_path):
    """Rebuild a model from its manifest and checkpoint pair."""
    kv = checkpoint.read_kv(manifest_path)
    cfg = ArchConfig.from_mapping(kv)
    model = build_network(cfg, seed=0)
    model.load_state_arrays(checkpoint.load_tensors(ckpt_path))
    return model
