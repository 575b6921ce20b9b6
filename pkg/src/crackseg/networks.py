"""Builders and forward graphs for the four network variants.

All four share the same 5-level encoder/decoder skeleton (4 encoder levels
plus a bottom block); they differ only in how the skip features handed to
each decoder level are assembled:

  unet                - the encoder output x_i, unchanged.
  attention           - x_i attenuated by an attention gate driven by the
                        decoder state.
  advanced_attention  - every shallower encoder output is max-pooled to the
                        decoder's resolution, projected by a 3x3 conv, the
                        projections are concatenated and one attention gate
                        attenuates the whole bundle.
  full_attention      - as advanced_attention, plus one extra attention
                        gate on each projected source before concatenation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .attention import AttentionGate
from .layers import BatchNorm2D, Conv2D, MaxPool2D, TransposedConv2D, relu
from .tensor import ShapeError, concat_channels

VARIANTS = ("unet", "attention", "advanced_attention", "full_attention")

# CLI-facing short names.
VARIANT_ALIASES = {
    "unet": "unet",
    "attn": "attention",
    "adv-attn": "advanced_attention",
    "full-attn": "full_attention",
}


@dataclass
class NetworkConfig:
    variant: str = "unet"
    in_channels: int = 3
    base_width: int = 64
    out_channels: int = 1
    depth: int = 5

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.depth != 5:
            raise ValueError("this network family is fixed at depth 5 (4 encoder levels + bottom)")
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("channel counts must be positive")
        if self.out_channels != 1:
            raise ValueError("single-logit output head only")

    @property
    def widths(self):
        return [self.base_width * 2 ** i for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


def bundle_source_width(width_i, level):
    """Channel width each multi-scale source is projected to at a decoder level."""
    return math.ceil(width_i / level)


class DoubleConvBlock:
    """Two (3x3 conv, batch norm, ReLU) stages; the first changes the channel
    count, the second preserves it. Spatial size is preserved (padding 1)."""

    def __init__(self, in_channels, out_channels, rng, dtype=np.float32):
        self.conv1 = Conv2D(in_channels, out_channels, kernel=(3, 3),
                            padding=(1, 1), rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2D(out_channels, dtype=dtype)
        self.conv2 = Conv2D(out_channels, out_channels, kernel=(3, 3),
                            padding=(1, 1), rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2D(out_channels, dtype=dtype)

    def forward(self, x, training):
        x = relu(self.bn1.forward(self.conv1.forward(x), training))
        return relu(self.bn2.forward(self.conv2.forward(x), training))

    def params(self):
        out = {}
        for prefix, mod in (("conv1", self.conv1), ("bn1", self.bn1),
                            ("conv2", self.conv2), ("bn2", self.bn2)):
            for name, p in mod.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def batchnorms(self):
        return {"bn1": self.bn1, "bn2": self.bn2}


class SegNet:
    """A built network: layer graph, named-parameter registry, forward plan."""

    def __init__(self, config: NetworkConfig, seed=0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        w = config.widths  # w[0]..w[4] for levels 1..5

        self.encoders = [DoubleConvBlock(config.in_channels if i == 0 else w[i - 1],
                                         w[i], rng, dtype) for i in range(4)]
        self.pool = MaxPool2D()
        self.bottom = DoubleConvBlock(w[3], w[4], rng, dtype)
        # upconvs[k] upsamples into decoder level 4-k (channels w[3-k]).
        self.upconvs = [TransposedConv2D(w[4 - k], w[3 - k], rng=rng, dtype=dtype)
                        for k in range(4)]

        self.gates = {}        # attention variant: level -> gate on x_i
        self.projs = {}        # (level, source) -> 3x3 projection conv
        self.src_gates = {}    # full variant: (level, source) -> gate
        self.bundle_gates = {}  # advanced/full: level -> gate on the bundle

        multiscale = config.variant in ("advanced_attention", "full_attention")
        for i in range(4, 0, -1):
            wi = w[i - 1]
            if config.variant == "attention":
                self.gates[i] = AttentionGate(wi, wi, rng=rng, dtype=dtype)
            elif multiscale:
                p = bundle_source_width(wi, i)
                for j in range(1, i + 1):
                    self.projs[(i, j)] = Conv2D(w[j - 1], p, kernel=(3, 3),
                                                padding=(1, 1), rng=rng, dtype=dtype)
                    if config.variant == "full_attention":
                        self.src_gates[(i, j)] = AttentionGate(p, wi, rng=rng,
                                                               dtype=dtype)
                self.bundle_gates[i] = AttentionGate(i * p, wi, rng=rng, dtype=dtype)

        self.decoders = []
        for i in range(4, 0, -1):
            wi = w[i - 1]
            skip_width = i * bundle_source_width(wi, i) if multiscale else wi
            self.decoders.append(DoubleConvBlock(skip_width + wi, wi, rng, dtype))
        self.head = Conv2D(w[0], config.out_channels, kernel=(1, 1), rng=rng,
                           dtype=dtype)

        self._params = self._collect_params()

    # -- registries ---------------------------------------------------------

    def _named_modules(self):
        mods = []
        for i, enc in enumerate(self.encoders, start=1):
            mods.append((f"enc{i}", enc))
        mods.append(("bottom", self.bottom))
        for k, up in enumerate(self.upconvs):
            mods.append((f"upconv{4 - k}", up))
        for i in sorted(self.gates):
            mods.append((f"gate{i}", self.gates[i]))
        for (i, j) in sorted(self.projs):
            mods.append((f"proj{i}_{j}", self.projs[(i, j)]))
        for (i, j) in sorted(self.src_gates):
            mods.append((f"src_gate{i}_{j}", self.src_gates[(i, j)]))
        for i in sorted(self.bundle_gates):
            mods.append((f"bundle_gate{i}", self.bundle_gates[i]))
        for k, dec in enumerate(self.decoders):
            mods.append((f"dec{4 - k}", dec))
        mods.append(("head", self.head))
        return mods

    def _collect_params(self):
        out = {}
        for prefix, mod in self._named_modules():
            for name, p in mod.params().items():
                key = f"{prefix}.{name}"
                assert key not in out
                out[key] = p
        return out

    def named_parameters(self):
        return dict(self._params)

    def parameter_count(self):
        return sum(p.data.size for p in self._params.values())

    def batchnorms(self):
        out = {}
        for prefix, mod in self._named_modules():
            if isinstance(mod, DoubleConvBlock):
                for name, bn in mod.batchnorms().items():
                    out[f"{prefix}.{name}"] = bn
        return out

    def named_buffers(self):
        out = {}
        for name, bn in self.batchnorms().items():
            for bname, arr in bn.buffers().items():
                out[f"{name}.{bname}"] = arr
        return out

    def load_state(self, params, buffers):
        own = self._params
        for name, arr in params.items():
            if name not in own:
                raise KeyError(f"unknown parameter {name!r}")
            if own[name].data.shape != arr.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} vs "
                                 f"{own[name].data.shape}")
            own[name].data = np.array(arr, dtype=own[name].data.dtype, copy=True)
            own[name].grad = np.zeros_like(own[name].data)
        bns = self.batchnorms()
        for name, arr in buffers.items():
            bn_name, _, buf = name.rpartition(".")
            if bn_name not in bns or buf not in ("running_mean", "running_var"):
                raise KeyError(f"unknown buffer {name!r}")
            setattr(bns[bn_name], buf, np.array(arr, copy=True))

    def all_gates(self):
        gates = list(self.gates.values()) + list(self.src_gates.values()) \
            + list(self.bundle_gates.values())
        return gates

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def forward(self, x, mode="train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {c}")
        if h % 16 or w % 16:
            raise ShapeError(f"input H and W must be divisible by 16, got {h}x{w}")
        training = mode == "train"

        skips = []
        t = x
        for enc in self.encoders:
            t = enc.forward(t, training)
            skips.append(t)
            t = self.pool.forward(t)
        t = self.bottom.forward(t, training)
        t = self.upconvs[0].forward(t)
        for k, i in enumerate(range(4, 0, -1)):
            bundle = self.skip_bundle(i, skips, t, training)
            t = self.decoders[k].forward(concat_channels([bundle, t]), training)
            if i > 1:
                t = self.upconvs[5 - i].forward(t)
        return self.head.forward(t)

    def skip_bundle(self, level, skips, decoder_state, training):
        x_i = skips[level - 1]
        variant = self.config.variant
        if variant == "unet":
            return x_i
        if variant == "attention":
            return self.gates[level].forward(x_i, decoder_state)
        sources = []
        for j in range(1, level + 1):
            s = skips[j - 1]
            for _ in range(level - j):
                s = self.pool.forward(s)
            assert s.shape[2:] == decoder_state.shape[2:], \
                "pooled source resolution must match the decoder level"
            s = self.projs[(level, j)].forward(s)
            if variant == "full_attention":
                s = self.src_gates[(level, j)].forward(s, decoder_state)
            sources.append(s)
        bundle = sources[0] if len(sources) == 1 else concat_channels(sources)
        return self.bundle_gates[level].forward(bundle, decoder_state)


def build(config: NetworkConfig, seed=0, dtype=np.float32) -> SegNet:
    return SegNet(config, seed=seed, dtype=dtype)
