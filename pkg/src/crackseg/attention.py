"""Additive attention gate producing per-pixel coefficients in [0, 1].

The gate sees two same-resolution inputs: skip-connection features and the
current decoder state. Both are mapped by 1x1 convolutions to a common
intermediate width, summed, passed through ReLU, projected to a single
channel and squashed with a sigmoid; the resulting coefficient map
attenuates the skip features channel-wise.
"""
from __future__ import annotations

import numpy as np

from .layers import Conv2D, relu, sigmoid
from .tensor import ShapeError, add, scale_by_map


class AttentionGate:
    def __init__(self, channels_skip, channels_gate, channels_int=None,
                 rng=None, dtype=np.float32):
        if channels_int is None:
            channels_int = max(1, channels_skip // 2)
        self.channels_skip = channels_skip
        self.channels_gate = channels_gate
        self.channels_int = channels_int
        self.w_gate = Conv2D(channels_gate, channels_int, kernel=(1, 1),
                             rng=rng, dtype=dtype)
        self.w_skip = Conv2D(channels_skip, channels_int, kernel=(1, 1),
                             rng=rng, dtype=dtype)
        self.psi = Conv2D(channels_int, 1, kernel=(1, 1), rng=rng, dtype=dtype)
        self.last_alpha = None

    def params(self):
        out = {}
        for prefix, conv in (("w_gate", self.w_gate), ("w_skip", self.w_skip),
                             ("psi", self.psi)):
            for name, p in conv.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def force_open(self):
        """Pin the coefficient map to sigmoid(20) ~ 1 (for equivalence tests)."""
        self.psi.weight.data[...] = 0
        self.psi.bias.data[...] = 20.0

    def forward(self, skip, decoder):
        if (skip.shape[0], skip.shape[2], skip.shape[3]) != \
                (decoder.shape[0], decoder.shape[2], decoder.shape[3]):
            raise ShapeError(
                f"skip {skip.shape} and decoder {decoder.shape} disagree on N/H/W")
        pre = relu(add(self.w_gate.forward(decoder), self.w_skip.forward(skip)))
        alpha = sigmoid(self.psi.forward(pre))
        self.last_alpha = alpha
        return scale_by_map(skip, alpha)
