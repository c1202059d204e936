"""Small trainable feature extractors producing the pooled feature vector.

Desk-scale stand-ins for large pretrained CNNs: an identity pass-through
for already-extracted features, a two-hidden-layer MLP for tabular data,
and a three-block CNN for image data. The CNN also exposes its pre-pool
feature map for the flattened FC head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import conv2d, global_avg_pool, kaiming_uniform, linear, max_pool2d
from .tensor import Tensor, relu


@dataclass(frozen=True)
class BackboneSpec:
    """Backbone choice plus its layer plan.

    ``mlp_widths`` are the two hidden layer widths (the last is the
    feature dim); ``cnn_channels`` is the per-block channel plan (the last
    is the feature dim).
    """

    kind: str = "identity"
    mlp_widths: tuple = (64, 32)
    cnn_channels: tuple = (16, 32, 64)

    def validate(self):
        if self.kind not in ("identity", "mlp", "tiny_cnn"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "mlp" and (len(self.mlp_widths) < 1
                                   or any(w < 1 for w in self.mlp_widths)):
            raise ConfigError(f"invalid mlp widths {self.mlp_widths}")
        if self.kind == "tiny_cnn" and (len(self.cnn_channels) != 3
                                        or any(c < 1 for c in self.cnn_channels)):
            raise ConfigError(f"tiny_cnn needs a 3-block channel plan, got {self.cnn_channels}")


class IdentityBackbone:
    kind = "identity"

    def __init__(self, in_features):
        self.out_features = int(in_features)

    def forward(self, x, mode="train"):
        if x.ndim != 2 or x.shape[1] != self.out_features:
            raise DimensionError(
                f"identity backbone expects B x {self.out_features} input, got {x.shape}")
        return x, None

    def named_params(self):
        return []

    @property
    def fc_in_features(self):
        return self.out_features


class MLPBackbone:
    """Stack of fully connected layers with ReLU after each."""

    kind = "mlp"

    def __init__(self, in_features, widths=(64, 32), rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = int(in_features)
        self.layers = []
        fan_in = self.in_features
        for width in widths:
            w = Tensor(kaiming_uniform(rng, (width, fan_in), fan_in,
                                       gain=math.sqrt(2.0), dtype=dtype),
                       requires_grad=True)
            b = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
            self.layers.append((w, b))
            fan_in = width
        self.out_features = fan_in

    def forward(self, x, mode="train"):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"mlp backbone expects B x {self.in_features} input, got {x.shape}")
        h = x
        for w, b in self.layers:
            h = relu(linear(h, w, b))
        return h, None

    def named_params(self):
        out = []
        for i, (w, b) in enumerate(self.layers):
            out += [(f"backbone.fc{i}.w", w, True), (f"backbone.fc{i}.b", b, False)]
        return out

    @property
    def fc_in_features(self):
        return self.out_features


class TinyCNNBackbone:
    """Three blocks of [conv3x3 -> relu -> maxpool2x2], then global pooling.

    Convolutions are bias-free; padding keeps spatial dims so each block
    halves them (e.g. 32 -> 16 -> 8 -> 4).
    """

    kind = "tiny_cnn"

    def __init__(self, in_shape, channels=(16, 32, 64), rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        cin, h, w = in_shape
        if h // 8 < 1 or w // 8 < 1:
            raise ConfigError(f"tiny_cnn needs at least 8x8 input, got {h}x{w}")
        self.in_shape = (int(cin), int(h), int(w))
        self.kernels = []
        for cout in channels:
            k = Tensor(kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9,
                                       gain=math.sqrt(2.0), dtype=dtype),
                       requires_grad=True)
            self.kernels.append(k)
            cin = cout
        self.out_features = int(channels[-1])
        sp_h, sp_w = h, w
        for _ in channels:
            sp_h, sp_w = sp_h // 2, sp_w // 2
        self.map_shape = (self.out_features, sp_h, sp_w)

    def forward(self, x, mode="train"):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.in_shape:
            raise DimensionError(
                f"tiny_cnn backbone expects B x {self.in_shape} input, got {x.shape}")
        h = x
        for k in self.kernels:
            h = max_pool2d(relu(conv2d(h, k, stride=1, padding=1)), 2)
        return global_avg_pool(h), h

    def named_params(self):
        return [(f"backbone.conv{i}.w", k, True) for i, k in enumerate(self.kernels)]

    @property
    def fc_in_features(self):
        c, h, w = self.map_shape
        return c * h * w


def build_backbone(spec, sample_shape, rng=None, dtype=np.float32):
    """Construct a backbone for samples of ``sample_shape`` (no batch axis)."""
    spec.validate()
    if spec.kind == "identity":
        if len(sample_shape) != 1:
            raise ConfigError(
                f"identity backbone needs flat samples, got shape {sample_shape}")
        return IdentityBackbone(sample_shape[0])
    if spec.kind == "mlp":
        if len(sample_shape) != 1:
            raise ConfigError(f"mlp backbone needs flat samples, got shape {sample_shape}")
        return MLPBackbone(sample_shape[0], widths=tuple(spec.mlp_widths), rng=rng, dtype=dtype)
    if len(sample_shape) != 3:
        raise ConfigError(
            f"tiny_cnn backbone needs channel x height x width samples, got {sample_shape}")
    return TinyCNNBackbone(sample_shape, channels=tuple(spec.cnn_channels), rng=rng, dtype=dtype)
