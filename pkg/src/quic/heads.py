"""Classification heads.

Five interchangeable heads map backbone features to class logits:

* ``FCHead`` — one linear layer on flattened features.
* ``GAPHead`` — one linear layer on pooled features.
* ``SEHead`` — squeeze-and-excitation channel gate, then a linear layer.
* ``QuICHead`` — per-class linear score plus a per-class quadratic
  interaction score ``z^T M_k z``, fused through batch normalization.
* ``BCNNOracleHead`` — explicitly materializes the outer product
  ``vec(z z^T)`` and classifies it linearly. Exists to witness the
  activation-memory cost and as the equivalence oracle for ``QuICHead``.

The quadratic interaction score never materializes a ``B x C x C``
tensor: it loops over classes with a reused ``B x C`` row buffer.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from . import tracking
from .errors import ConfigError, DataError, DimensionError, ResourceError
from .layers import BatchNormState, batch_norm_1d, kaiming_uniform, linear
from .tensor import Tensor, l2_normalize_rows, record_op, relu, reshape, sigmoid

DEFAULT_DESCRIPTOR_CAP = 1 << 26


class HeadKind(str, enum.Enum):
    """Tags for the head taxonomy; every trainer/audit path handles all."""

    FC = "fc"
    GAP = "gap"
    SE = "se"
    QUIC = "quic"
    BCNN_ORACLE = "bcnn_oracle"


def symmetrize(a):
    """Symmetric part ``(A + A^T) / 2`` over the last two axes.

    The antisymmetric part of any matrix contributes zero to a quadratic
    form, so downstream scores are invariant to it.
    """
    ad = a.data
    if ad.ndim < 2 or ad.shape[-1] != ad.shape[-2]:
        raise DimensionError(f"symmetrize expects square trailing axes, got {ad.shape}")
    out = (ad + np.swapaxes(ad, -1, -2)) * ad.dtype.type(0.5)

    def bw(g):
        return ((g + np.swapaxes(g, -1, -2)) * g.dtype.type(0.5),)

    return record_op(out, (a,), bw)


def quadratic_form(z, m):
    """Per-class quadratic score ``out[b, k] = z_b^T M_k z_b``.

    ``z: (B, C)``, ``m: (K, C, C)``. ``m`` need not be symmetric; the
    gradient in ``z`` is ``(M_k + M_k^T) z`` scaled by the upstream
    gradient, and the gradient in ``M_k`` is the outer product
    ``z z^T`` scaled likewise. Computed class by class with a reused
    ``B x C`` buffer so the transient footprint stays linear in C.
    """
    zd, md = z.data, m.data
    if zd.ndim != 2 or md.ndim != 3 or md.shape[1] != md.shape[2] or zd.shape[1] != md.shape[1]:
        raise DimensionError(
            f"quadratic_form: features {zd.shape} do not match matrices {md.shape}")
    bsz, c = zd.shape
    k = md.shape[0]
    dtype = zd.dtype

    out = np.empty((bsz, k), dtype=np.float64)
    with tracking.transient(zd.size):
        z64 = zd.astype(np.float64, copy=False)
        for kk in range(k):
            with tracking.transient(bsz * c):
                rows = z64 @ md[kk]
                out[:, kk] = np.einsum("bc,bc->b", rows, z64)
    out = out.astype(dtype)
    tracking.note(out.size)

    def bw(g):
        with tracking.transient(g.size + 2 * zd.size):
            g64 = g.astype(np.float64, copy=False)
            z64b = zd.astype(np.float64, copy=False)
            dz = np.zeros((bsz, c), dtype=np.float64)
            dm = np.empty_like(md, dtype=np.float64)
            for kk in range(k):
                with tracking.transient(2 * bsz * c):
                    msym = md[kk] + md[kk].T
                    dz += (z64b @ msym) * g64[:, kk:kk + 1]
                    dm[kk] = (z64b * g64[:, kk:kk + 1]).T @ z64b
        return dz.astype(dtype), dm.astype(dtype)

    return record_op(out, (z, m), bw)


def batch_outer_vec(z, max_elements=DEFAULT_DESCRIPTOR_CAP):
    """Row-major flattened outer products ``out[b] = vec(z_b z_b^T)``.

    Deliberately materializes the ``B x C^2`` descriptor; refuses to
    allocate past ``max_elements``.
    """
    zd = z.data
    if zd.ndim != 2:
        raise DimensionError(f"batch_outer_vec expects B x C input, got {zd.shape}")
    bsz, c = zd.shape
    n = bsz * c * c
    if n > max_elements:
        raise ResourceError(
            f"outer-product descriptor needs {n} elements "
            f"(B={bsz}, C={c}), above the cap of {max_elements}")
    out = np.einsum("bi,bj->bij", zd, zd).reshape(bsz, c * c)
    tracking.note(out.size)

    def bw(g):
        with tracking.transient(2 * zd.size):
            gm = g.reshape(bsz, c, c).astype(np.float64, copy=False)
            z64 = zd.astype(np.float64, copy=False)
            dz = (np.einsum("bij,bj->bi", gm, z64)
                  + np.einsum("bij,bi->bj", gm, z64))
        return (dz.astype(zd.dtype),)

    return record_op(out, (z,), bw)


def se_forward(z, params):
    """Squeeze-and-excitation gate on pooled features.

    ``gate = sigmoid(W2 @ relu(W1 @ z))`` applied multiplicatively per
    channel. When the backbone is convolutional, gating the pooled vector
    equals gating the feature map per channel before pooling, since the
    gate is constant over the spatial axes.
    """
    squeezed = relu(linear(z, params.w1))
    gate = sigmoid(linear(squeezed, params.w2))
    return z * gate


def se_reduction(num_channels, ratio):
    """Largest divisor of ``num_channels`` at most ``ratio`` keeping C/r >= 4."""
    limit = min(int(ratio), max(1, num_channels // 4))
    for d in range(limit, 0, -1):
        if num_channels % d == 0:
            return d
    return 1


class SEBlockParams:
    """Bottleneck gate weights: ``w1: (C/r, C)``, ``w2: (C, C/r)``."""

    def __init__(self, num_channels, ratio=16, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        r = se_reduction(num_channels, ratio)
        hidden = num_channels // r
        self.ratio = r
        self.w1 = Tensor(kaiming_uniform(rng, (hidden, num_channels), num_channels,
                                         gain=math.sqrt(2.0), dtype=dtype),
                         requires_grad=True)
        self.w2 = Tensor(kaiming_uniform(rng, (num_channels, hidden), hidden, dtype=dtype),
                         requires_grad=True)


class QuICHead:
    """Linear-plus-interaction classification head.

    Per class ``k`` the pre-normalization score is
    ``w_k . z + z^T M_k z`` with ``M_k = (A_k + A_k^T) / 2``; scores are
    batch-normalized and the per-class bias is added after normalization.
    ``A`` starts at zero by default, so the head begins as a pure linear
    classifier and the interaction path contributes only as it is learned.
    """

    kind = HeadKind.QUIC

    def __init__(self, in_features, num_classes, *, l2_normalize=False,
                 a_init="zeros", bn_enabled=True, bn_eps=1e-5, bn_momentum=0.1,
                 bias_inside_bn=False, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        c, k = int(in_features), int(num_classes)
        self.in_features = c
        self.num_classes = k
        self.l2_normalize = bool(l2_normalize)
        self.bias_inside_bn = bool(bias_inside_bn)
        self.w = Tensor(kaiming_uniform(rng, (k, c), c, dtype=dtype), requires_grad=True)
        if a_init == "zeros":
            a = np.zeros((k, c, c), dtype=dtype)
        elif a_init == "normal":
            a = rng.normal(0.0, 1e-3 / math.sqrt(c), size=(k, c, c)).astype(dtype)
        else:
            raise ConfigError(f"unknown interaction init {a_init!r}")
        self.a = Tensor(a, requires_grad=True)
        self.b = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        self.bn = BatchNormState(k, eps=bn_eps, momentum=bn_momentum, dtype=dtype) \
            if bn_enabled else None

    def _prepare(self, z):
        if np.isnan(z.data).any():
            raise DataError("NaN in input features")
        if self.l2_normalize:
            z = l2_normalize_rows(z)
        return z

    def pre_bn_scores(self, z):
        """Fused linear + interaction scores before normalization and bias."""
        z = self._prepare(z)
        return linear(z, self.w) + quadratic_form(z, symmetrize(self.a))

    def forward(self, z, fmap=None, mode="train"):
        s = self.pre_bn_scores(z)
        if self.bias_inside_bn:
            s = s + self.b
        if self.bn is not None:
            self.bn.mode = mode
            s = batch_norm_1d(s, self.bn)
        if self.bias_inside_bn:
            return s
        return s + self.b

    def named_params(self):
        params = [("head.W", self.w, True), ("head.A", self.a, True),
                  ("head.b", self.b, False)]
        if self.bn is not None:
            params += [("head.bn.gamma", self.bn.gamma, False),
                       ("head.bn.beta", self.bn.beta, False)]
        return params

    def named_buffers(self):
        if self.bn is None:
            return []
        return [("head.bn.running_mean", self.bn.running_mean),
                ("head.bn.running_var", self.bn.running_var)]

    def load_buffers(self, values):
        if self.bn is not None:
            self.bn.running_mean = values["head.bn.running_mean"].copy()
            self.bn.running_var = values["head.bn.running_var"].copy()


class GAPHead:
    """Linear classifier on pooled features."""

    kind = HeadKind.GAP

    def __init__(self, in_features, num_classes, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        c, k = int(in_features), int(num_classes)
        self.in_features = c
        self.num_classes = k
        self.w = Tensor(kaiming_uniform(rng, (k, c), c, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)

    def forward(self, z, fmap=None, mode="train"):
        return linear(z, self.w, self.b)

    def named_params(self):
        return [("head.W", self.w, True), ("head.b", self.b, False)]

    def named_buffers(self):
        return []

    def load_buffers(self, values):
        pass


class FCHead:
    """Linear classifier on flattened (pre-pool) features.

    Consumes the spatial feature map when the backbone provides one;
    on 1x1 or already-flat features it coincides with :class:`GAPHead`.
    """

    kind = HeadKind.FC

    def __init__(self, in_features, num_classes, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        n, k = int(in_features), int(num_classes)
        self.in_features = n
        self.num_classes = k
        self.w = Tensor(kaiming_uniform(rng, (k, n), n, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)

    def forward(self, z, fmap=None, mode="train"):
        feats = fmap if fmap is not None else z
        flat = reshape(feats, (feats.shape[0], -1))
        if flat.shape[1] != self.in_features:
            raise DimensionError(
                f"fc head expects {self.in_features} flattened features, got {flat.shape[1]}")
        return linear(flat, self.w, self.b)

    def named_params(self):
        return [("head.W", self.w, True), ("head.b", self.b, False)]

    def named_buffers(self):
        return []

    def load_buffers(self, values):
        pass


class SEHead:
    """Channel-gated linear classifier (first-order reweighting)."""

    kind = HeadKind.SE

    def __init__(self, in_features, num_classes, ratio=16, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        c, k = int(in_features), int(num_classes)
        self.in_features = c
        self.num_classes = k
        self.se = SEBlockParams(c, ratio=ratio, rng=rng, dtype=dtype)
        self.w = Tensor(kaiming_uniform(rng, (k, c), c, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)

    def forward(self, z, fmap=None, mode="train"):
        return linear(se_forward(z, self.se), self.w, self.b)

    def named_params(self):
        return [("head.se.W1", self.se.w1, True), ("head.se.W2", self.se.w2, True),
                ("head.W", self.w, True), ("head.b", self.b, False)]

    def named_buffers(self):
        return []

    def load_buffers(self, values):
        pass


class BCNNOracleHead:
    """Bilinear head that materializes the full outer-product descriptor.

    ``logits = z @ Wlin^T + vec(z z^T) @ Wbig^T + b``. Allocation above
    ``max_descriptor_elements`` raises :class:`ResourceError`.
    """

    kind = HeadKind.BCNN_ORACLE

    def __init__(self, in_features, num_classes, rng=None, dtype=np.float32,
                 max_descriptor_elements=DEFAULT_DESCRIPTOR_CAP):
        rng = rng if rng is not None else np.random.default_rng(0)
        c, k = int(in_features), int(num_classes)
        self.in_features = c
        self.num_classes = k
        self.max_descriptor_elements = int(max_descriptor_elements)
        self.w = Tensor(kaiming_uniform(rng, (k, c), c, dtype=dtype), requires_grad=True)
        self.wbig = Tensor(kaiming_uniform(rng, (k, c * c), c * c, dtype=dtype),
                           requires_grad=True)
        self.b = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)

    def forward(self, z, fmap=None, mode="train"):
        desc = batch_outer_vec(z, self.max_descriptor_elements)
        return linear(z, self.w) + linear(desc, self.wbig) + self.b

    def named_params(self):
        return [("head.W", self.w, True), ("head.Wbig", self.wbig, True),
                ("head.b", self.b, False)]

    def named_buffers(self):
        return []

    def load_buffers(self, values):
        pass


def build_head(kind, in_features, num_classes, *, fc_in_features=None,
               se_ratio=16, l2_normalize=False, a_init="zeros", bn_enabled=True,
               bn_eps=1e-5, bn_momentum=0.1, bias_inside_bn=False, rng=None,
               descriptor_cap=DEFAULT_DESCRIPTOR_CAP, dtype=np.float32):
    """Construct a head by :class:`HeadKind` tag."""
    kind = HeadKind(kind)
    if kind is HeadKind.FC:
        return FCHead(fc_in_features or in_features, num_classes, rng=rng, dtype=dtype)
    if kind is HeadKind.GAP:
        return GAPHead(in_features, num_classes, rng=rng, dtype=dtype)
    if kind is HeadKind.SE:
        return SEHead(in_features, num_classes, ratio=se_ratio, rng=rng, dtype=dtype)
    if kind is HeadKind.QUIC:
        return QuICHead(in_features, num_classes, l2_normalize=l2_normalize,
                        a_init=a_init, bn_enabled=bn_enabled, bn_eps=bn_eps,
                        bn_momentum=bn_momentum, bias_inside_bn=bias_inside_bn,
                        rng=rng, dtype=dtype)
    if kind is HeadKind.BCNN_ORACLE:
        return BCNNOracleHead(in_features, num_classes, rng=rng, dtype=dtype,
                              max_descriptor_elements=descriptor_cap)
    raise ConfigError(f"unhandled head kind {kind}")
