"""Efficiency audit: parameter counts, activation footprints, MACs, timings.

Closed-form counts are cross-checked against runtime tensor enumeration;
activation footprints are measured with the allocation tracking in
:mod:`quic.tracking` (batch-scaled buffers declared by the op kernels,
parameter-sized scratch excluded). The benchmark reports the median
forward+backward wall time per head at identical dimensions and emits a
CSV with one row per head kind.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tracking
from .errors import ConfigError
from .heads import HeadKind, build_head, se_reduction
from .tensor import Tensor, backward, no_grad, reduce_sum

CSV_HEADER = "head,params,peak_act_elems,macs_per_sample,fwd_bwd_ms_median"


def count_head_params(kind, in_features, num_classes, *, fc_in_features=None,
                      se_ratio=16, bn_enabled=True):
    """Closed-form trainable parameter count for a head."""
    kind = HeadKind(kind)
    c, k = int(in_features), int(num_classes)
    if kind is HeadKind.FC:
        n = int(fc_in_features or c)
        return k * n + k
    if kind is HeadKind.GAP:
        return k * c + k
    if kind is HeadKind.SE:
        r = se_reduction(c, se_ratio)
        hidden = c // r
        return hidden * c + c * hidden + k * c + k
    if kind is HeadKind.QUIC:
        return k * c + k * c * c + k + (2 * k if bn_enabled else 0)
    if kind is HeadKind.BCNN_ORACLE:
        return k * c + k * c * c + k
    raise ConfigError(f"unhandled head kind {kind}")


def count_params(obj):
    """Runtime enumeration over an object exposing ``named_params``."""
    return sum(t.size for _, t, _ in obj.named_params())


def count_backbone_params(spec, sample_shape):
    """Closed-form parameter count for a backbone spec."""
    spec.validate()
    if spec.kind == "identity":
        return 0
    if spec.kind == "mlp":
        total, fan_in = 0, sample_shape[0]
        for width in spec.mlp_widths:
            total += width * fan_in + width
            fan_in = width
        return total
    total, cin = 0, sample_shape[0]
    for cout in spec.cnn_channels:
        total += cout * cin * 9  # bias-free 3x3 kernels
        cin = cout
    return total


def macs_per_sample(kind, in_features, num_classes, *, fc_in_features=None,
                    se_ratio=16):
    """Multiply-accumulate estimate for one sample through a head.

    Formulas: gap = K*C; fc = K*N; se = 2*C^2/r + C + K*C;
    quic = K*C (linear) + K*(C^2 + C) (quadratic); bcnn = C^2 (outer)
    + K*C^2 + K*C.
    """
    kind = HeadKind(kind)
    c, k = int(in_features), int(num_classes)
    if kind is HeadKind.FC:
        n = int(fc_in_features or c)
        return k * n
    if kind is HeadKind.GAP:
        return k * c
    if kind is HeadKind.SE:
        r = se_reduction(c, se_ratio)
        hidden = c // r
        return 2 * hidden * c + c + k * c
    if kind is HeadKind.QUIC:
        return k * c + k * (c * c + c)
    if kind is HeadKind.BCNN_ORACLE:
        return c * c + k * c * c + k * c
    raise ConfigError(f"unhandled head kind {kind}")


def descriptor_length(in_features):
    """Flattened outer-product descriptor length for one sample."""
    return int(in_features) * int(in_features)


def _make_head(kind, c, k, batch, seed=0):
    rng = np.random.default_rng(seed)
    cap = max(2 * batch * c * c, 1 << 26)
    return build_head(kind, c, k, fc_in_features=c, rng=rng, descriptor_cap=cap)


def peak_activation(kind, batch, in_features, num_classes, seed=0):
    """Measured activation footprint of one forward pass.

    Returns a dict with the tracked transient peak, the logit output
    size, and the per-sample multiplier ``peak / (batch * in_features)``.
    """
    head = _make_head(kind, in_features, num_classes, batch, seed)
    z = Tensor(np.random.default_rng(seed + 1).normal(
        0, 1, size=(batch, in_features)).astype(np.float32))
    with no_grad():
        with tracking.measure() as tracker:
            head.forward(z, mode="eval")
    peak = int(tracker.peak)
    return {"head": HeadKind(kind).value,
            "transient_peak_elems": peak,
            "output_elems": batch * num_classes,
            "per_row_multiplier": peak / float(batch * in_features)}


def _time_fwd_bwd(head, z, reps):
    t0 = time.perf_counter()
    for _ in range(reps):
        out = head.forward(z, mode="train")
        loss = reduce_sum(out)
        backward(loss)
    return (time.perf_counter() - t0) / reps


@dataclass
class AuditRow:
    head: str
    params: int
    peak_act_elems: int
    macs_per_sample: int
    fwd_bwd_ms_median: float


def bench_heads(in_features, num_classes, batch=16, trials=7, kinds=None,
                seed=0, min_rep_seconds=5e-3):
    """Median forward+backward wall time per head at identical dims.

    Two warmup runs precede timing; if a single run is faster than
    ``min_rep_seconds`` the inner repetition count doubles until the
    timed block is long enough for the clock's resolution.
    """
    if trials < 5:
        raise ConfigError(f"need at least 5 trials, got {trials}")
    if batch < 2:
        raise ConfigError("bench needs batch >= 2 (batch-norm train mode)")
    kinds = list(kinds) if kinds is not None else list(HeadKind)
    rng = np.random.default_rng(seed)
    z_data = rng.normal(0, 1, size=(batch, in_features)).astype(np.float32)
    rows = []
    for kind in kinds:
        head = _make_head(kind, in_features, num_classes, batch, seed)
        z = Tensor(z_data)
        for _ in range(2):
            _time_fwd_bwd(head, z, 1)
        reps = 1
        while _time_fwd_bwd(head, z, reps) * reps < min_rep_seconds:
            reps *= 2
        times = [_time_fwd_bwd(head, z, reps) for _ in range(trials)]
        rows.append(AuditRow(
            head=HeadKind(kind).value,
            params=count_params(head),
            peak_act_elems=peak_activation(kind, batch, in_features,
                                           num_classes, seed)["transient_peak_elems"],
            macs_per_sample=macs_per_sample(kind, in_features, num_classes,
                                            fc_in_features=in_features),
            fwd_bwd_ms_median=statistics.median(times) * 1000.0))
    return rows


def audit_csv(rows):
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(f"{r.head},{r.params},{r.peak_act_elems},"
                     f"{r.macs_per_sample},{r.fwd_bwd_ms_median:.6g}")
    return "\n".join(lines) + "\n"
