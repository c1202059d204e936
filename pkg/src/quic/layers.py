"""Neural-network layers: linear, convolution, pooling, batch normalization.

All layers are differentiable ops recorded on the tape from
:mod:`quic.tensor`. Convolution is direct (kernel-position loops with
float64 accumulation), not FFT or im2col; the test suite uses an im2col
construction as an independent reference.
"""

from __future__ import annotations

import math

import numpy as np

from . import tracking
from .errors import DimensionError, UsageError
from .tensor import Tensor, record_op


def kaiming_uniform(rng, shape, fan_in, gain=1.0, dtype=np.float32):
    """Uniform init with bound ``gain * sqrt(3 / fan_in)``."""
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def linear(x, w, b=None):
    """Affine map ``x @ w.T + b`` for ``x: (B, Cin)``, ``w: (Cout, Cin)``."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"linear: input {xd.shape} does not match weight {wd.shape}")
    bd = None
    if b is not None:
        bd = b.data
        if bd.shape != (wd.shape[0],):
            raise DimensionError(f"linear: bias {bd.shape} does not match weight {wd.shape}")
    dtype = xd.dtype
    with tracking.transient(xd.size):
        out = np.matmul(xd.astype(np.float64, copy=False),
                        wd.astype(np.float64, copy=False).T)
        if bd is not None:
            out += bd
        out = out.astype(dtype)
    tracking.note(out.size)

    def bw(g):
        with tracking.transient(g.size):
            g64 = g.astype(np.float64, copy=False)
            dx = np.matmul(g64, wd.astype(np.float64, copy=False)).astype(dtype)
            dw = np.matmul(g64.T, xd.astype(np.float64, copy=False)).astype(dtype)
        grads = [dx, dw]
        if bd is not None:
            grads.append(g.sum(axis=0, dtype=np.float64).astype(dtype))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return record_op(out, parents, bw)


def _pair_arg(v, name):
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv2d(x, w, stride=1, padding=0):
    """Direct 2-D cross-correlation.

    ``x: (B, Cin, H, W)``, ``w: (Cout, Cin, kh, kw)``. Output spatial dims
    are ``floor((H + 2p - kh) / stride) + 1``.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"conv2d: input {xd.shape} does not match kernels {wd.shape}")
    sh, sw = _pair_arg(stride, "stride")
    ph, pw = _pair_arg(padding, "padding")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} or padding {padding}")
    bsz, cin, h, w_in = xd.shape
    cout, _, kh, kw = wd.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w_in + 2 * pw - kw) // sw + 1
    if kh > h + 2 * ph or kw > w_in + 2 * pw or ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} with padding {(ph, pw)} and stride "
            f"{(sh, sw)} produces empty output from {h}x{w_in} input")
    dtype = xd.dtype

    hp, wp = h + 2 * ph, w_in + 2 * pw
    # channel-major padded copy so every kernel position is one
    # (Cout, Cin) x (Cin, B*Ho*Wo) product in the working dtype (the
    # float64 shadow path engages when the tensors themselves are
    # float64); kernels are re-laid-out position-major so each slice
    # stays contiguous for BLAS
    xp = np.zeros((cin, bsz, hp, wp), dtype=dtype)
    xp[:, :, ph:ph + h, pw:pw + w_in] = xd.transpose(1, 0, 2, 3)
    wk = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))

    def positions():
        for i in range(kh):
            for j in range(kw):
                view = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
                yield i, j, np.ascontiguousarray(view).reshape(cin, bsz * ho * wo)

    with tracking.transient(xp.size + 2 * bsz * cin * ho * wo):
        acc = np.zeros((cout, bsz * ho * wo), dtype=dtype)
        for i, j, xs in positions():
            if cin == 1:  # BLAS handles inner-dim-1 products poorly
                acc += wk[i, j, :, 0][:, None] * xs[0]
            else:
                acc += np.matmul(wk[i, j], xs)
        out = np.ascontiguousarray(
            acc.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3))
    tracking.note(out.size)

    def bw(g):
        with tracking.transient(2 * g.size + xp.size + 2 * bsz * cin * ho * wo):
            g2 = np.ascontiguousarray(
                g.transpose(1, 0, 2, 3)).reshape(cout, bsz * ho * wo)
            dwk = np.zeros_like(wk)
            dxp = np.zeros_like(xp)
            for i, j, xs in positions():
                dwk[i, j] = np.matmul(g2, xs.T)
                dxs = np.matmul(wk[i, j].T, g2).reshape(cin, bsz, ho, wo)
                dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dxs
            dx = dxp[:, :, ph:ph + h, pw:pw + w_in].transpose(1, 0, 2, 3)
        return (np.ascontiguousarray(dx),
                np.ascontiguousarray(dwk.transpose(2, 3, 0, 1)))

    return record_op(out, (x, w), bw)


def max_pool2d(x, window, stride=None):
    """Max pooling; gradient goes to the first maximum in row-major scan."""
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"max_pool2d expects B x C x H x W input, got {xd.shape}")
    wh, ww = _pair_arg(window, "window")
    sh, sw = (wh, ww) if stride is None else _pair_arg(stride, "stride")
    bsz, c, h, w_in = xd.shape
    if wh > h or ww > w_in:
        raise DimensionError(f"max_pool2d: window {wh}x{ww} exceeds input {h}x{w_in}")
    if sh < 1 or sw < 1:
        raise DimensionError(f"max_pool2d: invalid stride {stride}")
    ho = (h - wh) // sh + 1
    wo = (w_in - ww) // sw + 1

    # window positions stacked in row-major order so argmax picks the
    # first occurrence on ties
    slabs = [xd[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
             for i in range(wh) for j in range(ww)]
    windows = np.stack(slabs, axis=-1)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    tracking.note(out.size)

    def bw(g):
        dx = np.zeros_like(xd)
        for p in range(wh * ww):
            i, j = divmod(p, ww)
            view = dx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
            view += g * (idx == p)
        return (dx,)

    return record_op(out, (x,), bw)


def global_avg_pool(x):
    """Per-channel spatial mean: ``(B, C, H, W) -> (B, C)``."""
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"global_avg_pool expects B x C x H x W input, got {xd.shape}")
    _, _, h, w_in = xd.shape
    out = xd.mean(axis=(2, 3), dtype=np.float64).astype(xd.dtype)
    tracking.note(out.size)

    def bw(g):
        gd = g[:, :, None, None] / g.dtype.type(h * w_in)
        return (np.ascontiguousarray(np.broadcast_to(gd, xd.shape)),)

    return record_op(out, (x,), bw)


class BatchNormState:
    """Affine batch normalization over the feature axis of ``(B, K)`` input.

    ``mode`` is ``"train"`` (batch statistics, running stats updated with
    rate ``momentum``) or ``"eval"`` (running stats only). Variance is
    biased in both the normalization and the running update.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float32):
        if eps <= 0:
            raise UsageError(f"batch norm eps must be positive, got {eps}")
        if not 0.0 <= momentum <= 1.0:
            raise UsageError(f"batch norm momentum must lie in [0, 1], got {momentum}")
        self.num_features = int(num_features)
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.mode = "train"


def batch_norm_1d(x, state):
    """Normalize each feature column; behaviour is set by ``state.mode``."""
    xd = x.data
    if xd.ndim != 2 or xd.shape[1] != state.num_features:
        raise DimensionError(
            f"batch_norm_1d: input {xd.shape} does not match {state.num_features} features")
    bsz = xd.shape[0]
    dtype = xd.dtype
    gamma, beta = state.gamma, state.beta
    g64 = gamma.data.astype(np.float64, copy=False)
    b64 = beta.data.astype(np.float64, copy=False)

    if state.mode == "train":
        if bsz < 2:
            raise UsageError(
                "batch_norm_1d in train mode needs batch size >= 2 "
                f"(got {bsz}); variance is degenerate")
        with tracking.transient(2 * xd.size):
            x64 = xd.astype(np.float64, copy=False)
            mu = x64.mean(axis=0)
            var = x64.var(axis=0)
            inv = 1.0 / np.sqrt(var + state.eps)
            xhat = (x64 - mu) * inv
            out = (xhat * g64 + b64).astype(dtype)
        m = state.momentum
        state.running_mean = ((1.0 - m) * state.running_mean + m * mu).astype(dtype)
        state.running_var = ((1.0 - m) * state.running_var + m * var).astype(dtype)
        tracking.note(out.size)

        def bw(g):
            with tracking.transient(2 * xd.size):
                gg = g.astype(np.float64, copy=False)
                x64b = xd.astype(np.float64, copy=False)
                xhatb = (x64b - mu) * inv
                dgamma = (gg * xhatb).sum(axis=0)
                dbeta = gg.sum(axis=0)
                dx = (g64 * inv / bsz) * (bsz * gg - dbeta - xhatb * dgamma)
            return (dx.astype(dtype), dgamma.astype(dtype), dbeta.astype(dtype))

        return record_op(out, (x, gamma, beta), bw)

    if state.mode != "eval":
        raise UsageError(f"unknown batch norm mode {state.mode!r}")
    rm = state.running_mean.astype(np.float64, copy=False)
    inv = 1.0 / np.sqrt(state.running_var.astype(np.float64, copy=False) + state.eps)
    with tracking.transient(xd.size):
        xhat = (xd.astype(np.float64, copy=False) - rm) * inv
        out = (xhat * g64 + b64).astype(dtype)
    tracking.note(out.size)

    def bw_eval(g):
        gg = g.astype(np.float64, copy=False)
        xhatb = (xd.astype(np.float64, copy=False) - rm) * inv
        dx = (gg * (g64 * inv)).astype(dtype)
        dgamma = (gg * xhatb).sum(axis=0).astype(dtype)
        dbeta = gg.sum(axis=0, dtype=np.float64).astype(dtype)
        return (dx, dgamma, dbeta)

    return record_op(out, (x, gamma, beta), bw_eval)
