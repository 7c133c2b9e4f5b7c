"""Neural-network kernels with hand-written backward rules.

All kernels take and return :class:`~atmskd.tensor.Tensor` objects in NCHW
layout. Convolutions lower to a single GEMM over an im2col buffer laid out as
``(C*k*k, N*H'*W')``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, ParameterError, ValidationError
from .tensor import DTYPE, Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input of shape (N, C, H, W).
        weight: kernel of shape (O, C, k, k).
        bias: optional per-output-channel offset of shape (O,).
        stride: step between windows.
        padding: zero padding added on every spatial border.

    Returns:
        Tensor of shape (N, O, H', W') with H' = (H + 2*padding - k) // stride + 1.
    """
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho * wo >= _BATCHED_GEMM_MIN_PIXELS:
        out, backward = _conv_batched(x, weight, bias, stride, padding, ho, wo)
    else:
        out, backward = _conv_folded(x, weight, bias, stride, padding, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


# Large feature maps: one GEMM per sample, no layout transposes.
# Small feature maps: fold the batch into a single GEMM.
_BATCHED_GEMM_MIN_PIXELS = 64


def _conv_batched(x, weight, bias, stride, padding, ho, wo):
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1 and stride == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols6 = np.empty((n, c, k, k, ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols6[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols6.reshape(n, c * k * k, ho * wo)
    w2 = weight.data.reshape(o, c * k * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)
    hp, wp = h + 2 * padding, w + 2 * padding

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3)
            if k == 1 and stride == 1:
                dxp = dcols.reshape(n, c, hp, wp)
            else:
                dcols6 = dcols.reshape(n, c, k, k, ho, wo)
                dxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols6[:, :, i, j]
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gw, gb

    return out, backward


def _conv_folded(x, weight, bias, stride, padding, ho, wo):
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1 and stride == 1:
        cols = np.ascontiguousarray(xt).reshape(c, n * ho * wo)
    else:
        cols6 = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols6[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols6.reshape(c * k * k, n * ho * wo)
    w2 = weight.data.reshape(o, c * k * k)
    out = (w2 @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    hp, wp = h + 2 * padding, w + 2 * padding

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (gt @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gt.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = w2.T @ gt
            if k == 1 and stride == 1:
                dxt = dcols.reshape(c, n, hp, wp)
            else:
                dcols6 = dcols.reshape(c, k, k, n, ho, wo)
                dxt = np.zeros((c, n, hp, wp), dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        dxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols6[:, i, j]
            if padding:
                dxt = dxt[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(dxt.transpose(1, 0, 2, 3))
        return gx, gw, gb

    return out, backward


def _parity_planes(xp: np.ndarray, stride: int) -> list[list[np.ndarray]]:
    """Split the spatial grid into stride x stride contiguous sub-grids."""
    if stride == 1:
        return [[xp]]
    return [[np.ascontiguousarray(xp[:, :, a::stride, b::stride]) for b in range(stride)] for a in range(stride)]


def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling over k x k windows.

    Padded cells hold -inf and never win. The gradient goes to the first
    maximal cell of each window in row-major order.
    """
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-D input, got {x.shape}")
    if k < 1 or stride < 1 or padding < 0 or padding > k // 2:
        raise ParameterError(f"maxpool2d: invalid k={k}, stride={stride}, padding={padding}")
    n, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"maxpool2d: window {k}x{k} larger than padded input {x.shape}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    planes = _parity_planes(xp, stride)

    def window(i, j):
        return planes[i % stride][j % stride][:, :, i // stride : i // stride + ho, j // stride : j // stride + wo]

    out = window(0, 0).copy()
    for i in range(k):
        for j in range(k):
            np.maximum(out, window(i, j), out=out)

    def backward(g):
        hp, wp = xp.shape[2], xp.shape[3]
        hs, ws = -(-hp // stride), -(-wp // stride)
        dplanes = np.zeros((stride, stride, n, c, hs, ws), dtype=DTYPE)
        unclaimed = np.ones(out.shape, dtype=bool)
        for i in range(k):
            for j in range(k):
                hit = np.equal(window(i, j), out)
                hit &= unclaimed
                unclaimed ^= hit
                a, b = i // stride, j // stride
                dplanes[i % stride, j % stride, :, :, a : a + ho, b : b + wo] += g * hit
        dxp = np.empty(xp.shape, dtype=DTYPE)
        for a in range(stride):
            for b in range(stride):
                sub = dxp[:, :, a::stride, b::stride]
                sub[...] = dplanes[a, b, :, :, : sub.shape[2], : sub.shape[3]]
        if padding:
            dxp = dxp[:, :, padding : padding + h, padding : padding + w]
        return (dxp,)

    return Tensor._from_op(out, (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims; (N, C, H, W) -> (N, C, 1, 1)."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_avg_pool: expected NCHW with H,W >= 1, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / hw, x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward, "global_avg_pool")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    ``tracked`` counts train-mode updates; eval mode refuses to run while it
    is zero.
    """

    mean: np.ndarray
    var: np.ndarray
    tracked: int = 0

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE), 0)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate; eval mode uses the running
    estimate only.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise DimensionError(f"batchnorm2d: channel mismatch between input {x.shape} and gamma {gamma.shape}")
    g4 = gamma.data[None, :, None, None]
    b4 = beta.data[None, :, None, None]
    if not training:
        if state.tracked == 0:
            raise ConfigurationError("batchnorm2d: eval mode used before any train-mode statistics update")
        invstd = 1.0 / np.sqrt(state.var + eps)
        scale = gamma.data * invstd
        shift = beta.data - state.mean * scale
        out = x.data * scale[None, :, None, None]
        out += shift[None, :, None, None]

        def backward_eval(g):
            xhat = (x.data - state.mean[None, :, None, None]) * invstd[None, :, None, None]
            gx = g * scale[None, :, None, None] if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._from_op(out, (x, gamma, beta), backward_eval, "batchnorm2d")

    m = n * h * w
    if m < 2:
        raise DimensionError(f"batchnorm2d: train mode needs at least 2 values per channel, got {x.shape}")
    x3 = x.data.reshape(n, c, h * w)
    mean = np.einsum("ncp->c", x3) / m
    centered = x3 - mean[None, :, None]
    var = np.einsum("ncp,ncp->c", centered, centered) / m
    invstd = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * invstd
    out = centered * scale[None, :, None]
    out += beta.data[None, :, None]
    out = out.reshape(x.shape)

    state.mean = (1.0 - momentum) * state.mean + momentum * mean
    state.var = (1.0 - momentum) * state.var + momentum * var * (m / (m - 1))
    state.tracked += 1

    def backward(g):
        g3 = g.reshape(n, c, h * w)
        sum_g = np.einsum("ncp->c", g3)
        # sum(g * xhat) per channel
        sum_gxhat = np.einsum("ncp,ncp->c", g3, centered) * invstd
        gx = None
        if x.requires_grad:
            a = scale * invstd * sum_gxhat / m
            gx = g3 * scale[None, :, None]
            gx -= centered * a[None, :, None]
            gx -= (scale * sum_g / m)[None, :, None]
            gx = gx.reshape(x.shape)
        return gx, sum_gxhat, sum_g

    return Tensor._from_op(out, (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (out > 0),)

    return Tensor._from_op(out, (x,), backward, "relu")


def dropout_spatial(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero whole channels with probability ``rate`` and rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout_spatial needs an rng in train mode")
    keep = (rng.random((x.shape[0], x.shape[1], 1, 1)) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return Tensor._from_op(x.data * keep, (x,), backward, "dropout_spatial")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight stored as (F, K)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not conform to weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    return tau


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_np(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    shifted = z / _check_tau(tau)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_temp(logits: Tensor, tau: float) -> Tensor:
    tau = _check_tau(tau)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_temp: expected (N, C) logits, got {logits.shape}")
    s = softmax_np(logits.data, tau)

    def backward(g):
        return ((s * (g - (g * s).sum(axis=1, keepdims=True))) / tau,)

    return Tensor._from_op(s, (logits,), backward, "softmax_temp")


def log_softmax_temp(logits: Tensor, tau: float) -> Tensor:
    tau = _check_tau(tau)
    if logits.ndim != 2:
        raise DimensionError(f"log_softmax_temp: expected (N, C) logits, got {logits.shape}")
    out = _log_softmax_np(logits.data / tau)
    s = np.exp(out)

    def backward(g):
        return ((g - s * g.sum(axis=1, keepdims=True)) / tau,)

    return Tensor._from_op(out, (logits,), backward, "log_softmax_temp")


def _check_distribution(p: np.ndarray, what: str, tol: float = 1e-6) -> None:
    if (p < -tol).any() or not np.allclose(p.sum(axis=1), 1.0, rtol=0.0, atol=tol):
        raise ValidationError(f"{what} rows must be probability distributions summing to 1")


def cross_entropy(logits: Tensor, target: np.ndarray | Tensor, label_smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross-entropy against a target distribution.

    Args:
        logits: raw scores of shape (N, C).
        target: one-hot or mixed distribution of shape (N, C); no gradient.
        label_smoothing: epsilon in (1 - eps) * target + eps / C.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs target {t.shape}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ParameterError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    _check_distribution(t, "cross_entropy target")
    n, c = logits.shape
    if label_smoothing:
        t = (1.0 - label_smoothing) * t + label_smoothing / c
    logp = _log_softmax_np(logits.data)
    loss = np.asarray(-(t * logp).sum() / n)

    def backward(g):
        return (float(g) * (np.exp(logp) - t) / n,)

    return Tensor._from_op(loss, (logits,), backward, "cross_entropy")


def kl_div(log_p_student: Tensor, p_teacher: np.ndarray | Tensor) -> Tensor:
    """Batch-mean KL(p_teacher || p_student) given the student's log-probs."""
    pt = p_teacher.data if isinstance(p_teacher, Tensor) else np.asarray(p_teacher, dtype=DTYPE)
    if log_p_student.ndim != 2 or pt.shape != log_p_student.shape:
        raise DimensionError(f"kl_div: student {log_p_student.shape} vs teacher {pt.shape}")
    _check_distribution(pt, "kl_div teacher")
    _check_distribution(np.exp(log_p_student.data), "kl_div student")
    n = pt.shape[0]
    pos = pt > 0
    log_pt = np.zeros_like(pt)
    log_pt[pos] = np.log(pt[pos])
    loss = np.asarray((pt * (log_pt - log_p_student.data)).sum() / n)

    def backward(g):
        return (-float(g) * pt / n,)

    return Tensor._from_op(loss, (log_p_student,), backward, "kl_div")
