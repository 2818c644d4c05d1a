"""Forward and backward passes for the layers of the volumetric classifier.

All spatial tensors are channels-last ``(N, X, Y, Z, C)``.  Each ``*_forward``
returns ``(out, cache)`` and the matching ``*_backward`` consumes that cache.
The functions are dtype-agnostic: float32 for training, float64 for checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadLabel, BadRate, DegenerateBatch, ShapeMismatch, SpatialTooSmall, StaleRecord

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
BCE_CLAMP = 1e-7


# --------------------------------------------------------------------------
# Conv3D (valid padding, stride 1)
# --------------------------------------------------------------------------

@dataclass
class Conv3DParams:
    weights: np.ndarray  # (k, k, k, C_in, C_out)
    bias: np.ndarray     # (C_out,)

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 5 or not (w.shape[0] == w.shape[1] == w.shape[2] >= 1):
            raise ShapeMismatch(f"conv weights must be (k,k,k,C_in,C_out), got {w.shape}")
        if b.shape != (w.shape[4],):
            raise ShapeMismatch(f"conv bias shape {b.shape} != ({w.shape[4]},)")

    @property
    def kernel(self):
        return self.weights.shape[0]


def conv3d_forward(x, p: Conv3DParams):
    """out[n,a,b,c,o] = bias[o] + sum_{i,j,l,m} x[n,a+i,b+j,c+l,m] * w[i,j,l,m,o].

    Evaluated as k^3 shifted matrix products, which keeps memory at the size
    of one output instead of a full im2col buffer.
    """
    w = p.weights
    k = w.shape[0]
    if x.ndim != 5 or x.shape[4] != w.shape[3]:
        raise ShapeMismatch(f"conv input {x.shape} incompatible with weights {w.shape}")
    n, X, Y, Z, cin = x.shape
    ox, oy, oz = X - k + 1, Y - k + 1, Z - k + 1
    if min(ox, oy, oz) < 1:
        raise ShapeMismatch(f"spatial extents {x.shape[1:4]} smaller than kernel {k}")
    cout = w.shape[4]
    out = np.zeros((n * ox * oy * oz, cout), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                patch = x[:, i:i + ox, j:j + oy, l:l + oz, :].reshape(-1, cin)
                out += patch @ w[i, j, l]
    out += p.bias
    return out.reshape(n, ox, oy, oz, cout), (x, p)


def conv3d_backward(cache, grad_out):
    x, p = cache
    w = p.weights
    k = w.shape[0]
    n, X, Y, Z, cin = x.shape
    ox, oy, oz = X - k + 1, Y - k + 1, Z - k + 1
    cout = w.shape[4]
    if grad_out.shape != (n, ox, oy, oz, cout):
        raise ShapeMismatch(f"grad_out {grad_out.shape} != expected {(n, ox, oy, oz, cout)}")
    g = grad_out.reshape(-1, cout)
    grad_x = np.zeros_like(x, dtype=np.result_type(x, grad_out))
    grad_w = np.zeros_like(w, dtype=np.result_type(w, grad_out))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                patch = x[:, i:i + ox, j:j + oy, l:l + oz, :].reshape(-1, cin)
                grad_w[i, j, l] = patch.T @ g
                grad_x[:, i:i + ox, j:j + oy, l:l + oz, :] += (g @ w[i, j, l].T).reshape(n, ox, oy, oz, cin)
    grad_b = g.sum(axis=0)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# MaxPool3D, window 2, stride 2, floor semantics
# --------------------------------------------------------------------------

@dataclass
class ArgmaxRecord:
    input_shape: tuple
    # flat index 0..7 of the winner inside each window, shape (N, X2, Y2, Z2, C)
    winners: np.ndarray = field(repr=False)


def maxpool3d_forward(x, window=2):
    if window != 2:
        raise ValueError("only 2x2x2 pooling is supported")
    n, X, Y, Z, c = x.shape
    if min(X, Y, Z) < 2:
        raise SpatialTooSmall(f"spatial extents {x.shape[1:4]} too small for 2x2x2 pooling")
    x2, y2, z2 = X // 2, Y // 2, Z // 2
    crop = x[:, :2 * x2, :2 * y2, :2 * z2, :]
    win = crop.reshape(n, x2, 2, y2, 2, z2, 2, c).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    win = win.reshape(n, x2, y2, z2, c, 8)
    # argmax returns the first occurrence, in (i, j, l) row-major window order
    winners = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, winners[..., None], axis=-1)[..., 0]
    return out, ArgmaxRecord(tuple(x.shape), winners)


def maxpool3d_backward(record: ArgmaxRecord, grad_out):
    n, X, Y, Z, c = record.input_shape
    x2, y2, z2 = X // 2, Y // 2, Z // 2
    if grad_out.shape != record.winners.shape:
        raise StaleRecord(f"grad_out {grad_out.shape} does not match pooling record {record.winners.shape}")
    routed = np.zeros((n, x2, y2, z2, c, 8), dtype=grad_out.dtype)
    np.put_along_axis(routed, record.winners[..., None], grad_out[..., None], axis=-1)
    routed = routed.reshape(n, x2, y2, z2, c, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    grad_x = np.zeros(record.input_shape, dtype=grad_out.dtype)
    grad_x[:, :2 * x2, :2 * y2, :2 * z2, :] = routed.reshape(n, 2 * x2, 2 * y2, 2 * z2, c)
    return grad_x


# --------------------------------------------------------------------------
# Batch normalization over all non-channel axes
# --------------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON
    mode: str = "train"

    @classmethod
    def fresh(cls, channels, dtype=np.float32, **kw):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


def batchnorm_forward(x, s: BatchNormState, mode=None):
    """Returns ``(out, cache)``; train mode updates ``s``'s running stats in place."""
    mode = mode or s.mode
    c = x.shape[-1]
    if s.gamma.shape != (c,):
        raise ShapeMismatch(f"batchnorm has {s.gamma.shape[0]} channels, input has {c}")
    axes = tuple(range(x.ndim - 1))
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(s.running_var + s.epsilon)
        x_hat = (x - s.running_mean) * inv_std
        return s.gamma * x_hat + s.beta, None
    count = x.size // c
    if count < 2:
        raise DegenerateBatch(f"batch statistics need >= 2 values per channel, got {count}")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + s.epsilon)
    x_hat = (x - mean) * inv_std
    out = s.gamma * x_hat + s.beta
    m = s.momentum
    s.running_mean[...] = m * s.running_mean + (1.0 - m) * mean
    s.running_var[...] = m * s.running_var + (1.0 - m) * var
    return out, (x_hat, inv_std, s.gamma)


def batchnorm_backward(cache, grad_out):
    """Full train-mode gradient, including the dependence of mean/var on x."""
    if cache is None:
        raise DegenerateBatch("batchnorm backward needs a train-mode cache")
    x_hat, inv_std, gamma = cache
    axes = tuple(range(grad_out.ndim - 1))
    count = grad_out.size // grad_out.shape[-1]
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_x = (gamma * inv_std / count) * (count * grad_out - grad_beta - x_hat * grad_gamma)
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# Global average pooling, dense, activations, dropout, loss
# --------------------------------------------------------------------------

def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2, 3)), x.shape


def global_avg_pool_backward(input_shape, grad_out):
    n, X, Y, Z, c = input_shape
    scale = 1.0 / (X * Y * Z)
    return np.broadcast_to((grad_out * scale)[:, None, None, None, :], input_shape).copy()


@dataclass
class DenseParams:
    weights: np.ndarray  # (F_in, F_out)
    bias: np.ndarray     # (F_out,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeMismatch(f"dense weights {self.weights.shape} / bias {self.bias.shape} inconsistent")


def dense_forward(x, p: DenseParams):
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise ShapeMismatch(f"dense input {x.shape} incompatible with weights {p.weights.shape}")
    return x @ p.weights + p.bias, (x, p)


def dense_backward(cache, grad_out):
    x, p = cache
    if grad_out.shape != (x.shape[0], p.weights.shape[1]):
        raise ShapeMismatch(f"dense grad_out {grad_out.shape} has the wrong shape")
    return grad_out @ p.weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def sigmoid(x):
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.result_type(x), copy=False)


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(s, grad_out):
    return grad_out * s * (1.0 - s)


def dropout_mask(shape, rate, seed, dtype=np.float32):
    keep = 1.0 - rate
    rng = np.random.default_rng(seed)
    return ((rng.random(shape) < keep) / keep).astype(dtype)


def dropout_forward(x, rate, mode="train", seed=0, mask=None):
    """Inverted dropout.  ``mask`` may be supplied to replay a fixed pattern."""
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if mask is None:
        mask = dropout_mask(x.shape, rate, seed, x.dtype)
    return x * mask, mask


def dropout_backward(mask, grad_out):
    return grad_out if mask is None else grad_out * mask


def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient w.r.t. ``p`` (shape (N, 1))."""
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise BadLabel(f"labels must be 0 or 1, got {np.unique(y)}")
    p = np.asarray(p)
    n = p.shape[0]
    y = y.reshape(p.shape).astype(p.dtype)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)) * (p.size / n)
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    grad = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / n
    return float(loss), grad.astype(p.dtype)
