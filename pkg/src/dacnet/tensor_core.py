"""Rank-5 tensor primitives with hand-written backward passes.

Activations are plain float64 ndarrays laid out as
(batch, channels, depth, height, width); the depth axis carries the
spectral dimension.  Every operation is a pure function of its inputs
(batch-norm state is passed in explicitly and handed back updated), so
calls on disjoint data are safe to run concurrently and identical inputs
always produce bit-identical outputs.  Convolutions iterate the batch
sample by sample with a fixed kernel-offset order, which keeps the
reduction order independent of batch size.

Backward passes are analytic gradients, checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _check_tensor5(x: np.ndarray, what: str) -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        raise ShapeError(f"{what}: expected a rank-5 (n, c, d, h, w) array, got "
                         f"{getattr(x, 'shape', type(x))}")
    if x.dtype != np.float64:
        raise ShapeError(f"{what}: expected float64 data, got {x.dtype}")


def _bc(v: np.ndarray) -> np.ndarray:
    """Broadcast a per-channel vector over (n, c, d, h, w)."""
    return v.reshape(1, -1, 1, 1, 1)


@dataclass
class ConvKernel:
    """A dense 3D convolution kernel: weights (c_out, c_in, k_d, k_h, k_w) plus bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.ndim != 5:
            raise ShapeError(f"kernel weights must be rank 5, got shape {self.weights.shape}")
        if min(self.weights.shape) < 1:
            raise ShapeError(f"kernel dims must all be >= 1, got {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match "
                             f"{self.weights.shape[0]} output channels")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def volume(self) -> int:
        kd, kh, kw = self.weights.shape[2:]
        return kd * kh * kw


def conv_output_dims(in_dims, kernel_dims, stride, pad):
    """Output spatial dims: floor((in + 2*pad - kernel) / stride) + 1, each >= 1."""
    out = []
    for i, (n, k, s, p) in enumerate(zip(in_dims, kernel_dims, stride, pad)):
        o = (n + 2 * p - k) // s + 1
        if o < 1:
            raise ShapeError(f"conv3d: axis {i} with size {n}, kernel {k}, stride {s}, "
                             f"pad {p} yields non-positive output dim {o}")
        out.append(o)
    return tuple(out)


def _pad5(x: np.ndarray, pad) -> np.ndarray:
    pd, ph, pw = pad
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def conv3d_forward(x: np.ndarray, kernel: ConvKernel,
                   stride=(1, 1, 1), pad=(0, 0, 0)) -> np.ndarray:
    """Zero-padded 3D cross-correlation plus bias.

    Each output element is the inner product of the kernel with the padded
    input window.  Samples are processed independently in batch order.
    """
    _check_tensor5(x, "conv3d input")
    w = kernel.weights
    co, ci, kd, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {ci}")
    do, ho, wo = conv_output_dims(x.shape[2:], (kd, kh, kw), stride, pad)
    sd, sh, sw = stride
    xp = _pad5(x, pad)
    n = x.shape[0]
    # per-offset weight slices made contiguous once so matmuls hit BLAS
    w_off = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    out = np.empty((n, co, do, ho, wo), dtype=np.float64)
    for i in range(n):
        acc = np.zeros((co, do * ho * wo))
        for a, b, c in itertools.product(range(kd), range(kh), range(kw)):
            win = xp[i, :, a:a + sd * do:sd, b:b + sh * ho:sh, c:c + sw * wo:sw]
            acc += w_off[a, b, c] @ win.reshape(ci, -1)
        if kernel.bias is not None:
            acc += kernel.bias[:, None]
        out[i] = acc.reshape(co, do, ho, wo)
    return out


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: ConvKernel,
                    stride=(1, 1, 1), pad=(0, 0, 0)):
    """Gradients of sum(grad_out * conv3d_forward(x, kernel)) w.r.t. x, weights, bias.

    Per-sample contributions to the weight and bias gradients are formed in
    full before being added to the running totals, so the accumulation
    order is the same whether a batch is processed whole or sample by
    sample.
    """
    _check_tensor5(x, "conv3d input")
    _check_tensor5(grad_out, "conv3d grad_out")
    w = kernel.weights
    co, ci, kd, kh, kw = w.shape
    do, ho, wo = conv_output_dims(x.shape[2:], (kd, kh, kw), stride, pad)
    if grad_out.shape != (x.shape[0], co, do, ho, wo):
        raise ShapeError(f"conv3d backward: grad shape {grad_out.shape} does not match "
                         f"forward output {(x.shape[0], co, do, ho, wo)}")
    sd, sh, sw = stride
    pd, ph, pw = pad
    xp = _pad5(x, pad)
    n, _, dd, hh, ww = x.shape
    w_off = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    grad_x = np.empty_like(x)
    grad_w = np.zeros_like(w)
    grad_b = np.zeros(co) if kernel.bias is not None else None
    for i in range(n):
        g = grad_out[i].reshape(co, -1)
        gw_i = np.empty_like(w)
        gxp_i = np.zeros(xp.shape[1:])
        for a, b, c in itertools.product(range(kd), range(kh), range(kw)):
            sl = (slice(None), slice(a, a + sd * do, sd),
                  slice(b, b + sh * ho, sh), slice(c, c + sw * wo, sw))
            win = xp[i][sl]
            gw_i[:, :, a, b, c] = g @ win.reshape(ci, -1).T
            gxp_i[sl] += (w_off[a, b, c].T @ g).reshape(ci, do, ho, wo)
        grad_w += gw_i
        grad_x[i] = gxp_i[:, pd:pd + dd, ph:ph + hh, pw:pw + ww]
        if grad_b is not None:
            grad_b += grad_out[i].sum(axis=(1, 2, 3))
    return grad_x, grad_w, grad_b


def global_avg_pool3d(x: np.ndarray) -> np.ndarray:
    """Mean over (d, h, w), returning an (n, c) matrix."""
    _check_tensor5(x, "global_avg_pool3d input")
    return x.mean(axis=(2, 3, 4))


def global_avg_pool3d_backward(grad_out: np.ndarray, in_shape) -> np.ndarray:
    n, c, d, h, w = in_shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"gap backward: grad shape {grad_out.shape} != {(n, c)}")
    g = np.empty(in_shape)
    g[:] = grad_out[:, :, None, None, None] / (d * h * w)
    return g


def avg_pool3d_forward(x: np.ndarray, window, stride=None) -> np.ndarray:
    """Windowed mean; trailing partial windows are dropped."""
    _check_tensor5(x, "avg_pool3d input")
    if stride is None:
        stride = window
    for i, (n, k) in enumerate(zip(x.shape[2:], window)):
        if k > n:
            raise ShapeError(f"avg_pool3d: window {k} larger than input axis {i} size {n}")
        if k < 1:
            raise ShapeError(f"avg_pool3d: window must be >= 1, got {window}")
    do, ho, wo = conv_output_dims(x.shape[2:], window, stride, (0, 0, 0))
    sd, sh, sw = stride
    acc = np.zeros((x.shape[0], x.shape[1], do, ho, wo))
    for a, b, c in itertools.product(range(window[0]), range(window[1]), range(window[2])):
        acc += x[:, :, a:a + sd * do:sd, b:b + sh * ho:sh, c:c + sw * wo:sw]
    return acc / (window[0] * window[1] * window[2])


def avg_pool3d_backward(grad_out: np.ndarray, in_shape, window, stride=None) -> np.ndarray:
    if stride is None:
        stride = window
    do, ho, wo = conv_output_dims(in_shape[2:], window, stride, (0, 0, 0))
    if grad_out.shape != (in_shape[0], in_shape[1], do, ho, wo):
        raise ShapeError(f"avg_pool3d backward: grad shape {grad_out.shape} does not match "
                         f"pooled output {(in_shape[0], in_shape[1], do, ho, wo)}")
    sd, sh, sw = stride
    g = grad_out / (window[0] * window[1] * window[2])
    gx = np.zeros(in_shape)
    for a, b, c in itertools.product(range(window[0]), range(window[1]), range(window[2])):
        gx[:, :, a:a + sd * do:sd, b:b + sh * ho:sh, c:c + sw * wo:sw] += g
    return gx


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    batches_seen: int = 0

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), 0)


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      state: BatchNormState, training: bool):
    """Per-channel normalization then affine scale/shift.

    Training mode normalizes with batch statistics and returns a state with
    running stats updated by momentum 0.9; eval mode uses the running
    statistics and requires at least one prior training update.
    Returns (y, new_state, cache).
    """
    _check_tensor5(x, "batchnorm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: scale/shift shaped {gamma.shape}/{beta.shape} "
                         f"for {c} channels")
    if training:
        mu = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        new_state = BatchNormState(
            BN_MOMENTUM * state.running_mean + (1.0 - BN_MOMENTUM) * mu,
            BN_MOMENTUM * state.running_var + (1.0 - BN_MOMENTUM) * var,
            state.batches_seen + 1,
        )
    else:
        if state.batches_seen == 0:
            raise StateError("batch-norm eval requested before any training update")
        mu, var = state.running_mean, state.running_var
        new_state = state
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - _bc(mu)) * _bc(inv_std)
    y = _bc(gamma) * xhat + _bc(beta)
    cache = (xhat, inv_std, gamma, x.shape, training)
    return y, new_state, cache


def batchnorm_backward(grad_out: np.ndarray, cache):
    xhat, inv_std, gamma, in_shape, training = cache
    if grad_out.shape != in_shape:
        raise ShapeError(f"batchnorm backward: grad shape {grad_out.shape} != {in_shape}")
    dgamma = (grad_out * xhat).sum(axis=(0, 2, 3, 4))
    dbeta = grad_out.sum(axis=(0, 2, 3, 4))
    if training:
        n, _, d, h, w = in_shape
        m = n * d * h * w
        dx = _bc(gamma * inv_std) / m * (m * grad_out - _bc(dbeta) - xhat * _bc(dgamma))
    else:
        dx = grad_out * _bc(gamma * inv_std)
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if grad_out.shape != mask.shape:
        raise ShapeError(f"relu backward: grad shape {grad_out.shape} != {mask.shape}")
    return grad_out * mask


def fully_connected_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    """y = x @ w.T + b for row-major batches; w is (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected: x {x.shape} incompatible with weights {w.shape}")
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, x


def fully_connected_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"fully_connected backward: grad shape {grad_out.shape} != "
                         f"{(x.shape[0], w.shape[0])}")
    dx = grad_out @ w
    dw = grad_out.T @ x
    db = grad_out.sum(axis=0)
    return dx, dw, db


def softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward through softmax given its output y."""
    if grad_out.shape != y.shape:
        raise ShapeError(f"softmax backward: grad shape {grad_out.shape} != {y.shape}")
    dot = (grad_out * y).sum(axis=-1, keepdims=True)
    return (grad_out - dot) * y


def cross_entropy_forward(logits: np.ndarray, targets: np.ndarray):
    """Mean negative log-likelihood of integer class targets under softmax(logits)."""
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, num_classes = logits.shape
    if targets.min() < 0 or targets.max() >= num_classes:
        raise ShapeError(f"cross_entropy: target class outside [0, {num_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), targets]))
    probs = softmax(logits)
    return loss, (probs, targets)


def cross_entropy_backward(cache) -> np.ndarray:
    probs, targets = cache
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), targets] -= 1.0
    return d / n


def dropout_forward(x: np.ndarray, p: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout; identity in eval mode or at p == 0."""
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise StateError("dropout in training mode needs an RNG")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask
