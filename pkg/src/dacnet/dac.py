"""Dynamic attention convolution: K parallel kernels mixed per input sample.

A squeeze-style branch (global average pool, two affine maps with a ReLU
between them, softmax) turns each input into K simplex weights.  The
effective kernel for a sample is the convex combination of the K stored
kernels under those weights, and the bias mixes with the same weights.
The layer also carries the analytical multiply-add cost model used by the
network auditor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import (
    ConvKernel,
    conv3d_backward,
    conv3d_forward,
    fully_connected_backward,
    fully_connected_forward,
    global_avg_pool3d,
    global_avg_pool3d_backward,
    relu_backward,
    relu_forward,
    softmax,
)


def attention_reduction(c_in: int) -> int:
    """Hidden width of the attention branch: a quarter of c_in, floored at 1."""
    return max(1, c_in // 4)


@dataclass
class DacLayerParams:
    """Parameters of one dynamic attention convolution layer.

    weights is (K, c_out, c_in, k_d, k_h, k_w); biases is (K, c_out) or None.
    fc1 maps c_in -> attention_reduction(c_in), fc2 maps that to K logits.
    """

    weights: np.ndarray
    biases: np.ndarray | None
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    stride: tuple = (1, 1, 1)
    pad: tuple = (0, 0, 0)

    def __post_init__(self):
        if self.weights.ndim != 6:
            raise ShapeError(f"dac weights must be rank 6, got {self.weights.shape}")
        k, c_out = self.weights.shape[:2]
        if k < 1:
            raise ShapeError("dac layer needs K >= 1 kernels")
        if self.biases is not None and self.biases.shape != (k, c_out):
            raise ShapeError(f"dac biases shaped {self.biases.shape}, expected {(k, c_out)}")
        r = attention_reduction(self.c_in)
        if self.fc1_w.shape != (r, self.c_in) or self.fc2_w.shape != (k, r):
            raise ShapeError(f"attention maps shaped {self.fc1_w.shape}/{self.fc2_w.shape} "
                             f"do not fit c_in={self.c_in}, K={k}")

    @property
    def num_kernels(self) -> int:
        return self.weights.shape[0]

    @property
    def c_out(self) -> int:
        return self.weights.shape[1]

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_volume(self) -> int:
        kd, kh, kw = self.weights.shape[3:]
        return kd * kh * kw

    @property
    def kernels(self) -> list[ConvKernel]:
        return [ConvKernel(self.weights[k],
                           None if self.biases is None else self.biases[k])
                for k in range(self.num_kernels)]


def init_dac_layer(c_in: int, c_out: int, kernel_dims, num_kernels: int,
                   rng: np.random.Generator, stride=(1, 1, 1), pad=(0, 0, 0),
                   bias: bool = True) -> DacLayerParams:
    """He-style fan-in uniform init for each kernel; fc2 starts at zero so the
    attention opens uniform and early training behaves like an averaged static conv."""
    kd, kh, kw = kernel_dims
    fan_in = c_in * kd * kh * kw
    bound = np.sqrt(6.0 / fan_in)
    weights = rng.uniform(-bound, bound, size=(num_kernels, c_out, c_in, kd, kh, kw))
    biases = np.zeros((num_kernels, c_out)) if bias else None
    r = attention_reduction(c_in)
    fc1_bound = np.sqrt(6.0 / c_in)
    fc1_w = rng.uniform(-fc1_bound, fc1_bound, size=(r, c_in))
    fc1_b = np.zeros(r)
    fc2_w = np.zeros((num_kernels, r))
    fc2_b = np.zeros(num_kernels)
    return DacLayerParams(weights, biases, fc1_w, fc1_b, fc2_w, fc2_b,
                          tuple(stride), tuple(pad))


@dataclass
class _AttentionCache:
    pooled: np.ndarray
    pre_act: np.ndarray
    hidden: np.ndarray
    pi: np.ndarray
    temperature: float
    in_shape: tuple


def _attention_forward(x: np.ndarray, p: DacLayerParams, temperature: float):
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    if x.shape[1] != p.c_in:
        raise ShapeError(f"attention: input has {x.shape[1]} channels, layer expects {p.c_in}")
    pooled = global_avg_pool3d(x)
    pre_act, _ = fully_connected_forward(pooled, p.fc1_w, p.fc1_b)
    hidden, _ = relu_forward(pre_act)
    logits, _ = fully_connected_forward(hidden, p.fc2_w, p.fc2_b)
    pi = softmax(logits / temperature)
    return pi, _AttentionCache(pooled, pre_act, hidden, pi, temperature, x.shape)


def attention_weights(x: np.ndarray, p: DacLayerParams, temperature: float = 1.0) -> np.ndarray:
    """Per-sample simplex weights over the K kernels, one row per batch sample."""
    pi, _ = _attention_forward(x, p, temperature)
    return pi


def _attention_backward(grad_pi: np.ndarray, cache: _AttentionCache, p: DacLayerParams):
    pi = cache.pi
    grad_logits = (grad_pi - (grad_pi * pi).sum(axis=1, keepdims=True)) * pi
    grad_logits = grad_logits / cache.temperature
    dhidden, dfc2_w, dfc2_b = fully_connected_backward(grad_logits, cache.hidden, p.fc2_w)
    dpre = relu_backward(dhidden, cache.pre_act > 0)
    dpooled, dfc1_w, dfc1_b = fully_connected_backward(dpre, cache.pooled, p.fc1_w)
    dx = global_avg_pool3d_backward(dpooled, cache.in_shape)
    return dx, dfc1_w, dfc1_b, dfc2_w, dfc2_b


def aggregate_kernels(pi_row: np.ndarray, p: DacLayerParams) -> ConvKernel:
    """Element-wise convex combination of the K kernels and biases."""
    if pi_row.shape != (p.num_kernels,):
        raise ShapeError(f"attention row shaped {pi_row.shape}, layer has {p.num_kernels} kernels")
    w = np.tensordot(pi_row, p.weights, axes=(0, 0))
    b = pi_row @ p.biases if p.biases is not None else None
    return ConvKernel(w, b)


@dataclass
class DacCache:
    x: np.ndarray
    attention: _AttentionCache
    agg_weights: np.ndarray
    agg_biases: np.ndarray | None
    y_shape: tuple
    weights_shape: tuple


@dataclass
class DacGrads:
    dx: np.ndarray
    dweights: np.ndarray
    dbiases: np.ndarray | None
    dfc1_w: np.ndarray
    dfc1_b: np.ndarray
    dfc2_w: np.ndarray
    dfc2_b: np.ndarray


def dac_forward(x: np.ndarray, p: DacLayerParams, temperature: float = 1.0):
    """Convolve each sample with its own attention-aggregated kernel.

    Activation and batch-norm are applied by the enclosing block, not here.
    Returns (y, cache) with the cache holding everything backward needs.
    """
    pi, att = _attention_forward(x, p, temperature)
    agg_w = np.tensordot(pi, p.weights, axes=(1, 0))
    agg_b = pi @ p.biases if p.biases is not None else None
    n = x.shape[0]
    slices = []
    for i in range(n):
        k = ConvKernel(agg_w[i], None if agg_b is None else agg_b[i])
        slices.append(conv3d_forward(x[i:i + 1], k, p.stride, p.pad))
    y = np.concatenate(slices, axis=0) if n else np.empty((0, p.c_out, 0, 0, 0))
    cache = DacCache(x, att, agg_w, agg_b, y.shape, p.weights.shape)
    return y, cache


def dac_backward(grad_y: np.ndarray, cache: DacCache, p: DacLayerParams) -> DacGrads:
    """Exact gradients through both the aggregation path and the attention path."""
    if p.weights.shape != cache.weights_shape:
        raise ShapeError(f"dac backward: cache built for kernels {cache.weights_shape}, "
                         f"layer now has {p.weights.shape}")
    if grad_y.shape != cache.y_shape:
        raise ShapeError(f"dac backward: grad shape {grad_y.shape} != forward "
                         f"output {cache.y_shape}")
    pi = cache.attention.pi
    n, num_k = pi.shape
    dweights = np.zeros_like(p.weights)
    dbiases = np.zeros_like(p.biases) if p.biases is not None else None
    dx = np.empty_like(cache.x)
    dpi = np.zeros((n, num_k))
    flat_w = p.weights.reshape(num_k, -1)
    for i in range(n):
        k_i = ConvKernel(cache.agg_weights[i],
                         None if cache.agg_biases is None else cache.agg_biases[i])
        gx_i, gw_i, gb_i = conv3d_backward(grad_y[i:i + 1], cache.x[i:i + 1], k_i,
                                           p.stride, p.pad)
        dx[i] = gx_i[0]
        for k in range(num_k):
            dweights[k] += pi[i, k] * gw_i
            if dbiases is not None:
                dbiases[k] += pi[i, k] * gb_i
        dpi[i] = flat_w @ gw_i.ravel()
        if p.biases is not None:
            dpi[i] += p.biases @ gb_i
    if num_k > 1:
        dx_att, dfc1_w, dfc1_b, dfc2_w, dfc2_b = _attention_backward(dpi, cache.attention, p)
        dx = dx + dx_att
    else:
        # softmax over a single logit is constant, so its jacobian vanishes
        dfc1_w = np.zeros_like(p.fc1_w)
        dfc1_b = np.zeros_like(p.fc1_b)
        dfc2_w = np.zeros_like(p.fc2_w)
        dfc2_b = np.zeros_like(p.fc2_b)
    return DacGrads(dx, dweights, dbiases, dfc1_w, dfc1_b, dfc2_w, dfc2_b)


def attention_cost(spatial_elems: int, c_in: int, num_kernels: int) -> int:
    """Multiply-adds spent computing the attention weights for one sample."""
    if min(spatial_elems, c_in, num_kernels) < 1:
        raise ConfigError("attention_cost arguments must all be >= 1")
    return spatial_elems * c_in + (c_in * c_in) // 4 + (c_in * num_kernels) // 4


def aggregation_cost(c_in: int, c_out: int, kernel_volume: int, num_kernels: int) -> int:
    """Multiply-adds spent mixing K kernels and biases for one sample."""
    if min(c_in, c_out, kernel_volume, num_kernels) < 1:
        raise ConfigError("aggregation_cost arguments must all be >= 1")
    return num_kernels * c_in * c_out * kernel_volume + num_kernels * c_out


def conv_cost(out_spatial_elems: int, c_in: int, c_out: int, kernel_volume: int) -> int:
    """Multiply-adds of the convolution itself for one sample."""
    if min(out_spatial_elems, c_in, c_out, kernel_volume) < 1:
        raise ConfigError("conv_cost arguments must all be >= 1")
    return out_spatial_elems * c_in * c_out * kernel_volume
