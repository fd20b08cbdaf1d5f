"""Staged 3D dense network built from dynamic attention convolutions.

The network is a stem conv followed by stages of dense blocks.  Each block
is batch-norm -> ReLU -> dynamic attention conv producing the stage's
growth-rate channels, concatenated onto the stage bundle.  The growth rate
doubles per stage (2^(m-1) * k0 for 1-based stage m).  Between stages a
transition (batch-norm -> ReLU -> 1x1x1 static conv -> 2x2x2 average pool)
carries the bundle down one resolution, and cross-stage feeds pool the stem
output and every earlier stage's final bundle to the new resolution and
concatenate them at the stage entry.  The classifier head is batch-norm ->
ReLU -> global average pool -> dropout -> affine.

Backward passes are hand-written over a tape recorded during forward.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .dac import DacCache, DacLayerParams, dac_backward, dac_forward, init_dac_layer
from .errors import ConfigError, DataError, ShapeError
from .tensor_core import (
    BatchNormState,
    ConvKernel,
    avg_pool3d_backward,
    avg_pool3d_forward,
    batchnorm_backward,
    batchnorm_forward,
    conv3d_backward,
    conv3d_forward,
    dropout_backward,
    dropout_forward,
    fully_connected_backward,
    fully_connected_forward,
    global_avg_pool3d,
    global_avg_pool3d_backward,
    relu_backward,
    relu_forward,
)

CHECKPOINT_MAGIC = b"DACN"
CHECKPOINT_VERSION = 1


def growth_rate(stage_index: int, k0: int) -> int:
    """Growth rate of 1-based stage m: 2^(m-1) * k0."""
    if stage_index < 1 or k0 < 1:
        raise ConfigError(f"growth_rate needs stage_index >= 1 and k0 >= 1, "
                          f"got {stage_index}, {k0}")
    return (2 ** (stage_index - 1)) * k0


@dataclass
class DenseNetConfig:
    """Architecture knobs; growth_rates must follow the doubling law from k0."""

    stages: tuple[int, ...] = (4, 6, 8)
    k0: int = 8
    growth_rates: tuple[int, ...] = (8, 16, 32)
    num_kernels: int = 4
    num_classes: int = 16
    bands: int = 200
    patch_size: int = 17
    dropout: float = 0.1
    temperature: float = 1.0
    use_bias: bool = True

    def __post_init__(self):
        self.stages = tuple(int(v) for v in self.stages)
        self.growth_rates = tuple(int(v) for v in self.growth_rates)
        self.validate()

    def validate(self):
        if not self.stages or any(v < 1 for v in self.stages):
            raise ConfigError(f"stages must be a non-empty list of counts >= 1, "
                              f"got {list(self.stages)}")
        if len(self.growth_rates) != len(self.stages):
            raise ConfigError(f"{len(self.growth_rates)} growth rates for "
                              f"{len(self.stages)} stages")
        for m, g in enumerate(self.growth_rates, start=1):
            expect = growth_rate(m, self.k0)
            if g != expect:
                raise ConfigError(f"growth_rates[{m - 1}] == {g} but 2^{m - 1} * k0 "
                                  f"== {expect} (k0 = {self.k0})")
        if self.num_kernels < 1:
            raise ConfigError(f"num_kernels must be >= 1, got {self.num_kernels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.bands < 1 or self.patch_size < 1:
            raise ConfigError(f"input dims must be >= 1, got bands={self.bands}, "
                              f"patch_size={self.patch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    @property
    def stem_channels(self) -> int:
        return 2 * self.k0

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return (self.bands, self.patch_size, self.patch_size)

    def to_dict(self) -> dict:
        return {
            "stages": list(self.stages),
            "k0": self.k0,
            "growth_rates": list(self.growth_rates),
            "num_kernels": self.num_kernels,
            "num_classes": self.num_classes,
            "bands": self.bands,
            "patch_size": self.patch_size,
            "dropout": self.dropout,
            "temperature": self.temperature,
            "use_bias": self.use_bias,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNetConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**doc)


def _halve(dims):
    return tuple(d // 2 if d >= 2 else d for d in dims)


def _pool_window(dims):
    return tuple(2 if d >= 2 else 1 for d in dims)


@dataclass
class LayerPlan:
    name: str
    kind: str           # dac | batchnorm | conv | affine
    c_in: int
    c_out: int
    in_dims: tuple
    out_dims: tuple
    kernel_volume: int = 0


@dataclass
class NetworkPlan:
    """Symbolic channel and resolution bookkeeping for one config."""

    cfg: DenseNetConfig
    resolutions: list[tuple]
    entries: list[int]
    finals: list[int]
    feed_channels: list[list[int]]   # per stage >= 2: concat widths after the transition part
    classifier_in: int
    layers: list[LayerPlan]

    @property
    def layer_count(self) -> int:
        cfg = self.cfg
        return 1 + sum(cfg.stages) + (len(cfg.stages) - 1) + 1


def plan_network(cfg: DenseNetConfig) -> NetworkPlan:
    num_stages = len(cfg.stages)
    res = [cfg.input_dims]
    for _ in range(num_stages - 1):
        res.append(_halve(res[-1]))
    entries, finals, feeds = [], [], []
    layers = [LayerPlan("stem.dac", "dac", 1, cfg.stem_channels,
                        cfg.input_dims, res[0], 27)]
    for s in range(num_stages):
        if s == 0:
            entry = cfg.stem_channels
            feeds.append([])
        else:
            # transition output keeps the previous final's width; feeds pool the
            # stem output and every earlier stage's final bundle to this resolution
            feed = [cfg.stem_channels] + finals[:s]
            feeds.append(feed)
            entry = finals[s - 1] + sum(feed)
        entries.append(entry)
        c = entry
        for j in range(cfg.stages[s]):
            name = f"stage{s + 1}.block{j + 1}"
            layers.append(LayerPlan(f"{name}.bn", "batchnorm", c, c, res[s], res[s]))
            layers.append(LayerPlan(f"{name}.dac", "dac", c, cfg.growth_rates[s],
                                    res[s], res[s], 27))
            c += cfg.growth_rates[s]
        finals.append(c)
        if s + 1 < num_stages:
            layers.append(LayerPlan(f"transition{s + 1}.bn", "batchnorm",
                                    c, c, res[s], res[s]))
            layers.append(LayerPlan(f"transition{s + 1}.conv", "conv",
                                    c, c, res[s], res[s], 1))
    layers.append(LayerPlan("head.bn", "batchnorm", finals[-1], finals[-1],
                            res[-1], res[-1]))
    layers.append(LayerPlan("head.fc", "affine", finals[-1], cfg.num_classes,
                            (1, 1, 1), (1, 1, 1)))
    return NetworkPlan(cfg, res, entries, finals, feeds, finals[-1], layers)


@dataclass
class _BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    state: BatchNormState


@dataclass
class _Block:
    bn: _BnLayer
    dac: DacLayerParams


@dataclass
class _Transition:
    bn: _BnLayer
    conv: ConvKernel


class NetworkState:
    """All parameters and batch-norm state of one network, plus a name registry.

    Learnable tensors are reachable by dotted name through `params()` /
    `set_param()`; `state_items()` additionally walks running statistics so
    checkpoints capture everything needed to resume or evaluate.
    """

    def __init__(self, cfg: DenseNetConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.plan = plan_network(cfg)
        self.training = False
        rng = np.random.default_rng(seed)
        self.stem = init_dac_layer(1, cfg.stem_channels, (3, 3, 3), cfg.num_kernels,
                                   rng, pad=(1, 1, 1), bias=cfg.use_bias)
        self.blocks: list[list[_Block]] = []
        self.transitions: list[_Transition] = []
        for s, nblocks in enumerate(cfg.stages):
            stage = []
            c = self.plan.entries[s]
            for _ in range(nblocks):
                bn = _BnLayer(np.ones(c), np.zeros(c), BatchNormState.fresh(c))
                layer = init_dac_layer(c, cfg.growth_rates[s], (3, 3, 3),
                                       cfg.num_kernels, rng, pad=(1, 1, 1),
                                       bias=cfg.use_bias)
                stage.append(_Block(bn, layer))
                c += cfg.growth_rates[s]
            if c != self.plan.finals[s]:
                raise ConfigError(f"stage {s + 1} bundle ends at {c} channels, "
                                  f"plan says {self.plan.finals[s]}")
            self.blocks.append(stage)
            if s + 1 < len(cfg.stages):
                bn = _BnLayer(np.ones(c), np.zeros(c), BatchNormState.fresh(c))
                bound = np.sqrt(6.0 / c)
                kernel = ConvKernel(rng.uniform(-bound, bound, size=(c, c, 1, 1, 1)),
                                    np.zeros(c) if cfg.use_bias else None)
                self.transitions.append(_Transition(bn, kernel))
        c = self.plan.classifier_in
        self.head_bn = _BnLayer(np.ones(c), np.zeros(c), BatchNormState.fresh(c))
        bound = np.sqrt(6.0 / c)
        self.head_w = rng.uniform(-bound, bound, size=(cfg.num_classes, c))
        self.head_b = np.zeros(cfg.num_classes)
        self._registry = self._build_registry()

    def _build_registry(self):
        entries = []

        def add_dac(prefix, layer: DacLayerParams):
            entries.append((f"{prefix}.weights", layer, "weights", True))
            if layer.biases is not None:
                entries.append((f"{prefix}.biases", layer, "biases", True))
            for attr in ("fc1_w", "fc1_b", "fc2_w", "fc2_b"):
                entries.append((f"{prefix}.{attr}", layer, attr, True))

        def add_bn(prefix, bn: _BnLayer):
            entries.append((f"{prefix}.gamma", bn, "gamma", True))
            entries.append((f"{prefix}.beta", bn, "beta", True))
            entries.append((f"{prefix}.running_mean", bn, "state.running_mean", False))
            entries.append((f"{prefix}.running_var", bn, "state.running_var", False))
            entries.append((f"{prefix}.batches_seen", bn, "state.batches_seen", False))

        add_dac("stem.dac", self.stem)
        for s, stage in enumerate(self.blocks):
            for j, blk in enumerate(stage):
                name = f"stage{s + 1}.block{j + 1}"
                add_bn(f"{name}.bn", blk.bn)
                add_dac(f"{name}.dac", blk.dac)
        for t, trans in enumerate(self.transitions):
            add_bn(f"transition{t + 1}.bn", trans.bn)
            entries.append((f"transition{t + 1}.conv.weights", trans.conv, "weights", True))
            if trans.conv.bias is not None:
                entries.append((f"transition{t + 1}.conv.bias", trans.conv, "bias", True))
        add_bn("head.bn", self.head_bn)
        entries.append(("head.fc.weights", self, "head_w", True))
        entries.append(("head.fc.bias", self, "head_b", True))
        return entries

    @staticmethod
    def _get(owner, path):
        obj = owner
        for part in path.split("."):
            obj = getattr(obj, part)
        return obj

    @staticmethod
    def _set(owner, path, value):
        parts = path.split(".")
        obj = owner
        for part in parts[:-1]:
            obj = getattr(obj, part)
        setattr(obj, parts[-1], value)

    def params(self) -> dict[str, np.ndarray]:
        """Learnable tensors by name, in fixed registry order."""
        return {name: self._get(owner, path)
                for name, owner, path, learnable in self._registry if learnable}

    def set_param(self, name: str, value: np.ndarray):
        for reg_name, owner, path, learnable in self._registry:
            if reg_name == name:
                if not learnable:
                    raise ConfigError(f"{name} is state, not a learnable parameter")
                self._set(owner, path, value)
                return
        raise ConfigError(f"unknown parameter {name}")

    def state_items(self):
        """(name, float64 array) for every tensor, running stats included."""
        out = []
        for name, owner, path, _ in self._registry:
            value = self._get(owner, path)
            if name.endswith("batches_seen"):
                value = np.array(float(value))
            out.append((name, value))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: np.array(arr, dtype=np.float64, copy=True)
                for name, arr in self.state_items()}

    def load_state(self, tensors: dict[str, np.ndarray]):
        expected = {name for name, *_ in self._registry}
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        if missing or extra:
            raise DataError(f"checkpoint tensor set mismatch; missing: {missing[:4]}, "
                            f"unexpected: {extra[:4]}")
        for name, owner, path, _ in self._registry:
            arr = tensors[name]
            if name.endswith("batches_seen"):
                self._set(owner, path, int(round(float(np.asarray(arr).reshape(-1)[0]))))
                continue
            current = self._get(owner, path)
            if arr.shape != current.shape:
                raise DataError(f"checkpoint tensor {name} shaped {arr.shape}, "
                                f"expected {current.shape}")
            self._set(owner, path, np.array(arr, dtype=np.float64))

    @property
    def layer_count(self) -> int:
        return self.plan.layer_count


def build_network(cfg: DenseNetConfig, seed: int = 0) -> NetworkState:
    """Deterministically initialized network; same seed, same bits."""
    return NetworkState(cfg, seed)


@dataclass
class _HeadTape:
    bn_cache: tuple
    relu_mask: np.ndarray
    gap_in_shape: tuple
    drop_mask: np.ndarray | None
    fc_in: np.ndarray


@dataclass
class _TransTape:
    bn_cache: tuple
    relu_mask: np.ndarray
    conv_in: np.ndarray
    pool_in_shape: tuple
    pool_window: tuple


@dataclass
class Tape:
    x_shape: tuple
    stem_cache: DacCache
    stem_shape: tuple
    block_tapes: list
    trans_tapes: list
    entry_parts: list     # per stage: widths of concatenated entry parts, or None
    feed_chains: list     # per stage: pooling chains per feed source, or None
    final_shapes: list
    head: _HeadTape | None = None


def _pool_hops(arr: np.ndarray, hops: int):
    chain = []
    for _ in range(hops):
        window = _pool_window(arr.shape[2:])
        chain.append((arr.shape, window))
        arr = avg_pool3d_forward(arr, window)
    return arr, chain


def _unpool_hops(grad: np.ndarray, chain) -> np.ndarray:
    for in_shape, window in reversed(chain):
        grad = avg_pool3d_backward(grad, in_shape, window)
    return grad


def net_forward(net: NetworkState, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None, probe=None):
    """Run the full network; returns (logits, tape).

    `probe(name, array)`, when given, sees every named layer output in
    order, which the trainer uses to locate the first non-finite layer.
    """
    cfg = net.cfg
    expected = (x.shape[0], 1) + cfg.input_dims
    if x.ndim != 5 or x.shape != expected:
        raise ShapeError(f"network input shaped {x.shape}, config expects {expected}")
    net.training = training
    stem_y, stem_cache = dac_forward(x, net.stem, cfg.temperature)
    if probe:
        probe("stem.dac", stem_y)
    num_stages = len(cfg.stages)
    finals = []
    block_tapes, trans_tapes = [], []
    entry_parts = [None] * num_stages
    feed_chains = [None] * num_stages
    for s in range(num_stages):
        if s == 0:
            bundle = stem_y
        else:
            trans, t_tape = _transition_forward(net, s - 1, finals[s - 1], training, probe)
            trans_tapes.append(t_tape)
            parts = [trans]
            chains = []
            sources = [(stem_y, s)] + [(finals[t], s - t) for t in range(s)]
            for arr, hops in sources:
                pooled, chain = _pool_hops(arr, hops)
                parts.append(pooled)
                chains.append(chain)
            entry_parts[s] = [p.shape[1] for p in parts]
            feed_chains[s] = chains
            bundle = np.concatenate(parts, axis=1)
        stage_tape = []
        for j, blk in enumerate(net.blocks[s]):
            name = f"stage{s + 1}.block{j + 1}"
            yb, new_state, bn_cache = batchnorm_forward(bundle, blk.bn.gamma,
                                                        blk.bn.beta, blk.bn.state,
                                                        training)
            blk.bn.state = new_state
            if probe:
                probe(f"{name}.bn", yb)
            yr, relu_mask = relu_forward(yb)
            yd, dac_cache = dac_forward(yr, blk.dac, cfg.temperature)
            if probe:
                probe(f"{name}.dac", yd)
            stage_tape.append((bn_cache, relu_mask, dac_cache, bundle.shape[1]))
            bundle = np.concatenate([bundle, yd], axis=1)
        block_tapes.append(stage_tape)
        finals.append(bundle)
    final = finals[-1]
    yb, new_state, bn_cache = batchnorm_forward(final, net.head_bn.gamma,
                                                net.head_bn.beta, net.head_bn.state,
                                                training)
    net.head_bn.state = new_state
    if probe:
        probe("head.bn", yb)
    yr, relu_mask = relu_forward(yb)
    pooled = global_avg_pool3d(yr)
    dropped, drop_mask = dropout_forward(pooled, cfg.dropout, training, rng)
    logits, fc_in = fully_connected_forward(dropped, net.head_w, net.head_b)
    if probe:
        probe("head.fc", logits)
    tape = Tape(x.shape, stem_cache, stem_y.shape, block_tapes, trans_tapes,
                entry_parts, feed_chains, [a.shape for a in finals],
                _HeadTape(bn_cache, relu_mask, yr.shape, drop_mask, fc_in))
    return logits, tape


def _transition_forward(net, t_index, bundle, training, probe):
    trans = net.transitions[t_index]
    yb, new_state, bn_cache = batchnorm_forward(bundle, trans.bn.gamma, trans.bn.beta,
                                                trans.bn.state, training)
    trans.bn.state = new_state
    if probe:
        probe(f"transition{t_index + 1}.bn", yb)
    yr, relu_mask = relu_forward(yb)
    yc = conv3d_forward(yr, trans.conv)
    if probe:
        probe(f"transition{t_index + 1}.conv", yc)
    window = _pool_window(yc.shape[2:])
    pooled = avg_pool3d_forward(yc, window)
    return pooled, _TransTape(bn_cache, relu_mask, yr, yc.shape, window)


def _store_dac_grads(grads: dict, prefix: str, g, layer: DacLayerParams):
    grads[f"{prefix}.weights"] = g.dweights
    if layer.biases is not None:
        grads[f"{prefix}.biases"] = g.dbiases
    grads[f"{prefix}.fc1_w"] = g.dfc1_w
    grads[f"{prefix}.fc1_b"] = g.dfc1_b
    grads[f"{prefix}.fc2_w"] = g.dfc2_w
    grads[f"{prefix}.fc2_b"] = g.dfc2_b


def net_backward(net: NetworkState, tape: Tape, grad_logits: np.ndarray):
    """Gradients of a scalar loss with upstream grad_logits; returns (grads, grad_input)."""
    cfg = net.cfg
    grads: dict[str, np.ndarray] = {}
    head = tape.head
    g, dw, db = fully_connected_backward(grad_logits, head.fc_in, net.head_w)
    grads["head.fc.weights"] = dw
    grads["head.fc.bias"] = db
    g = dropout_backward(g, head.drop_mask)
    g = global_avg_pool3d_backward(g, head.gap_in_shape)
    g = relu_backward(g, head.relu_mask)
    g, dgamma, dbeta = batchnorm_backward(g, head.bn_cache)
    grads["head.bn.gamma"] = dgamma
    grads["head.bn.beta"] = dbeta

    num_stages = len(cfg.stages)
    g_finals = [np.zeros(shape) for shape in tape.final_shapes]
    g_finals[-1] += g
    g_stem = np.zeros(tape.stem_shape)
    for s in range(num_stages - 1, -1, -1):
        g_bundle = g_finals[s]
        for j in range(len(net.blocks[s]) - 1, -1, -1):
            bn_cache, relu_mask, dac_cache, in_channels = tape.block_tapes[s][j]
            blk = net.blocks[s][j]
            name = f"stage{s + 1}.block{j + 1}"
            g_keep = g_bundle[:, :in_channels]
            g_new = g_bundle[:, in_channels:]
            dg = dac_backward(g_new, dac_cache, blk.dac)
            _store_dac_grads(grads, f"{name}.dac", dg, blk.dac)
            gb = relu_backward(dg.dx, relu_mask)
            gb, dgamma, dbeta = batchnorm_backward(gb, bn_cache)
            grads[f"{name}.bn.gamma"] = dgamma
            grads[f"{name}.bn.beta"] = dbeta
            g_bundle = g_keep + gb
        if s == 0:
            g_stem += g_bundle
        else:
            widths = tape.entry_parts[s]
            offsets = np.cumsum([0] + widths)
            parts = [g_bundle[:, offsets[i]:offsets[i + 1]] for i in range(len(widths))]
            g_trans = parts[0]
            t_tape = tape.trans_tapes[s - 1]
            gt = avg_pool3d_backward(g_trans, t_tape.pool_in_shape, t_tape.pool_window)
            trans = net.transitions[s - 1]
            gt, dw, db = conv3d_backward(gt, t_tape.conv_in, trans.conv)
            grads[f"transition{s}.conv.weights"] = dw
            if trans.conv.bias is not None:
                grads[f"transition{s}.conv.bias"] = db
            gt = relu_backward(gt, t_tape.relu_mask)
            gt, dgamma, dbeta = batchnorm_backward(gt, t_tape.bn_cache)
            grads[f"transition{s}.bn.gamma"] = dgamma
            grads[f"transition{s}.bn.beta"] = dbeta
            g_finals[s - 1] += gt
            chains = tape.feed_chains[s]
            g_stem += _unpool_hops(parts[1], chains[0])
            for t in range(s):
                g_finals[t] += _unpool_hops(parts[2 + t], chains[1 + t])
    dg = dac_backward(g_stem, tape.stem_cache, net.stem)
    _store_dac_grads(grads, "stem.dac", dg, net.stem)
    return grads, dg.dx


def first_nonfinite_layer(net: NetworkState, x: np.ndarray, training: bool = True,
                          rng: np.random.Generator | None = None) -> str | None:
    """Replay a forward pass and name the first layer emitting NaN/Inf, if any."""
    found: list[str] = []

    def probe(name, arr):
        if not found and not np.isfinite(arr).all():
            found.append(name)

    net_forward(net, x, training=training, rng=rng, probe=probe)
    return found[0] if found else None


def save_checkpoint(net: NetworkState, path, run_config: dict | None = None):
    """Binary checkpoint: magic, version, canonical config JSON, named f64 tensors."""
    doc = {"model": net.cfg.to_dict(), "seed": net.seed}
    if run_config:
        doc["run"] = run_config
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in net.state_items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            if data.ndim:
                f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def read_checkpoint_tensors(path):
    """Parse a checkpoint into (config_doc, {name: array}) without building a network."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"not a checkpoint: magic {raw[:4]!r} != {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint version {version} is not supported "
                        f"(this build reads version {CHECKPOINT_VERSION})")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    try:
        doc = json.loads(raw[pos:pos + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint config block unreadable: {exc}") from exc
    pos += blob_len
    tensors = {}
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise DataError("checkpoint truncated inside a tensor header")
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos) if ndim else ()
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        end = pos + 8 * count
        if end > len(raw):
            raise DataError(f"checkpoint truncated: tensor {name} needs {8 * count} "
                            f"bytes, {len(raw) - pos} remain")
        tensors[name] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(shape).copy()
        pos = end
    return doc, tensors


def load_checkpoint(path):
    """Rebuild a network from a checkpoint; returns (net, config_doc)."""
    doc, tensors = read_checkpoint_tensors(path)
    if "model" not in doc:
        raise DataError("checkpoint config lacks a 'model' section")
    cfg = DenseNetConfig.from_dict(doc["model"])
    net = build_network(cfg, seed=int(doc.get("seed", 0)))
    net.load_state(tensors)
    return net, doc
