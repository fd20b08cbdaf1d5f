"""Optimization loop, LR schedule, OA/AA/Kappa metrics, and the cost auditor."""

from __future__ import annotations

import time
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .dac import aggregation_cost, attention_cost, conv_cost
from .densenet3d import DenseNetConfig, NetworkState, first_nonfinite_layer, net_backward, net_forward, plan_network
from .errors import ConfigError, DataError, NumericAbort
from .hsi_data import PatchSet
from .tensor_core import cross_entropy_backward, cross_entropy_forward

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    optimizer: str = "sgd_momentum"
    initial_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    lr_drop_epochs: tuple[int, ...] = (30, 60, 90)
    seed: int = 0

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(v) for v in self.lr_drop_epochs)
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")

    @classmethod
    def sgd100(cls, **overrides) -> "TrainConfig":
        """Default recipe: SGD momentum 0.9, lr 0.1 dropping 10x at 30/60/90, 100 epochs."""
        return cls(**overrides)

    @classmethod
    def adam80(cls, **overrides) -> "TrainConfig":
        """Alternate recipe: Adam at lr 1e-3 for 80 epochs, no schedule drops."""
        base = dict(optimizer="adam", initial_lr=1e-3, epochs=80, lr_drop_epochs=())
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "initial_lr": self.initial_lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_drop_epochs": list(self.lr_drop_epochs),
            "seed": self.seed,
        }


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """initial_lr scaled by 10^-(number of drop epochs already reached)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    drops = sum(1 for d in cfg.lr_drop_epochs if epoch >= d)
    return cfg.initial_lr * 10.0 ** (-drops)


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float, weight_decay: float):
    """v <- momentum*v + (g + wd*w); w <- w - lr*v.  Returns (new_param, new_velocity)."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ConfigError(f"optimizer shapes disagree: {param.shape}, {grad.shape}, "
                          f"{velocity.shape}")
    new_v = momentum * velocity + (grad + weight_decay * param)
    return param - lr * new_v, new_v


def adam_step(param, grad, m, v, step: int, lr: float, weight_decay: float,
              betas=ADAM_BETAS, eps=ADAM_EPS):
    """Bias-corrected Adam with L2 decay folded into the gradient."""
    g = grad + weight_decay * param
    b1, b2 = betas
    new_m = b1 * m + (1 - b1) * g
    new_v = b2 * v + (1 - b2) * g * g
    m_hat = new_m / (1 - b1 ** step)
    v_hat = new_v / (1 - b2 ** step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), new_m, new_v


@dataclass
class Metrics:
    """Confusion matrix (rows truth, cols prediction) with derived scores."""

    confusion: np.ndarray
    oa: float
    aa: float
    kappa: float
    per_class_recall: np.ndarray    # NaN for classes with no true samples

    def to_json_dict(self) -> dict:
        recall = [None if np.isnan(v) else float(v) for v in self.per_class_recall]
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class_recall": recall,
            "confusion": self.confusion.astype(int).tolist(),
        }


def confusion_matrix(truth: np.ndarray, predicted: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts of 0-based (truth, prediction) pairs."""
    if truth.shape != predicted.shape:
        raise DataError(f"truth {truth.shape} vs predictions {predicted.shape}")
    if truth.min() < 0 or truth.max() >= num_classes:
        raise DataError(f"truth labels outside 0..{num_classes - 1}")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (truth, predicted), 1)
    return conf


def metrics_from_confusion(conf: np.ndarray) -> Metrics:
    """OA = trace/total; AA = mean recall over supported classes;
    Kappa = (p_o - p_e) / (1 - p_e) with p_e from the marginals.

    A degenerate p_e == 1 yields kappa 1.0 for perfect agreement, else 0.0.
    """
    conf = np.asarray(conf)
    total = conf.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    p_obs = conf.trace() / total
    row = conf.sum(axis=1)
    col = conf.sum(axis=0)
    p_exp = float(row @ col) / (total * total)
    if 1.0 - p_exp == 0.0:
        kappa = 1.0 if p_obs == 1.0 else 0.0
    else:
        kappa = (p_obs - p_exp) / (1.0 - p_exp)
    with np.errstate(invalid="ignore"):
        recall = np.where(row > 0, conf.diagonal() / np.maximum(row, 1), np.nan)
    aa = float(np.nanmean(recall))
    return Metrics(conf, float(p_obs), aa, float(kappa), recall)


def evaluate(net: NetworkState, patches: PatchSet, batch_size: int = 64) -> Metrics:
    """Argmax classification of every patch (ties break to the lowest class index)."""
    if len(patches) == 0:
        raise DataError("cannot evaluate an empty partition")
    preds = predict_classes(net, patches.data, batch_size)
    return metrics_from_confusion(
        confusion_matrix(patches.labels - 1, preds, net.cfg.num_classes))


def predict_classes(net: NetworkState, data: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = np.empty(len(data), dtype=np.int64)
    for start in range(0, len(data), batch_size):
        logits, _ = net_forward(net, data[start:start + batch_size], training=False)
        preds[start:start + len(logits)] = np.argmax(logits, axis=1)
    return preds


@dataclass
class TrainResult:
    log: list[dict]
    best_val_oa: float | None
    best_state: dict[str, np.ndarray]
    seconds: float


def train(net: NetworkState, train_set: PatchSet, cfg: TrainConfig,
          val_set: PatchSet | None = None, sink=None) -> TrainResult:
    """Seeded mini-batch training with per-epoch logging.

    Shuffling, dropout and the update order are all driven by one seeded RNG
    in a fixed sequence, so identical seeds give bit-identical runs.  The
    state with the best validation OA is retained (the final state when no
    validation set is given).  A non-finite loss aborts with the first
    offending layer named.
    """
    if len(train_set) == 0:
        raise DataError("training needs a non-empty train partition")
    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    slot1 = {name: np.zeros_like(p) for name, p in params.items()}
    slot2 = {name: np.zeros_like(p) for name, p in params.items()}
    adam_steps = 0
    log: list[dict] = []
    best_oa = None
    best_state = None
    started = time.perf_counter()
    n = len(train_set)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = train_set.data[idx]
            y = train_set.labels[idx] - 1
            rng_state = rng.bit_generator.state
            logits, tape = net_forward(net, x, training=True, rng=rng)
            loss, ce_cache = cross_entropy_forward(logits, y)
            if not np.isfinite(loss):
                replay = np.random.default_rng()
                replay.bit_generator.state = rng_state
                layer = first_nonfinite_layer(net, x, training=True, rng=replay)
                where = layer or "cross_entropy"
                raise NumericAbort(f"non-finite loss at epoch {epoch} step {steps}; "
                                   f"first offending layer: {where}", layer=where)
            grads, _ = net_backward(net, tape, cross_entropy_backward(ce_cache))
            if cfg.optimizer == "adam":
                adam_steps += 1
            for name, p in net.params().items():
                g = grads[name]
                if cfg.optimizer == "sgd_momentum":
                    new_p, slot1[name] = sgd_momentum_step(
                        p, g, slot1[name], lr, cfg.momentum, cfg.weight_decay)
                else:
                    new_p, slot1[name], slot2[name] = adam_step(
                        p, g, slot1[name], slot2[name], adam_steps, lr,
                        cfg.weight_decay)
                net.set_param(name, new_p)
            loss_sum += loss * len(idx)
            steps += 1
        val_oa = None
        if val_set is not None and len(val_set) > 0:
            val_oa = evaluate(net, val_set).oa
        record = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / n,
                  "val_oa": val_oa, "steps": steps}
        log.append(record)
        if sink is not None:
            sink(record)
        # ties keep the most recent state: equal validation, more training
        if val_oa is not None and (best_oa is None or val_oa >= best_oa):
            best_oa = val_oa
            best_state = net.state_arrays()
    if best_state is None:
        best_state = net.state_arrays()
    return TrainResult(log, best_oa, best_state, time.perf_counter() - started)


@dataclass
class CostRow:
    name: str
    kind: str
    c_in: int
    c_out: int
    params: int
    conv_madds: int
    attention_madds: int
    aggregation_madds: int
    dominant: bool | None = None    # conv cost strictly exceeds the dynamic overhead

    @property
    def total_madds(self) -> int:
        return self.conv_madds + self.attention_madds + self.aggregation_madds


@dataclass
class CostReport:
    """Per-layer parameter and multiply-add audit for one forward sample."""

    input_dims: tuple
    num_kernels: int
    rows: list[CostRow]
    notes: str

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def totals(self) -> dict:
        return {
            "params": self.total_params,
            "conv_madds": sum(r.conv_madds for r in self.rows),
            "attention_madds": sum(r.attention_madds for r in self.rows),
            "aggregation_madds": sum(r.aggregation_madds for r in self.rows),
            "total_madds": sum(r.total_madds for r in self.rows),
        }

    def to_json_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "num_kernels": self.num_kernels,
            "rows": [{
                "name": r.name, "kind": r.kind, "c_in": r.c_in, "c_out": r.c_out,
                "params": r.params, "conv_madds": r.conv_madds,
                "attention_madds": r.attention_madds,
                "aggregation_madds": r.aggregation_madds,
                "dominant": r.dominant,
            } for r in self.rows],
            "totals": self.totals,
            "notes": self.notes,
        }

    def format_table(self) -> str:
        headers = ["layer", "kind", "c_in", "c_out", "params", "conv_madds",
                   "attention", "aggregation"]
        body = [[r.name, r.kind, str(r.c_in), str(r.c_out), str(r.params),
                 str(r.conv_madds), str(r.attention_madds), str(r.aggregation_madds)]
                for r in self.rows]
        totals = self.totals
        body.append(["total", "", "", "", str(totals["params"]),
                     str(totals["conv_madds"]), str(totals["attention_madds"]),
                     str(totals["aggregation_madds"])])
        widths = [max(len(h), *(len(row[i]) for row in body))
                  for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
                 "  ".join("-" * w for w in widths)]
        lines += ["  ".join(cell.ljust(w) for cell, w in zip(row, widths))
                  for row in body]
        return "\n".join(lines) + "\n" + self.notes

    def csv_rows(self) -> list[list]:
        rows = [["name", "kind", "c_in", "c_out", "params", "conv_madds",
                 "attention_madds", "aggregation_madds", "dominant"]]
        rows += [[r.name, r.kind, r.c_in, r.c_out, r.params, r.conv_madds,
                  r.attention_madds, r.aggregation_madds,
                  "" if r.dominant is None else r.dominant] for r in self.rows]
        return rows


AUDIT_NOTES = (
    "Multiply-add counts cover the convolution, attention and aggregation terms "
    "only; batch-norm, activations and pooling are excluded. Published reference "
    "configurations of this architecture family report about 0.44M parameters on "
    "a 200-band 17x17 input, but those rely on grouped convolutions and gating "
    "options that are deliberately not part of this implementation, so parameter "
    "totals here run correspondingly higher."
)


def audit(cfg: DenseNetConfig, check_dominance: bool = True) -> CostReport:
    """Parameter and multiply-add accounting for every layer of a config.

    Dynamic conv layers are asserted to satisfy the efficiency premise: the
    plain convolution cost strictly exceeds the attention plus aggregation
    overhead.
    """
    plan = plan_network(cfg)
    k = cfg.num_kernels
    rows = []
    for layer in plan.layers:
        in_elems = int(np.prod(layer.in_dims))
        out_elems = int(np.prod(layer.out_dims))
        if layer.kind == "dac":
            reduction = max(1, layer.c_in // 4)
            params = k * layer.c_out * layer.c_in * layer.kernel_volume
            if cfg.use_bias:
                params += k * layer.c_out
            params += reduction * layer.c_in + reduction    # attention fc1
            params += k * reduction + k                     # attention fc2
            conv = conv_cost(out_elems, layer.c_in, layer.c_out, layer.kernel_volume)
            att = attention_cost(in_elems, layer.c_in, k)
            agg = aggregation_cost(layer.c_in, layer.c_out, layer.kernel_volume, k)
            rows.append(CostRow(layer.name, "dac", layer.c_in, layer.c_out,
                                params, conv, att, agg, dominant=conv > att + agg))
        elif layer.kind == "batchnorm":
            rows.append(CostRow(layer.name, "batchnorm", layer.c_in, layer.c_out,
                                2 * layer.c_in, 0, 0, 0))
        elif layer.kind == "conv":
            params = layer.c_out * layer.c_in * layer.kernel_volume
            if cfg.use_bias:
                params += layer.c_out
            conv = conv_cost(out_elems, layer.c_in, layer.c_out, layer.kernel_volume)
            rows.append(CostRow(layer.name, "conv", layer.c_in, layer.c_out,
                                params, conv, 0, 0))
        else:   # affine
            params = layer.c_out * layer.c_in + layer.c_out
            rows.append(CostRow(layer.name, "affine", layer.c_in, layer.c_out,
                                params, layer.c_in * layer.c_out, 0, 0))
    report = CostReport(cfg.input_dims, k, rows, AUDIT_NOTES)
    if check_dominance:
        bad = [r.name for r in rows if r.dominant is False]
        if bad:
            raise ConfigError(f"dynamic conv overhead is not dominated by conv cost "
                              f"in: {', '.join(bad)}")
    return report
