"""Training and evaluation: AdamW with cosine decay, metrics, run logs and
checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import MultimodalSample, Splits, decode_tensor, encode_tensor, stack_batch
from .htl import HTLConfig
from .mome import predict
from .numerics import grad, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MHCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1e-3
    final_lr: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    max_epochs: int = 30
    batch_size: int = 32
    grad_clip_norm: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.final_lr <= self.base_lr:
            raise ValueError("need 0 < final_lr <= base_lr")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")


def cosine_lr(step: int, total_steps: int, base: float, final: float) -> float:
    """final + (base - final) * (1 + cos(pi * step / total)) / 2."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return base
    if step == total_steps:
        return final
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict, float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-6)
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}, norm


def optimizer_step(params, grads: dict[str, np.ndarray], state: AdamState, cfg: OptimConfig,
                   lr: float, decay: dict[str, bool] | None = None) -> bool:
    """One AdamW update in place. Returns False (and changes nothing) when any
    gradient is non-finite.

    ``decay`` maps parameter names to whether weight decay applies; default all.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        return False
    grads, _ = clip_grad_norm(grads, cfg.grad_clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        dt = p.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1.0 - b1) * g).astype(dt)
        v = (b2 * v + (1.0 - b2) * g * g).astype(dt)
        state.m[name], state.v[name] = m, v
        new = p.data
        if cfg.weight_decay and (decay is None or decay.get(name, True)):
            new = new * dt.type(1.0 - lr * cfg.weight_decay)
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (new - dt.type(lr) * upd).astype(dt)
    return True


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    top1: float
    mean1: float
    per_class_acc: np.ndarray
    confusion: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "MetricReport":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.size == 0:
            raise ValueError("cannot evaluate an empty split")
        conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(conf, (y_true, y_pred), 1)
        return cls.from_confusion(conf)

    @classmethod
    def from_confusion(cls, conf: np.ndarray) -> "MetricReport":
        conf = np.asarray(conf, dtype=np.int64)
        support = conf.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_class = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
        return cls(top1=float(np.trace(conf) / conf.sum()),
                   mean1=float(np.nanmean(per_class)),
                   per_class_acc=per_class, confusion=conf)


def _batches(samples: Sequence[MultimodalSample], size: int, order=None):
    idx = np.arange(len(samples)) if order is None else order
    for start in range(0, len(idx), size):
        yield [samples[i] for i in idx[start:start + size]]


def predict_split(model, samples: Sequence[MultimodalSample], batch_size: int = 64):
    """(predicted labels, true labels, gate weights ``(n, num_experts)``)."""
    preds, labels, weights = [], [], []
    with no_grad():
        for batch in _batches(samples, batch_size):
            tensors, y = stack_batch(batch)
            out = model([t.astype(model.dtype, copy=False) for t in tensors])
            preds.append(predict(out.logits))
            labels.append(y)
            weights.append(out.weights.data.astype(np.float64))
    return np.concatenate(preds), np.concatenate(labels), np.concatenate(weights)


def evaluate(model, samples: Sequence[MultimodalSample], num_classes: int | None = None,
             batch_size: int = 64) -> MetricReport:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    pred, y, _ = predict_split(model, samples, batch_size)
    k = num_classes or int(max(y.max(), pred.max()) + 1)
    return MetricReport.from_predictions(y, pred, k)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _no_decay(name: str, arr: np.ndarray) -> bool:
    return arr.ndim <= 1


class Trainer:
    """Owns the optimizer state and history for one model/data pair."""

    def __init__(self, model, data: Splits, optim: OptimConfig = OptimConfig(),
                 htl: HTLConfig = HTLConfig(), num_classes: int | None = None,
                 meta: dict | None = None):
        if not data.train:
            raise ValueError("empty training split")
        self.model = model
        self.data = data
        self.optim = optim
        self.htl = htl
        self.num_classes = num_classes or 1 + max(s.label for s in data.train + data.val + data.test)
        self.meta = dict(meta or {})
        self.params = model.parameters()
        self.decay = {k: not _no_decay(k, p.data) for k, p in self.params.items()}
        self.adam = AdamState()
        self.epoch = 0
        self.history: list[dict] = []
        self.skipped_steps = 0
        self.best_mean1 = -1.0
        self.best_epoch = -1
        self.best_state: OrderedDict | None = None

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.data.train) / self.optim.batch_size)

    @property
    def total_steps(self) -> int:
        return self.optim.max_epochs * self.steps_per_epoch

    def train_epoch(self) -> dict:
        cfg = self.optim
        order = np.random.default_rng([cfg.seed, self.epoch]).permutation(len(self.data.train))
        sums = dict(cls=0.0, intra=0.0, inter=0.0, total=0.0)
        seen = 0
        lr = cfg.base_lr
        names = list(self.params)
        tensors_list = [self.params[k] for k in names]
        for i, batch in enumerate(_batches(self.data.train, cfg.batch_size, order)):
            step = self.epoch * self.steps_per_epoch + i
            lr = cosine_lr(step, self.total_steps, cfg.base_lr, cfg.final_lr)
            tensors, labels = stack_batch(batch)
            tensors = [t.astype(self.model.dtype, copy=False) for t in tensors]
            breakdown, _ = self.model.loss(tensors, labels, self.htl)
            grads = dict(zip(names, grad(breakdown.graph, tensors_list)))
            if not optimizer_step(self.params, grads, self.adam, cfg, lr, self.decay):
                self.skipped_steps += 1
                log.warning("epoch %d step %d: non-finite gradient, update skipped", self.epoch, i)
            n = len(batch)
            seen += n
            for key in sums:
                sums[key] += n * getattr(breakdown, key)
        row = {"epoch": self.epoch, "lr": lr}
        row.update({f"loss_{k}": v / seen for k, v in sums.items()})
        return row

    def validate(self, row: dict) -> dict:
        split = self.data.val or self.data.test
        pred, y, w = predict_split(self.model, split)
        report = MetricReport.from_predictions(y, pred, self.num_classes)
        row["val_top1"] = report.top1
        row["val_mean1"] = report.mean1
        for n in range(w.shape[1]):
            row[f"gate_w_mean_{n + 1}"] = float(w[:, n].mean())
        for n in range(w.shape[1]):
            row[f"gate_w_std_{n + 1}"] = float(w[:, n].std())
        return row

    def fit(self, until_epoch: int | None = None) -> "Trainer":
        """Train through epoch ``until_epoch - 1`` (default: ``max_epochs``)."""
        stop = self.optim.max_epochs if until_epoch is None else min(until_epoch, self.optim.max_epochs)
        while self.epoch < stop:
            row = self.validate(self.train_epoch())
            self.history.append(row)
            if row["val_mean1"] > self.best_mean1:
                self.best_mean1 = row["val_mean1"]
                self.best_epoch = self.epoch
                self.best_state = self.model.state_dict()
            log.info("epoch %d loss %.4f val mean1 %.4f", self.epoch, row["loss_total"], row["val_mean1"])
            self.epoch += 1
        return self

    def restore_best(self) -> None:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)

    # -- persistence -----------------------------------------------------------
    def state(self) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
        info = {
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "skipped_steps": self.skipped_steps,
            "best_mean1": self.best_mean1,
            "best_epoch": self.best_epoch,
            "history": self.history,
            "optim": asdict(self.optim),
            "htl": asdict(self.htl),
            "num_classes": self.num_classes,
            "meta": self.meta,
        }
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for k, p in self.params.items():
            arrays[f"model/{k}"] = p.data
        for k in self.params:
            if k in self.adam.m:
                arrays[f"adam_m/{k}"] = self.adam.m[k]
                arrays[f"adam_v/{k}"] = self.adam.v[k]
        if self.best_state is not None:
            for k, a in self.best_state.items():
                arrays[f"best/{k}"] = a
        return info, arrays

    def load_state(self, info: dict, arrays: dict[str, np.ndarray]) -> None:
        self.model.load_state_dict({k[6:]: a for k, a in arrays.items() if k.startswith("model/")})
        self.adam = AdamState(
            m={k[7:]: a.copy() for k, a in arrays.items() if k.startswith("adam_m/")},
            v={k[7:]: a.copy() for k, a in arrays.items() if k.startswith("adam_v/")},
            step=info["adam_step"],
        )
        best = OrderedDict((k[5:], a.copy()) for k, a in arrays.items() if k.startswith("best/"))
        self.best_state = best or None
        self.epoch = info["epoch"]
        self.skipped_steps = info["skipped_steps"]
        self.best_mean1 = info["best_mean1"]
        self.best_epoch = info["best_epoch"]
        self.history = [dict(r) for r in info["history"]]

    def save(self, path) -> None:
        info, arrays = self.state()
        save_checkpoint(path, info, arrays)

    def resume(self, path) -> "Trainer":
        info, arrays = load_checkpoint(path)
        if info["optim"] != asdict(self.optim) or info["htl"] != asdict(self.htl):
            raise ValueError(f"{path}: checkpoint configuration differs from this trainer")
        self.load_state(info, arrays)
        return self


def train(model, data: Splits, optim: OptimConfig = OptimConfig(), htl: HTLConfig = HTLConfig(),
          num_classes: int | None = None, meta: dict | None = None) -> Trainer:
    """Full run; the returned trainer carries ``history`` and ``best_state``."""
    return Trainer(model, data, optim, htl, num_classes, meta).fit()


# ---------------------------------------------------------------------------
# run log and checkpoint files
# ---------------------------------------------------------------------------

def run_log_columns(num_experts: int) -> list[str]:
    cols = ["epoch", "lr", "loss_cls", "loss_intra", "loss_inter", "loss_total",
            "val_top1", "val_mean1"]
    cols += [f"gate_w_mean_{n + 1}" for n in range(num_experts)]
    cols += [f"gate_w_std_{n + 1}" for n in range(num_experts)]
    return cols


def format_run_log(history: Sequence[dict]) -> str:
    if not history:
        return ""
    n = sum(1 for k in history[0] if k.startswith("gate_w_mean_"))
    cols = run_log_columns(n)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in history:
        writer.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in cols])
    return buf.getvalue()


def write_run_log(history: Sequence[dict], path) -> None:
    Path(path).write_text(format_run_log(history))


def save_checkpoint(path, info: dict, arrays: dict[str, np.ndarray]) -> None:
    """Header, JSON state, named MMT1 tensors, then a SHA-256 of all of it."""
    blob = json.dumps(info, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint tensors are float32; {name} is {arr.dtype}")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(encode_tensor(arr))
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    buf = Path(path).read_bytes()
    if len(buf) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise ValueError(f"{path}: truncated checkpoint")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch (corrupt or truncated checkpoint)")
    if not body.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, n = struct.unpack_from("<II", body, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos += 8
    info = json.loads(body[pos:pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + klen].decode()
        pos += klen
        arrays[name], pos = decode_tensor(body, pos, f"{path}:{name}")
    return info, arrays
