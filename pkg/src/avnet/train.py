"""Optimization loop, learning-rate schedule, checkpoints and A/V metrics."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .checkpoint import Checkpoint, CheckpointError, meta_tensors, save_checkpoint
from .data import DEFAULT_CLASS_WEIGHTS, ClassId, FundusSample
from .model import LayerGraph
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class LrSchedule:
    base_lr: float = 1e-4
    power: float = 0.9
    max_iter: int = 1000


def poly_lr(schedule: LrSchedule, iteration: int) -> float:
    if not 0 <= iteration <= schedule.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.max_iter}]")
    if schedule.max_iter == 0:
        return schedule.base_lr
    return schedule.base_lr * (1.0 - iteration / schedule.max_iter) ** schedule.power


@dataclass
class OptimizerState:
    """Momentum buffers (SGD) or first/second moments (Adam), keyed by parameter name."""

    kind: str = "sgd"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    iteration: int = 0
    buffers: dict = field(default_factory=dict)

    def tensors(self) -> dict:
        out = {}
        for name, bufs in self.buffers.items():
            for slot, arr in bufs.items():
                out[f"optim/{name}.{slot}"] = arr
        out["optim/step"] = np.array([self.iteration], dtype=np.int64)
        return out

    def load(self, section: dict) -> None:
        self.iteration = int(section.pop("step", np.zeros(1, np.int64))[0])
        self.buffers = {}
        for key, arr in section.items():
            name, slot = key.rsplit(".", 1)
            self.buffers.setdefault(name, {})[slot] = arr.copy()


def _grad_of(name: str, p: Tensor, grads: dict | None) -> np.ndarray:
    g = grads.get(name) if grads is not None else p.grad
    if g is None:
        raise ValueError(f"parameter {name!r} has no gradient; run backward first")
    return g


def sgd_step(params: dict, state: OptimizerState, lr: float, grads: dict | None = None) -> None:
    """Heavy-ball update ``v <- mu v + g; p <- p - lr v``, then zero the grads."""
    for name, p in params.items():
        g = _grad_of(name, p, grads)
        buf = state.buffers.setdefault(name, {})
        v = buf.get("momentum")
        if v is None:
            v = np.zeros_like(p.data)
        v = p.data.dtype.type(state.momentum) * v + g
        buf["momentum"] = v
        p.data -= p.data.dtype.type(lr) * v
        p.zero_grad()
    state.iteration += 1


def adam_step(params: dict, state: OptimizerState, lr: float, grads: dict | None = None) -> None:
    b1, b2 = state.betas
    t = state.iteration + 1
    for name, p in params.items():
        g = _grad_of(name, p, grads)
        buf = state.buffers.setdefault(name, {})
        m = buf.get("m", np.zeros_like(p.data))
        v = buf.get("v", np.zeros_like(p.data))
        dt = p.data.dtype.type
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * g * g
        buf["m"], buf["v"] = m, v
        mhat = m / dt(1 - b1 ** t)
        vhat = v / dt(1 - b2 ** t)
        p.data -= dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
        p.zero_grad()
    state.iteration = t


def optimizer_step(params: dict, state: OptimizerState, lr: float) -> None:
    if state.kind == "sgd":
        sgd_step(params, state, lr)
    elif state.kind == "adam":
        adam_step(params, state, lr)
    else:
        raise ValueError(f"unknown optimizer {state.kind!r}")


# ----------------------------------------------------------------- checkpoints

def model_checkpoint(model: LayerGraph, state: OptimizerState | None = None, iteration: int = 0,
                     config: dict | None = None, split_seed: int = 0) -> Checkpoint:
    tensors = {f"param/{n}": t.data.copy() for n, t in model.named_parameters()}
    for n, bn in model.batchnorms():
        tensors[f"buffer/{n}.running_mean"] = bn.running_mean.copy()
        tensors[f"buffer/{n}.running_var"] = bn.running_var.copy()
    if state is not None:
        tensors.update(state.tensors())
    snapshot = dict(config) if config else {"model": model.config.to_dict()}
    tensors.update(meta_tensors(snapshot, iteration, split_seed))
    return Checkpoint(tensors)


def restore_model(model: LayerGraph, ckpt: Checkpoint, state: OptimizerState | None = None) -> None:
    params = ckpt.params
    own = dict(model.named_parameters())
    if set(params) != set(own):
        missing, extra = sorted(set(own) - set(params)), sorted(set(params) - set(own))
        raise CheckpointError(f"parameter names differ from model; missing {missing[:3]}, unexpected {extra[:3]}")
    for name, t in own.items():
        if params[name].shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {params[name].shape} != model {t.shape}")
        t.data = params[name].astype(t.dtype, copy=True)
        t.grad = None
    buffers = ckpt.section("buffer")
    for name, bn in model.batchnorms():
        if f"{name}.running_mean" not in buffers or f"{name}.running_var" not in buffers:
            raise CheckpointError(f"{name}: running statistics missing from checkpoint")
        bn.running_mean = buffers[f"{name}.running_mean"].copy()
        bn.running_var = buffers[f"{name}.running_var"].copy()
    if state is not None:
        state.load(ckpt.section("optim"))


# -------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 4
    base_lr: float = 1e-4
    power: float = 0.9
    optimizer: str = "sgd"
    momentum: float = 0.9
    class_weights: list = field(default_factory=lambda: list(DEFAULT_CLASS_WEIGHTS))
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations >= 0 and batch_size >= 1 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if len(self.class_weights) != 4 or min(self.class_weights) < 0:
            raise ValueError("class_weights needs four non-negative values")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.power, self.iterations)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    records: list
    checkpoint: Checkpoint
    state: OptimizerState

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.records]

    def csv_text(self) -> str:
        return records_csv(self.records)


CSV_FIELDS = ("iteration", "epoch", "lr", "loss")


def records_csv(records: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r["iteration"], r["epoch"], repr(r["lr"]), repr(r["loss"])])
    return buf.getvalue()


def make_batch(samples: Sequence[FundusSample], dtype=np.float32):
    images = Tensor(np.stack([s.image for s in samples]), dtype=dtype)
    targets = np.stack([s.class_map for s in samples])
    weights = np.stack([s.weight_map for s in samples])[:, None]
    return images, targets, weights


def batch_order(n: int, batch_size: int, seed: int):
    """Yield (epoch, indices) forever; each epoch is a fresh seeded permutation."""
    rng = np.random.default_rng(seed)
    epoch = 0
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield epoch, perm[start:start + batch_size]
        epoch += 1


def train(model: LayerGraph, dataset: Sequence[FundusSample], cfg: TrainConfig | None = None, seed: int = 0,
          callbacks: Sequence[Callable[[dict], None]] = (), checkpoint_dir=None, log_path=None,
          config_snapshot: dict | None = None, split_seed: int = 0) -> TrainResult:
    """Run ``cfg.iterations`` optimizer steps on weighted cross-entropy.

    Samples carry their own weight maps. Dropout masks are drawn from a
    generator seeded by (seed, iteration) so two runs with equal inputs are
    bit-identical. ``log_path`` receives the CSV log as it grows.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    schedule = cfg.schedule
    state = OptimizerState(kind=cfg.optimizer, momentum=cfg.momentum)
    params = model.parameters()
    for p in params.values():
        p.grad = None
    records = []
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        log_file.write(",".join(CSV_FIELDS) + "\n")

    def snapshot(it):
        return model_checkpoint(model, state, it, config_snapshot, split_seed)

    try:
        order = batch_order(len(dataset), cfg.batch_size, seed)
        for it in range(cfg.iterations):
            epoch, idx = next(order)
            batch = [dataset[int(i)] for i in idx]
            images, targets, weights = make_batch(batch, model.dtype)
            rng = np.random.default_rng([seed, it])
            probs = model.forward(images, "train", rng)
            loss = ops.weighted_cross_entropy(probs, targets, weights)
            value = loss.item()
            if not math.isfinite(value):
                ids = [s.source_id for s in batch]
                raise TrainingDiverged(f"non-finite loss {value} at iteration {it} on batch {ids}")
            backward(loss)
            lr = poly_lr(schedule, it)
            optimizer_step(params, state, lr)
            rec = {"iteration": it, "epoch": epoch, "lr": lr, "loss": value}
            records.append(rec)
            if log_file is not None:
                log_file.write(records_csv([rec]).split("\n", 1)[1])
                log_file.flush()
            for cb in callbacks:
                cb(rec)
            if checkpoint_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(snapshot(it + 1), Path(checkpoint_dir) / f"iter_{it + 1:06d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(records, snapshot(cfg.iterations), state)


# ------------------------------------------------------------------ evaluation

def pad_to_multiple(image: np.ndarray, multiple: int = 8, mode: str = "reflect") -> tuple[np.ndarray, tuple]:
    """Pad [C, H, W] at the bottom/right up to the next multiple; returns (padded, (H, W))."""
    _, h, w = image.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    if mode == "reflect" and (ph >= h or pw >= w):
        mode = "symmetric"
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode=mode), (h, w)


def predict(model: LayerGraph, image: np.ndarray, pad_mode: str = "reflect") -> np.ndarray:
    """Eval-mode class probabilities [K, H, W] for one [3, H, W] image of any size."""
    factor = 2 ** model.config.downsamplings
    padded, (h, w) = pad_to_multiple(np.asarray(image), factor, pad_mode)
    with no_grad():
        probs = model.forward(Tensor(padded[None], dtype=model.dtype), "eval")
    return probs.data[0, :, :h, :w]


@dataclass
class ConfusionCounts:
    """Pixel tallies over arteriole/venule ground truth.

    ``fp_at`` counts venule pixels predicted arteriole, ``fp_ve`` arteriole
    pixels predicted venule. Vessel pixels predicted background or
    intersection land in ``missed_*`` and stay out of the ratios.
    """

    tp_at: int = 0
    fp_at: int = 0
    tp_ve: int = 0
    fp_ve: int = 0
    missed_at: int = 0
    missed_ve: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> tuple:
        return (self.tp_at, self.fp_at, self.tp_ve, self.fp_ve, self.missed_at, self.missed_ve)

    @property
    def evaluated(self) -> int:
        return sum(self.as_tuple())


def count_pixels(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred, truth = np.asarray(pred), np.asarray(truth)
    at, ve = truth == ClassId.ARTERIOLE, truth == ClassId.VENULE
    p_at, p_ve = pred == ClassId.ARTERIOLE, pred == ClassId.VENULE
    return ConfusionCounts(
        tp_at=int((at & p_at).sum()), fp_at=int((ve & p_at).sum()),
        tp_ve=int((ve & p_ve).sum()), fp_ve=int((at & p_ve).sum()),
        missed_at=int((at & ~p_at & ~p_ve).sum()), missed_ve=int((ve & ~p_at & ~p_ve).sum()))


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else float("nan")


def metrics(counts: ConfusionCounts, recall: bool = False) -> dict:
    """TPR_at, TPR_ve and accuracy exactly as TP / (TP + FP).

    A zero denominator yields NaN and the metric's name in ``undefined``.
    ``recall=True`` adds TP / (TP + FN) variants, with FN = other-vessel
    predictions plus missed pixels.
    """
    c = counts
    out = {
        "tpr_at": _ratio(c.tp_at, c.tp_at + c.fp_at),
        "tpr_ve": _ratio(c.tp_ve, c.tp_ve + c.fp_ve),
        "accuracy": _ratio(c.tp_ve + c.tp_at, c.tp_ve + c.fp_ve + c.tp_at + c.fp_at),
    }
    if recall:
        out["recall_at"] = _ratio(c.tp_at, c.tp_at + c.fp_ve + c.missed_at)
        out["recall_ve"] = _ratio(c.tp_ve, c.tp_ve + c.fp_at + c.missed_ve)
    out["undefined"] = sorted(k for k, v in out.items() if isinstance(v, float) and math.isnan(v))
    return out


def evaluate(model: LayerGraph, samples: Sequence[FundusSample], recall: bool = False,
             pad_mode: str = "reflect") -> tuple[ConfusionCounts, dict]:
    total = ConfusionCounts()
    for s in samples:
        pred = predict(model, s.image, pad_mode).argmax(axis=0)
        total = total + count_pixels(pred, s.class_map)
    return total, metrics_report(total, recall)


def metrics_report(counts: ConfusionCounts, recall: bool = False) -> dict:
    if counts.evaluated == 0:
        raise ValueError("no arteriole or venule pixels to evaluate")
    m = metrics(counts, recall)
    report = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in m.items()}
    report.update({
        "missed_at": counts.missed_at, "missed_ve": counts.missed_ve,
        "counts": {"tp_at": counts.tp_at, "fp_at": counts.fp_at, "tp_ve": counts.tp_ve, "fp_ve": counts.fp_ve},
        "pixels_evaluated": counts.evaluated,
    })
    return report
