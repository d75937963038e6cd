"""Momentum-SGD fine-tuning for quantized models.

Latent weights stay full precision; the quantized values only ever feed
the forward and backward passes. The learning rate follows cosine decay
by default, weight decay is applied to weights only (step sizes and
normalization parameters are exempt), and an optional frozen-teacher
distillation term can be mixed into the loss.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, batches
from .layers import QuantizedModel, apply_gscale_policy
from .quantizer import GSCALE_MODES, STEP_FLOOR
from .tensor import Tensor, log_softmax, softmax_cross_entropy


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite gradient surfaces mid-run."""


def default_weight_decay(bits: Optional[int], base: float = 1e-4) -> float:
    """Less regularization at lower precision: base, half at 3-bit, quarter at 2-bit."""
    if bits == 3:
        return base / 2
    if bits == 2:
        return base / 4
    return base


def default_lr(bits: Optional[int]) -> float:
    if bits is None:
        return 0.1
    return 0.001 if bits == 8 else 0.01


@dataclass
class RunConfig:
    epochs: int = 10
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 100
    seed: int = 0
    bits: Optional[int] = None
    distill: bool = False
    distill_weight: float = 0.5
    temperature: float = 1.0
    schedule: str = "cosine"  # "cosine" | "step"
    gscale: str = "nqp"  # step-size gradient-scale policy
    gscale_mult: float = 1.0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("lr0", "momentum", "weight_decay", "temperature"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.distill_weight <= 1.0:
            raise ValueError("distill_weight must lie in [0, 1]")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.gscale not in GSCALE_MODES:
            raise ValueError(f"unknown gradient-scale policy {self.gscale!r}")
        if self.gscale_mult <= 0:
            raise ValueError("gscale_mult must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine decay without restarts: lr0 at t=0 down to 0 at t=total."""
    if not 0 <= t <= total or total < 1:
        raise ValueError(f"bad schedule position t={t}, total={total}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def step_lr(t: int, total: int, lr0: float) -> float:
    """Step decay: x0.1 every 2/9 of the run (20-epoch drops in a 90-epoch run)."""
    if not 0 <= t <= total or total < 1:
        raise ValueError(f"bad schedule position t={t}, total={total}")
    period = max(1, int(total * 2 / 9))
    return lr0 * 0.1 ** (t // period)


def sgd_update(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
               lr: float, momentum: float, weight_decay: float) -> None:
    """One in-place momentum-SGD update. Decay is folded into the gradient."""
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


class SGD:
    """Momentum SGD over a model's parameters.

    Weight decay applies to weight tensors only. Step sizes carry
    momentum but no decay and are clamped to a small positive floor
    after each update so the quantizer never sees s <= 0.
    """

    def __init__(self, model: QuantizedModel, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, tensor, kind in self.model.parameters():
            g = tensor.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient in {name!r} "
                    f"(|g|max={np.abs(g[np.isfinite(g)]).max() if np.isfinite(g).any() else 'n/a'})")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(tensor.data)
            wd = self.weight_decay if kind == "weight" else 0.0
            sgd_update(tensor.data, g, v, self.lr, self.momentum, wd)
            if kind == "step":
                np.maximum(tensor.data, STEP_FLOOR, out=tensor.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"velocity.{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k.startswith("velocity."):
                self.velocity[k[len("velocity."):]] = v.copy()


def kd_loss(student_logits: Tensor, teacher_logits, labels,
            weight: float = 0.5, temperature: float = 1.0) -> Tensor:
    """Hard-label cross entropy mixed with a frozen teacher's soft targets.

    The teacher term is computed from detached values; no gradient ever
    reaches the teacher.
    """
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_data.shape != student_logits.shape:
        raise ValueError(f"teacher/student logit shapes disagree: "
                         f"{t_data.shape} vs {student_logits.shape}")
    hard = softmax_cross_entropy(student_logits, labels)
    soft_targets = np.exp(log_softmax(t_data / temperature))
    soft = softmax_cross_entropy(student_logits * (1.0 / temperature), soft_targets)
    return hard * weight + soft * (1.0 - weight)


def evaluate(model: QuantizedModel, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Top-1 and top-5 accuracy in eval mode (running norm statistics)."""
    top1 = top5 = 0
    k5 = min(5, model.config.classes)
    for x, y in batches(data, batch_size):
        logits = model.forward(Tensor(x), training=False).data
        pred = logits.argmax(axis=1)
        top1 += int((pred == y).sum())
        part = np.argpartition(-logits, k5 - 1, axis=1)[:, :k5]
        top5 += int((part == y[:, None]).any(axis=1).sum())
    n = len(data)
    return top1 / n, top5 / n


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    top1: float
    top5: float
    step_sizes: dict[str, float]
    wall_clock: float


@dataclass
class Metrics:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_top1: float = -1.0

    def csv_lines(self) -> list[str]:
        """Deterministic CSV, one row per epoch. Wall-clock is deliberately
        excluded so identical runs produce byte-identical files."""
        step_names = sorted(self.records[0].step_sizes) if self.records else []
        header = ["epoch", "lr", "train_loss", "top1", "top5", *step_names]
        lines = [",".join(header)]
        for r in self.records:
            row = [str(r.epoch), repr(r.lr), repr(r.train_loss),
                   repr(r.top1), repr(r.top5)]
            row += [repr(r.step_sizes[n]) for n in step_names]
            lines.append(",".join(row))
        return lines

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.csv_lines()) + "\n")

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "epochs": len(self.records),
            "best_epoch": self.best_epoch,
            "best_top1": self.best_top1,
            "final_top1": last.top1 if last else None,
            "final_top5": last.top5 if last else None,
            "final_train_loss": last.train_loss if last else None,
            "total_wall_clock": sum(r.wall_clock for r in self.records),
        }

    def write_summary(self, path, extra: Optional[dict] = None) -> None:
        payload = self.summary()
        if extra:
            payload.update(extra)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def train(model: QuantizedModel, train_data: Dataset, eval_data: Dataset,
          cfg: RunConfig, teacher: Optional[QuantizedModel] = None,
          optimizer: Optional[SGD] = None) -> tuple[QuantizedModel, Metrics, dict]:
    """Mini-batch SGD over `cfg.epochs` epochs.

    Returns the trained model, per-epoch metrics, and a snapshot of the
    best-eval state (arrays + step metadata) for checkpointing.
    """
    cfg.validate()
    if cfg.distill and teacher is None:
        raise ValueError("distillation requested but no teacher given")
    if any(l.weight_step is not None for l in model.layers):
        apply_gscale_policy(model, cfg.gscale, cfg.gscale_mult)
    rng = np.random.default_rng(cfg.seed)
    opt = optimizer or SGD(model, cfg.lr0, cfg.momentum, cfg.weight_decay)
    schedule = cosine_lr if cfg.schedule == "cosine" else step_lr
    n_batches = math.ceil(len(train_data) / cfg.batch_size)
    total = cfg.epochs * n_batches
    metrics = Metrics()
    best_state: dict = {}
    t = 0
    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        losses = []
        for x, y in batches(train_data, cfg.batch_size, rng):
            xt = Tensor(x)
            logits = model.forward(xt, training=True)
            if cfg.distill:
                t_logits = teacher.forward(Tensor(x), training=False)
                loss = kd_loss(logits, t_logits, y,
                               cfg.distill_weight, cfg.temperature)
            else:
                loss = softmax_cross_entropy(logits, y)
            loss.backward()
            opt.lr = schedule(t, total, cfg.lr0)
            opt.step()
            model.zero_grad()
            losses.append(loss.item())
            t += 1
        top1, top5 = evaluate(model, eval_data, max(cfg.batch_size, 256))
        record = EpochRecord(
            epoch=epoch, lr=opt.lr, train_loss=float(np.mean(losses)),
            top1=top1, top5=top5,
            step_sizes={n: float(p.value) for n, p in model.step_params().items()},
            wall_clock=time.perf_counter() - tic)
        metrics.records.append(record)
        if top1 > metrics.best_top1:
            metrics.best_top1 = top1
            metrics.best_epoch = epoch
            best_state = {
                "arrays": {k: v.copy() for k, v in model.state_arrays().items()},
                "steps": model.meta_state(),
                "epoch": epoch,
            }
    return model, metrics, best_state
