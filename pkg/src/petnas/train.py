"""Adam with a linear warmup/decay schedule, plus evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .criterion import CriterionAccumulator
from .data import Dataset
from .errors import ConfigError, DivergenceError, UsageError
from .model import Model
from .pet import PetSet


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    peak_lr: float = 3e-4
    warmup_fraction: float = 0.06
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"train.{name}", f"must be a positive integer, got {v!r}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("train.warmup_fraction", "must lie in (0, 1)")
        if not self.peak_lr > 0:
            raise ConfigError("train.peak_lr", "must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"train.{name}", "must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"train.{sorted(unknown)[0]}", "unknown field")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Schedule:
    """Piecewise-linear learning rate: 0 -> peak over the warmup, then -> 0.

    ``lr(s)`` is the rate used for the ``s``-th optimizer step (1-based);
    the warmup ends at step ``ceil(warmup_fraction * total_steps)``.
    """

    total_steps: int
    peak_lr: float
    warmup_fraction: float = 0.06

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_fraction * self.total_steps))

    def lr(self, step: int) -> float:
        w, total = self.warmup_steps, self.total_steps
        if step <= 0:
            return 0.0
        if step <= w:
            return self.peak_lr * step / w
        if step >= total:
            return 0.0
        return self.peak_lr * (total - step) / (total - w)


class Adam:
    def __init__(self, params: Iterable[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    loss: float


@dataclass
class TrainResult:
    steps: int
    final_train_loss: float
    history: list[dict] = field(default_factory=list)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(model: Model, pets: PetSet, data: Dataset, config: TrainConfig, seed: int,
          acc: CriterionAccumulator | None = None, stage: str = "train",
          on_step: Callable[[int, PetSet], None] | None = None) -> TrainResult:
    """Optimize the PETs and the classifier head; the base stays frozen.

    If ``acc`` is given it observes every step after gradient masking and
    before the parameter update. ``on_step(step, pets)`` runs after each update.
    """
    if len(data) == 0:
        raise UsageError("cannot train on an empty dataset")
    model.attach(pets)
    n = len(data)
    per_epoch = math.ceil(n / config.batch_size)
    schedule = Schedule(config.epochs * per_epoch, config.peak_lr, config.warmup_fraction)
    opt = Adam(pets.parameters() + model.head(), config.beta1, config.beta2, config.eps)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = epoch_order(n, seed, epoch)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            step += 1
            opt.zero_grad()
            loss, _ = model.forward(data.tokens[idx], data.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            ad.backward(loss)
            pets.mask_grads()
            if acc is not None:
                acc.observe_step(pets)
            lr = schedule.lr(step)
            opt.step(lr)
            if on_step is not None:
                on_step(step, pets)
            history.append({"stage": stage, "step": step, "lr": lr, "loss": value, "accuracy": ""})
    final = evaluate(model, data)
    return TrainResult(step, final.loss, history)


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> Metrics:
    if len(data) == 0:
        raise UsageError("cannot evaluate on an empty split")
    total_loss = 0.0
    correct = 0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            toks = data.tokens[start:start + batch_size]
            labels = data.labels[start:start + batch_size]
            loss, logits = model.forward(toks, labels)
            total_loss += loss.item() * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    return Metrics(correct / len(data), total_loss / len(data))


def write_history_csv(rows: Iterable[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["stage", "step", "lr", "loss", "accuracy"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
