"""First-order pruning scores accumulated over training steps.

For each PET parameter ``theta`` with gradient ``g`` the instantaneous score is
``-theta * g``, the first-order estimate of how much the training loss rises
when ``theta`` is set to zero. Scores are averaged over every optimizer step
and then summed over pruning groups.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import UsageError
from .model import SITE_ORDER
from .pet import BIAS, PetSet

WHOLE_BIAS = "whole_bias"
BIAS_ENTRY = "bias_entry"
LORA_COLUMN = "lora_column"
LORA_ENTRY = "lora_entry"
KIND_ORDER = {WHOLE_BIAS: 0, BIAS_ENTRY: 1, LORA_COLUMN: 2, LORA_ENTRY: 3}

AVERAGED = "averaged"
LAST_STEP = "last_step"
CRITERION_MODES = (AVERAGED, LAST_STEP)


@dataclass(frozen=True)
class PruneOp:
    kind: str
    pet_id: str
    layer: int
    site_name: str
    part: str
    index: int
    param_count: int
    score: float

    def tie_key(self) -> tuple:
        return (self.layer, SITE_ORDER[self.site_name], KIND_ORDER[self.kind], self.part, self.index)

    def sort_key(self) -> tuple:
        return (self.score,) + self.tie_key()

    @property
    def label(self) -> str:
        if self.kind == WHOLE_BIAS:
            return "*"
        if self.kind == LORA_COLUMN:
            return f"col{self.index}"
        return f"{self.part}{self.index}" if self.part else str(self.index)


class CriterionAccumulator:
    """Running sum of ``-theta * grad`` per PET tensor, plus the latest step alone."""

    def __init__(self, pets: PetSet):
        self.sums = {p.pet_id: [np.zeros(t.shape) for t in p.tensors()] for p in pets}
        self.last = {p.pet_id: [np.zeros(t.shape) for t in p.tensors()] for p in pets}
        self.steps = 0

    def observe_step(self, pets: PetSet) -> None:
        """Record one step; call after backward and before the optimizer update."""
        for pet in pets:
            sums = self.sums[pet.pet_id]
            last = self.last[pet.pet_id]
            for i, t in enumerate(pet.tensors()):
                if t.grad is None:
                    raise UsageError(f"no gradient for {t.name} when observing step {self.steps + 1}")
                inst = -t.data * t.grad
                sums[i] += inst
                last[i] = inst
        self.steps += 1

    def averaged(self) -> dict[str, list[np.ndarray]]:
        self._require_steps()
        return {k: [s / self.steps for s in v] for k, v in self.sums.items()}

    def last_step(self) -> dict[str, list[np.ndarray]]:
        self._require_steps()
        return {k: [s.copy() for s in v] for k, v in self.last.items()}

    def values(self, mode: str = AVERAGED) -> dict[str, list[np.ndarray]]:
        if mode == AVERAGED:
            return self.averaged()
        if mode == LAST_STEP:
            return self.last_step()
        raise UsageError(f"unknown criterion mode {mode!r}; expected one of {CRITERION_MODES}")

    def _require_steps(self):
        if self.steps == 0:
            raise UsageError("criterion has not observed any steps")


def score_ops(values: dict[str, list[np.ndarray]], pets: PetSet,
              include_v_columns: bool = False) -> list[PruneOp]:
    """Group per-parameter criterion values into prune operations.

    Only currently unmasked units produce operations. Structured low-rank
    columns are scored from ``U``'s column alone unless ``include_v_columns``.
    """
    ops: list[PruneOp] = []
    for pet in pets:
        site = pet.site
        vals = values[pet.pet_id]

        def op(kind, part, index, count, score):
            ops.append(PruneOp(kind, pet.pet_id, site.layer_index, site.site_name, part,
                               int(index), int(count), float(score)))

        if pet.family == BIAS:
            crit = vals[0]
            if pet.structured:
                if pet.mask.any():
                    op(WHOLE_BIAS, "", 0, pet.mask.sum(), crit[pet.mask].sum())
            else:
                for i in np.flatnonzero(pet.mask):
                    op(BIAS_ENTRY, "", i, 1, crit[i])
        else:
            cu, cv = vals
            if pet.structured:
                for j in range(pet.rank):
                    mu, mv = pet.mask_u[:, j], pet.mask_v[:, j]
                    count = mu.sum() + mv.sum()
                    if count == 0:
                        continue
                    score = cu[mu, j].sum()
                    if include_v_columns:
                        score += cv[mv, j].sum()
                    op(LORA_COLUMN, "", j, count, score)
            else:
                for part, crit, mask in (("U", cu, pet.mask_u), ("V", cv, pet.mask_v)):
                    flat = crit.reshape(-1)
                    for i in np.flatnonzero(mask.reshape(-1)):
                        op(LORA_ENTRY, part, i, 1, flat[i])
    return ops


def write_scores_csv(ops: Iterable[PruneOp], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pet_id", "kind", "index", "param_count", "score"])
        for op in ops:
            w.writerow([op.pet_id, op.kind, op.label, op.param_count, repr(op.score)])
