"""Architecture search by pruning: train, score, prune to budget, rewind, retrain."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .criterion import (
    AVERAGED,
    BIAS_ENTRY,
    LAST_STEP,
    LORA_COLUMN,
    LORA_ENTRY,
    WHOLE_BIAS,
    CriterionAccumulator,
    PruneOp,
    score_ops,
)
from .data import Splits, load_task
from .errors import InputError, UsageError
from .model import SITE_ORDER, Model, build_model, site_table
from .pet import BIAS, PetSet, build_pets
from .train import Adam, Metrics, Schedule, epoch_order, evaluate, train

log = logging.getLogger(__name__)

SPEC_VERSION = 1
BASELINES = ("random_mask", "last_step_criterion", "full")


def prune_to_budget(ops: Sequence[PruneOp], current_count: int, budget: int) -> tuple[list[PruneOp], int]:
    """Apply ops in increasing score order until the count is at most ``budget``.

    Ties are broken by (layer, site, kind, part, index). Returns the applied
    ops in application order and the resulting parameter count.
    """
    if budget < 0:
        raise UsageError(f"budget must be non-negative, got {budget}")
    if current_count <= budget:
        log.warning("budget %d >= current parameter count %d: no pruning performed", budget, current_count)
        return [], current_count
    applied = []
    count = current_count
    for op in sorted(ops, key=PruneOp.sort_key):
        if count <= budget:
            break
        applied.append(op)
        count -= op.param_count
    return applied, count


def apply_prune_ops(pets: PetSet, ops: Iterable[PruneOp]) -> None:
    for op in ops:
        pet = pets.get(op.pet_id)
        if op.kind == WHOLE_BIAS:
            pet.mask[:] = False
        elif op.kind == BIAS_ENTRY:
            pet.mask[op.index] = False
        elif op.kind == LORA_COLUMN:
            pet.prune_column(op.index)
        elif op.kind == LORA_ENTRY:
            mask = pet.mask_u if op.part == "U" else pet.mask_v
            mask.reshape(-1)[op.index] = False
        else:
            raise UsageError(f"unknown prune op kind {op.kind!r}")
    pets.apply_masks()


# -- architecture spec -------------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    """Run-length encode a boolean array (row-major) as alternating run lengths."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    runs = []
    if flat.size:
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        runs = [int(n) for n in np.diff(bounds)]
    return {"shape": list(mask.shape), "start": bool(flat[0]) if flat.size else True, "runs": runs}


def rle_decode(d: Mapping) -> np.ndarray:
    runs = np.asarray(d["runs"], dtype=np.int64)
    values = (np.arange(len(runs)) % 2 == 0) == bool(d["start"])
    shape = tuple(d["shape"])
    size = int(np.prod(shape))
    if runs.sum() != size or (runs < 1).any():
        raise InputError(f"run lengths sum to {int(runs.sum())}, expected {size}")
    return np.repeat(values, runs).reshape(shape)


@dataclass
class ArchitectureSpec:
    model: dict
    search_space: dict
    budget: int
    initial_param_count: int
    param_count: int
    criterion: str
    lora_init: str
    seeds: dict
    pets: list[dict]
    selection: str = "search"
    timings: dict = field(default_factory=dict)

    @classmethod
    def from_pets(cls, config: RunConfig, pets: PetSet, initial: int, seed: int, selection: str,
                  criterion: str, timings: Mapping[str, float] | None = None) -> "ArchitectureSpec":
        entries = []
        for pet in pets:
            e = {"id": pet.pet_id, "layer": pet.site.layer_index, "site": pet.site.site_name,
                 "family": pet.family, "structured": pet.structured}
            if pet.family == BIAS:
                e["masks"] = {"delta": rle_encode(pet.mask)}
            else:
                e["rank"] = pet.rank
                e["masks"] = {"U": rle_encode(pet.mask_u), "V": rle_encode(pet.mask_v)}
            entries.append(e)
        return cls(
            model=config.model.to_dict(),
            search_space=config.search_space.to_dict(),
            budget=config.resolved_budget(),
            initial_param_count=initial,
            param_count=pets.param_count(),
            criterion=criterion,
            lora_init=config.lora_init,
            seeds={"model": config.model_seed, "data": config.task.seed, "run": seed},
            pets=entries,
            selection=selection,
            timings=dict(timings or {}),
        )

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {
            "version": SPEC_VERSION,
            "model": self.model,
            "search_space": self.search_space,
            "budget": self.budget,
            "initial_param_count": self.initial_param_count,
            "param_count": self.param_count,
            "criterion": self.criterion,
            "lora_init": self.lora_init,
            "selection": self.selection,
            "seeds": self.seeds,
            "pets": self.pets,
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSpec":
        try:
            if d.get("version") != SPEC_VERSION:
                raise InputError(f"unsupported spec version {d.get('version')!r}")
            return cls(d["model"], d["search_space"], d["budget"], d["initial_param_count"],
                       d["param_count"], d["criterion"], d["lora_init"], d["seeds"], d["pets"],
                       d.get("selection", "search"), d.get("timings", {}))
        except KeyError as exc:
            raise InputError(f"architecture spec missing field {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ArchitectureSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: invalid JSON ({exc.msg})") from None

    def masks(self) -> dict[str, list[np.ndarray]]:
        out = {}
        for e in self.pets:
            m = e["masks"]
            out[e["id"]] = [rle_decode(m["delta"])] if e["family"] == BIAS else \
                [rle_decode(m["U"]), rle_decode(m["V"])]
        return out


# -- pipeline ----------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    spec: ArchitectureSpec
    validation: Metrics
    train_loss: float
    history: list[dict]
    ops: list[PruneOp] = field(default_factory=list)
    applied: list[PruneOp] = field(default_factory=list)
    initial_values: dict = field(default_factory=dict)
    retrain_start_values: dict = field(default_factory=dict)
    final_values: dict = field(default_factory=dict)


def pretrain_base(model_cfg, params: dict, data, train_cfg, seed: int) -> dict:
    """Briefly train every base weight on ``data``, then return the frozen copy."""
    model = Model(model_cfg, params)
    trainable = [t for k, t in model.params.items() if k != "embeddings.position"
                 and not k.startswith("classifier.")] + model.head()
    for t in trainable:
        t.requires_grad = True
    n = len(data)
    per_epoch = -(-n // train_cfg.batch_size)
    schedule = Schedule(train_cfg.epochs * per_epoch, train_cfg.peak_lr, train_cfg.warmup_fraction)
    opt = Adam(trainable, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    step = 0
    for epoch in range(train_cfg.epochs):
        order = epoch_order(n, seed, epoch)
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            step += 1
            opt.zero_grad()
            loss, _ = model.forward(data.tokens[idx], data.labels[idx])
            ad.backward(loss)
            opt.step(schedule.lr(step))
    out = {k: t.data.copy() for k, t in model.params.items()}
    # The task head is re-drawn so downstream tuning starts from the seeded head.
    out["classifier.weight"] = params["classifier.weight"].copy()
    out["classifier.bias"] = params["classifier.bias"].copy()
    return out


def base_params(config: RunConfig) -> dict[str, np.ndarray]:
    params = build_model(config.model, config.model_seed)
    if config.pretrain is not None:
        pre = config.pretrain
        splits = load_task(pre.task, config.model.vocab_size, config.model.max_seq_len,
                           config.model.num_classes)
        params = pretrain_base(config.model, params, splits.train, pre.train, pre.seed)
    return params


def load_splits(config: RunConfig) -> Splits:
    m = config.model
    return load_task(config.task, m.vocab_size, m.max_seq_len, m.num_classes)


def init_pets(config: RunConfig, seed: int) -> PetSet:
    bias_at, lora_at = config.search_space.placements(config.model)
    space = config.search_space
    return build_pets(
        site_table(config.model), bias_at, lora_at,
        bias_structured=bool(space.bias and space.bias.structured),
        lora_structured=bool(space.lora and space.lora.structured),
        rank=space.lora.rank if space.lora else 1,
        lora_init=config.lora_init,
        rng=np.random.default_rng(seed),
    )


class _Context:
    """Per-run state shared by the search and baseline drivers."""

    def __init__(self, config: RunConfig, seed: int, params=None, splits=None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else base_params(config)
        self.splits = splits if splits is not None else load_splits(config)
        self.model = Model(config.model, self.params)
        self.pets = init_pets(config, seed)
        self.initial_values = self.pets.snapshot()
        self.head_init = self.model.head_state()
        self.initial_count = self.pets.param_count()
        self.timings: dict[str, float] = {}
        self.history: list[dict] = []

    def timed(self, label: str, fn: Callable, *args, **kw):
        start = time.perf_counter()
        out = fn(*args, **kw)
        self.timings[label] = round(time.perf_counter() - start, 6)
        log.info("seed %d: %s done in %.2fs", self.seed, label, self.timings[label])
        return out

    def rewind(self) -> None:
        self.pets.restore(self.initial_values)
        self.pets.apply_masks()
        self.model.load_head(self.head_init)

    def retrain_and_evaluate(self, selection: str, criterion: str, ops=(), applied=(),
                             on_step=None) -> RunResult:
        self.rewind()
        start_values = self.pets.snapshot()
        res = self.timed("retrain", train, self.model, self.pets, self.splits.train,
                         self.config.train, self.seed, stage="retrain", on_step=on_step)
        val = self.timed("evaluate", evaluate, self.model, self.splits.validation)
        history = self.history + res.history + [{"stage": "evaluate", "step": res.steps, "lr": "",
                                                 "loss": val.loss, "accuracy": val.accuracy}]
        spec = ArchitectureSpec.from_pets(self.config, self.pets, self.initial_count, self.seed,
                                          selection, criterion, self.timings)
        log.info("seed %d: %s params=%d/%d val_acc=%.4f", self.seed, selection,
                 spec.param_count, self.initial_count, val.accuracy)
        return RunResult(self.seed, spec, val, res.final_train_loss, history, list(ops),
                         list(applied), self.initial_values, start_values, self.pets.snapshot())


def run_nas(config: RunConfig, seed: int, *, criterion: str | None = None, params=None,
            splits=None, on_retrain_step=None) -> RunResult:
    """Full search for one seed: train, score, prune, rewind, retrain, evaluate."""
    criterion = criterion or config.criterion
    return run_nas_modes(config, seed, (criterion,), params=params, splits=splits,
                         on_retrain_step=on_retrain_step)[criterion]


def run_nas_modes(config: RunConfig, seed: int, criteria=(AVERAGED, LAST_STEP), *, params=None,
                  splits=None, on_retrain_step=None) -> dict[str, RunResult]:
    """Like :func:`run_nas`, but one search run feeds several scoring modes.

    Each mode prunes the untouched search space and retrains independently,
    so every result equals what a separate :func:`run_nas` call would return.
    """
    ctx = _Context(config, seed, params, splits)
    acc = CriterionAccumulator(ctx.pets)
    res = ctx.timed("search_train", train, ctx.model, ctx.pets, ctx.splits.train, config.train,
                    seed, acc, stage="search")
    ctx.history = list(res.history)
    unpruned = ctx.pets.mask_state()
    results = {}
    for criterion in criteria:
        ctx.pets.load_masks(unpruned)
        ops = ctx.timed("score", score_ops, acc.values(criterion), ctx.pets, config.include_v_columns)
        applied, _ = ctx.timed("prune", prune_to_budget, ops, ctx.initial_count,
                               config.resolved_budget())
        apply_prune_ops(ctx.pets, applied)
        selection = "search" if criterion == AVERAGED else "last_step_criterion"
        results[criterion] = ctx.retrain_and_evaluate(selection, criterion, ops, applied,
                                                      on_retrain_step)
    return results


def run_baseline(config: RunConfig, selection: str, seed: int, *, params=None, splits=None,
                 on_retrain_step=None) -> RunResult:
    """Comparison runs sharing the retrain protocol of :func:`run_nas`.

    ``random_mask`` prunes uniformly random units of the same granularity,
    ``last_step_criterion`` scores from the final search step only, and
    ``full`` trains the unpruned search space.
    """
    if selection not in BASELINES:
        raise UsageError(f"unknown baseline {selection!r}; expected one of {list(BASELINES)}")
    if selection == "last_step_criterion":
        return run_nas(config, seed, criterion=LAST_STEP, params=params, splits=splits,
                       on_retrain_step=on_retrain_step)
    ctx = _Context(config, seed, params, splits)
    if selection == "full":
        return ctx.retrain_and_evaluate("full", "none", on_step=on_retrain_step)
    units = score_ops({p.pet_id: [np.zeros(t.shape) for t in p.tensors()] for p in ctx.pets},
                      ctx.pets, config.include_v_columns)
    order = np.random.default_rng([seed, 0xBA5E]).permutation(len(units))
    ops = [PruneOp(u.kind, u.pet_id, u.layer, u.site_name, u.part, u.index, u.param_count,
                   float(rank)) for u, rank in zip(units, np.argsort(order))]
    applied, _ = ctx.timed("prune", prune_to_budget, ops, ctx.initial_count, config.resolved_budget())
    apply_prune_ops(ctx.pets, applied)
    return ctx.retrain_and_evaluate("random_mask", "random", ops, applied, on_retrain_step)


def retrain_from_spec(config: RunConfig, spec: ArchitectureSpec, *, params=None,
                      splits=None) -> RunResult:
    """Reproduce the retrain run of ``spec`` from its masks and the run seed."""
    seed = int(spec.seeds["run"])
    ctx = _Context(config, seed, params, splits)
    masks = spec.masks()
    if set(masks) != {p.pet_id for p in ctx.pets}:
        raise InputError("spec PETs do not match the configured search space")
    ctx.pets.load_masks(masks)
    ctx.pets.apply_masks()
    return ctx.retrain_and_evaluate(spec.selection, spec.criterion)


def architecture_map(specs: Sequence[ArchitectureSpec]) -> list[dict]:
    """Mean fraction of PET parameters kept per (layer, site) across ``specs``."""
    if not specs:
        raise UsageError("need at least one architecture spec")
    model = specs[0].model
    for s in specs[1:]:
        if s.model != model:
            raise InputError("architecture specs come from different model shapes")
    per_spec = []
    for s in specs:
        kept: dict[tuple[int, str], list[int]] = {}
        for e in s.pets:
            key = (e["layer"], e["site"])
            k, t = kept.setdefault(key, [0, 0])
            for m in e["masks"].values():
                arr = rle_decode(m)
                k += int(arr.sum())
                t += arr.size
            kept[key] = [k, t]
        per_spec.append({key: k / t for key, (k, t) in kept.items()})
    if any(d.keys() != per_spec[0].keys() for d in per_spec):
        raise InputError("architecture specs cover different PET sites")
    keys = sorted(per_spec[0], key=lambda k: (k[0], SITE_ORDER[k[1]]))
    rows = []
    for key in keys:
        vals = [d[key] for d in per_spec]
        rows.append({"layer": key[0], "site_name": key[1], "fraction_kept": sum(vals) / len(vals)})
    return rows
