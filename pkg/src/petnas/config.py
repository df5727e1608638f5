"""Run configuration: parsing, validation and the resolved echo written beside outputs.

Canonical format is JSON::

    {
      "model": {"layers": 2, "hidden_dim": 32, ...},
      "model_seed": 0,
      "pretrain": null,
      "task": {"kind": "presence", "train_size": 512, "val_size": 128, "seed": 0},
      "search_space": {
        "bias": {"sites": "all", "layers": "all", "structured": false},
        "lora": {"sites": ["attention.query", "attention.key"], "rank": 16, "structured": false}
      },
      "budget": 144,
      "criterion": "averaged",
      "include_v_columns": false,
      "lora_init": "balanced",
      "train": {"epochs": 20, "batch_size": 16, "peak_lr": 0.03},
      "seeds": [0, 1, 2, 3, 4]
    }

``budget_fraction`` may replace ``budget``; it is resolved against the
initial PET parameter count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from .criterion import CRITERION_MODES
from .data import TaskSpec
from .errors import ConfigError
from .model import LAYER_SITES, LINEAR_SITES, TransformerConfig, site_table
from .pet import LORA_INITS
from .train import TrainConfig


@dataclass(frozen=True)
class FamilySpace:
    sites: tuple[str, ...]
    layers: tuple[int, ...] | None = None
    structured: bool = False
    rank: int = 16


@dataclass(frozen=True)
class SearchSpace:
    bias: FamilySpace | None = None
    lora: FamilySpace | None = None

    def placements(self, cfg: TransformerConfig):
        """Return ``(bias_sites, lora_sites)`` as lists of ``(layer, site_name)``."""
        out = []
        for fam in (self.bias, self.lora):
            if fam is None:
                out.append([])
                continue
            layers = range(cfg.layers) if fam.layers is None else fam.layers
            out.append([(layer, name) for layer in layers for name in fam.sites])
        return out[0], out[1]

    def to_dict(self) -> dict:
        d = {}
        for name in ("bias", "lora"):
            fam = getattr(self, name)
            if fam is None:
                d[name] = None
                continue
            d[name] = {"sites": list(fam.sites),
                       "layers": None if fam.layers is None else list(fam.layers),
                       "structured": fam.structured}
            if name == "lora":
                d[name]["rank"] = fam.rank
        return d


def _parse_family(name: str, d, cfg: TransformerConfig) -> FamilySpace | None:
    if d is None:
        return None
    where = f"search_space.{name}"
    if not isinstance(d, Mapping):
        raise ConfigError(where, "must be an object or null")
    unknown = set(d) - {"sites", "layers", "structured", "rank"}
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}", "unknown field")
    allowed = LAYER_SITES if name == "bias" else LINEAR_SITES
    sites = d.get("sites", "all")
    if sites == "all":
        sites = allowed
    if not isinstance(sites, (list, tuple)) or not sites:
        raise ConfigError(f"{where}.sites", 'must be "all" or a non-empty list of site names')
    for s in sites:
        if s not in allowed:
            hint = " (low-rank updates need a weight matrix)" if s in LAYER_SITES else ""
            raise ConfigError(f"{where}.sites", f"unknown site {s!r}{hint}; choose from {list(allowed)}")
    if len(set(sites)) != len(sites):
        raise ConfigError(f"{where}.sites", "duplicate site names")
    layers = d.get("layers", "all")
    if layers in ("all", None):
        layers = None
    else:
        if not isinstance(layers, (list, tuple)) or not all(
                isinstance(x, int) and 0 <= x < cfg.layers for x in layers):
            raise ConfigError(f"{where}.layers", f"must be \"all\" or layer indices in [0, {cfg.layers})")
        layers = tuple(sorted(set(layers)))
    structured = d.get("structured", False)
    if not isinstance(structured, bool):
        raise ConfigError(f"{where}.structured", "must be true or false")
    rank = d.get("rank", 16)
    if not isinstance(rank, int) or isinstance(rank, bool) or rank < 1:
        raise ConfigError(f"{where}.rank", f"must be a positive integer, got {rank!r}")
    return FamilySpace(tuple(sites), layers, structured, rank)


@dataclass(frozen=True)
class PretrainConfig:
    """Optional warm-up of the base weights on a synthetic task before freezing."""

    task: TaskSpec
    train: TrainConfig
    seed: int = 0

    def to_dict(self) -> dict:
        return {"task": self.task.to_dict(), "train": self.train.to_dict(), "seed": self.seed}


@dataclass(frozen=True)
class RunConfig:
    model: TransformerConfig = field(default_factory=TransformerConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    search_space: SearchSpace = field(default_factory=lambda: SearchSpace(
        bias=FamilySpace(LAYER_SITES)))
    budget: int | None = None
    budget_fraction: float | None = None
    criterion: str = "averaged"
    include_v_columns: bool = False
    lora_init: str = "balanced"
    train: TrainConfig = field(default_factory=TrainConfig)
    model_seed: int = 0
    pretrain: PretrainConfig | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.budget is not None and (not isinstance(self.budget, int) or isinstance(self.budget, bool)
                                        or self.budget < 0):
            raise ConfigError("budget", f"must be a non-negative integer, got {self.budget!r}")
        if self.budget_fraction is not None and not 0.0 <= self.budget_fraction <= 1.0:
            raise ConfigError("budget_fraction", "must lie in [0, 1]")
        if self.criterion not in CRITERION_MODES:
            raise ConfigError("criterion", f"expected one of {list(CRITERION_MODES)}, got {self.criterion!r}")
        if self.lora_init not in LORA_INITS:
            raise ConfigError("lora_init", f"expected one of {sorted(LORA_INITS)}, got {self.lora_init!r}")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of non-negative integers")
        if self.search_space.bias is None and self.search_space.lora is None:
            raise ConfigError("search_space", "enable at least one of bias / lora")

    def initial_param_count(self) -> int:
        sites = {s.key: s for s in site_table(self.model)}
        bias_at, lora_at = self.search_space.placements(self.model)
        total = 0
        for layer, name in bias_at:
            total += sites[f"layers.{layer}.{name}"].bias_length
        for layer, name in lora_at:
            out_dim, in_dim = sites[f"layers.{layer}.{name}"].weight_shape
            total += (out_dim + in_dim) * self.search_space.lora.rank
        return total

    def resolved_budget(self) -> int:
        if self.budget is not None:
            return self.budget
        initial = self.initial_param_count()
        if self.budget_fraction is None:
            return initial
        return math.floor(self.budget_fraction * initial)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "budget" in kw:
            kw["budget_fraction"] = None
        return replace(self, **kw)

    def to_dict(self, resolve: bool = True) -> dict:
        return {
            "model": self.model.to_dict(),
            "model_seed": self.model_seed,
            "pretrain": None if self.pretrain is None else self.pretrain.to_dict(),
            "task": self.task.to_dict(),
            "search_space": self.search_space.to_dict(),
            "budget": self.resolved_budget() if resolve else self.budget,
            "budget_fraction": None if resolve else self.budget_fraction,
            "criterion": self.criterion,
            "include_v_columns": self.include_v_columns,
            "lora_init": self.lora_init,
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {"model", "model_seed", "pretrain", "task", "search_space", "budget",
                 "budget_fraction", "criterion", "include_v_columns", "lora_init", "train", "seeds"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        if d.get("budget") is not None and d.get("budget_fraction") is not None:
            raise ConfigError("budget_fraction", "give either budget or budget_fraction, not both")
        try:
            model = TransformerConfig.from_dict(d.get("model", {}))
            space = d.get("search_space", {"bias": {"sites": "all"}})
            if not isinstance(space, Mapping):
                raise ConfigError("search_space", "must be an object")
            extra = set(space) - {"bias", "lora"}
            if extra:
                raise ConfigError(f"search_space.{sorted(extra)[0]}", "unknown PET family")
            search = SearchSpace(_parse_family("bias", space.get("bias"), model),
                                 _parse_family("lora", space.get("lora"), model))
            pre = d.get("pretrain")
            pretrain = None
            if pre is not None:
                pretrain = PretrainConfig(TaskSpec.from_dict(pre.get("task", {})),
                                          TrainConfig.from_dict(pre.get("train", {})),
                                          int(pre.get("seed", 0)))
            return cls(
                model=model,
                task=TaskSpec.from_dict(d.get("task", {})),
                search_space=search,
                budget=d.get("budget"),
                budget_fraction=d.get("budget_fraction"),
                criterion=d.get("criterion", "averaged"),
                include_v_columns=bool(d.get("include_v_columns", False)),
                lora_init=d.get("lora_init", "balanced"),
                train=TrainConfig.from_dict(d.get("train", {})),
                model_seed=d.get("model_seed", 0),
                pretrain=pretrain,
                seeds=tuple(d.get("seeds", (0, 1, 2, 3, 4))),
            )
        except TypeError as exc:
            raise ConfigError("<root>", str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(raw)
