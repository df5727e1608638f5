"""Bias-delta and low-rank PET modules with pruning masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tensor
from .errors import AttachmentError, ConfigError
from .model import CLASSIFIER, ModuleSite

BIAS = "bias"
LORA = "lora"


class BiasDelta:
    """Additive update ``delta`` on a site's bias vector.

    Structured deltas are kept or dropped as a whole; unstructured ones mask
    individual entries.
    """

    family = BIAS

    def __init__(self, site: ModuleSite, structured: bool = False):
        self.site = site
        self.structured = structured
        self.delta = Tensor(np.zeros(site.bias_length), requires_grad=True,
                            name=f"{site.key}.bias_delta")
        self.mask = np.ones(site.bias_length, dtype=bool)

    @property
    def pet_id(self) -> str:
        return f"{self.site.key}.{BIAS}"

    def check_site(self, site: ModuleSite) -> None:
        if self.delta.shape != (site.bias_length,):
            raise AttachmentError(
                f"{self.pet_id}: delta shape {self.delta.shape} != bias length {site.bias_length}")

    def tensors(self) -> list[Tensor]:
        return [self.delta]

    def masks(self) -> list[np.ndarray]:
        return [self.mask]

    def param_count(self) -> int:
        return int(self.mask.sum())

    def effective_delta(self) -> np.ndarray:
        return self.delta.data * self.mask


class LoRAUpdate:
    """Low-rank update ``dW = (U * mask_u) @ (V * mask_v).T``.

    ``U`` is ``out x r`` and ``V`` is ``in x r`` for a site weight of shape
    ``out x in``, so the forward contribution is ``x @ V @ U.T``.
    """

    family = LORA

    def __init__(self, site: ModuleSite, rank: int, structured: bool = False):
        if site.weight_shape is None:
            raise AttachmentError(f"{site.key} has no weight matrix for a low-rank update")
        if rank < 1:
            raise ConfigError("search_space.lora.rank", f"must be >= 1, got {rank}")
        out_dim, in_dim = site.weight_shape
        self.site = site
        self.rank = rank
        self.structured = structured
        self.U = Tensor(np.zeros((out_dim, rank)), requires_grad=True, name=f"{site.key}.lora_U")
        self.V = Tensor(np.zeros((in_dim, rank)), requires_grad=True, name=f"{site.key}.lora_V")
        self.mask_u = np.ones((out_dim, rank), dtype=bool)
        self.mask_v = np.ones((in_dim, rank), dtype=bool)

    @property
    def pet_id(self) -> str:
        return f"{self.site.key}.{LORA}"

    def check_site(self, site: ModuleSite) -> None:
        out_dim, in_dim = site.weight_shape or (None, None)
        if self.U.shape[0] != out_dim or self.V.shape[0] != in_dim:
            raise AttachmentError(
                f"{self.pet_id}: U {self.U.shape} / V {self.V.shape} do not fit weight "
                f"{site.weight_shape}")

    def tensors(self) -> list[Tensor]:
        return [self.U, self.V]

    def masks(self) -> list[np.ndarray]:
        return [self.mask_u, self.mask_v]

    def param_count(self) -> int:
        return int(self.mask_u.sum() + self.mask_v.sum())

    def prune_column(self, j: int) -> None:
        self.mask_u[:, j] = False
        self.mask_v[:, j] = False

    def delta_weight(self) -> np.ndarray:
        return (self.U.data * self.mask_u) @ (self.V.data * self.mask_v).T


def init_bias(delta: BiasDelta, rng: np.random.Generator | None = None) -> None:
    delta.delta.data = np.zeros_like(delta.delta.data)


def init_lora_balanced(upd: LoRAUpdate, rng: np.random.Generator) -> None:
    """Draw ``U`` with std ``1/sqrt(out)`` and ``V`` with std ``1/sqrt(in)``.

    With these scales the expected squared gradients of ``U`` and ``V``
    entries match. Draw order: all of ``U`` row-major, then ``V``.
    """
    m = upd.U.shape[0]
    n = upd.V.shape[0]
    upd.U.data = rng.normal(0.0, 1.0 / np.sqrt(m), upd.U.shape)
    upd.V.data = rng.normal(0.0, 1.0 / np.sqrt(n), upd.V.shape)


def init_lora_original(upd: LoRAUpdate, rng: np.random.Generator) -> None:
    """``U = 0`` and ``V`` Gaussian with std ``1/sqrt(in)``."""
    n = upd.V.shape[0]
    upd.U.data = np.zeros(upd.U.shape)
    upd.V.data = rng.normal(0.0, 1.0 / np.sqrt(n), upd.V.shape)


LORA_INITS = {"balanced": init_lora_balanced, "original": init_lora_original}


@dataclass
class PetSet:
    bias: dict[str, BiasDelta] = field(default_factory=dict)
    lora: dict[str, LoRAUpdate] = field(default_factory=dict)

    def __iter__(self) -> Iterator[BiasDelta | LoRAUpdate]:
        """Iterate in stable site order, bias before low-rank at each site."""
        items = [(p.site.order, 0, p) for p in self.bias.values()]
        items += [(p.site.order, 1, p) for p in self.lora.values()]
        items.sort(key=lambda t: (t[0], t[1]))
        return iter([p for _, _, p in items])

    def __len__(self) -> int:
        return len(self.bias) + len(self.lora)

    def add(self, pet: BiasDelta | LoRAUpdate) -> None:
        target = self.bias if pet.family == BIAS else self.lora
        if pet.site.key in target:
            raise ConfigError("search_space", f"duplicate {pet.family} PET at {pet.site.key}")
        target[pet.site.key] = pet

    def get(self, pet_id: str) -> BiasDelta | LoRAUpdate:
        key, family = pet_id.rsplit(".", 1)
        return (self.bias if family == BIAS else self.lora)[key]

    def parameters(self) -> list[Tensor]:
        return [t for pet in self for t in pet.tensors()]

    def param_count(self) -> int:
        return sum(pet.param_count() for pet in self)

    def apply_masks(self) -> None:
        """Zero masked values (and any existing gradients) in place."""
        for pet in self:
            for t, m in zip(pet.tensors(), pet.masks()):
                t.data = t.data * m
                if t.grad is not None:
                    t.grad = t.grad * m

    def mask_grads(self) -> None:
        for pet in self:
            for t, m in zip(pet.tensors(), pet.masks()):
                if t.grad is not None:
                    t.grad = t.grad * m

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def snapshot(self) -> dict[str, list[np.ndarray]]:
        return {pet.pet_id: [t.data.copy() for t in pet.tensors()] for pet in self}

    def restore(self, snap: Mapping[str, list[np.ndarray]]) -> None:
        for pet in self:
            for t, value in zip(pet.tensors(), snap[pet.pet_id]):
                t.data = value.copy()
                t.grad = None

    def mask_state(self) -> dict[str, list[np.ndarray]]:
        return {pet.pet_id: [m.copy() for m in pet.masks()] for pet in self}

    def load_masks(self, state: Mapping[str, list[np.ndarray]]) -> None:
        for pet in self:
            for m, value in zip(pet.masks(), state[pet.pet_id]):
                m[...] = value


def param_count(pets) -> int:
    """Unmasked PET parameters; the classifier head never counts."""
    return sum(p.param_count() for p in pets)


def build_pets(sites: list[ModuleSite], bias_sites, lora_sites, *, bias_structured: bool,
               lora_structured: bool, rank: int, lora_init: str,
               rng: np.random.Generator) -> PetSet:
    """Create and initialize PETs at the given ``(layer, site_name)`` pairs.

    Random draws happen in stable site order so a seed fully determines the set.
    """
    if lora_init not in LORA_INITS:
        raise ConfigError("lora_init", f"expected one of {sorted(LORA_INITS)}, got {lora_init!r}")
    init = LORA_INITS[lora_init]
    bias_sites, lora_sites = set(bias_sites), set(lora_sites)
    pets = PetSet()
    for site in sorted(sites, key=lambda s: s.order):
        if site.site_name == CLASSIFIER:
            continue
        ident = (site.layer_index, site.site_name)
        if ident in bias_sites:
            b = BiasDelta(site, structured=bias_structured)
            init_bias(b, rng)
            pets.add(b)
        if ident in lora_sites:
            u = LoRAUpdate(site, rank, structured=lora_structured)
            init(u, rng)
            pets.add(u)
    return pets
