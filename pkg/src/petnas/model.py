"""A small post-LayerNorm transformer encoder with frozen, seeded weights.

Weights are stored ``out x in``; a linear site computes ``x @ W.T + b``.
PET modules attach to named sites and add ``x @ V @ U.T`` (low-rank) and
``delta`` (bias) on top of the frozen computation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AttachmentError, ConfigError, InputError

if TYPE_CHECKING:
    from .pet import PetSet

PAD_ID = 0
BOS_ID = 1

LINEAR_SITES = (
    "attention.query",
    "attention.key",
    "attention.value",
    "attention.output",
    "ffn.intermediate",
    "ffn.output",
)
NORM_SITES = ("layernorm.attention", "layernorm.ffn")
LAYER_SITES = LINEAR_SITES + NORM_SITES
CLASSIFIER = "classifier"
SITE_NAMES = LAYER_SITES + (CLASSIFIER,)
SITE_ORDER = {name: i for i, name in enumerate(SITE_NAMES)}


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    hidden_dim: int = 32
    heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 64
    max_seq_len: int = 16
    num_classes: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"model.{name}", f"must be a positive integer, got {value!r}")
        if self.hidden_dim % self.heads:
            raise ConfigError(
                "model.hidden_dim",
                f"{self.hidden_dim} is not divisible by heads={self.heads}",
            )
        if self.vocab_size < 3:
            raise ConfigError("model.vocab_size", "needs room for PAD, BOS and at least one token")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransformerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"model.{sorted(unknown)[0]}", "unknown field")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModuleSite:
    layer_index: int
    site_name: str
    weight_shape: tuple[int, int] | None
    bias_length: int

    @property
    def key(self) -> str:
        return site_key(self.layer_index, self.site_name)

    @property
    def order(self) -> tuple[int, int]:
        return (self.layer_index, SITE_ORDER[self.site_name])


def site_key(layer: int, name: str) -> str:
    return CLASSIFIER if name == CLASSIFIER else f"layers.{layer}.{name}"


def site_table(cfg: TransformerConfig) -> list[ModuleSite]:
    h, f = cfg.hidden_dim, cfg.ffn_dim
    shapes = {
        "attention.query": (h, h),
        "attention.key": (h, h),
        "attention.value": (h, h),
        "attention.output": (h, h),
        "ffn.intermediate": (f, h),
        "ffn.output": (h, f),
    }
    sites = []
    for layer in range(cfg.layers):
        for name in LINEAR_SITES:
            shape = shapes[name]
            sites.append(ModuleSite(layer, name, shape, shape[0]))
        for name in NORM_SITES:
            sites.append(ModuleSite(layer, name, None, h))
    sites.append(ModuleSite(-1, CLASSIFIER, (cfg.num_classes, h), cfg.num_classes))
    return sites


def build_model(cfg: TransformerConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded frozen parameters, keyed by ``<site key>.weight`` / ``.bias`` etc."""
    rng = np.random.default_rng(seed)
    h = cfg.hidden_dim
    params: dict[str, np.ndarray] = {
        "embeddings.token": rng.normal(0.0, 1.0, (cfg.vocab_size, h)),
        "embeddings.position": rng.normal(0.0, 1.0, (cfg.max_seq_len, h)),
    }
    for site in site_table(cfg):
        key = site.key
        if site.weight_shape is None:
            params[f"{key}.gain"] = 1.0 + rng.normal(0.0, 0.1, h)
            params[f"{key}.bias"] = rng.normal(0.0, 0.1, h)
        else:
            out_dim, in_dim = site.weight_shape
            params[f"{key}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(in_dim), (out_dim, in_dim))
            params[f"{key}.bias"] = rng.normal(0.0, 0.1, out_dim)
    return params


class Model:
    """Frozen base parameters plus a trainable classifier head and PET attachments."""

    def __init__(self, cfg: TransformerConfig, params: Mapping[str, np.ndarray]):
        self.cfg = cfg
        self.sites = {s.key: s for s in site_table(cfg)}
        self.params = {k: Tensor(v, name=k) for k, v in params.items()}
        self.head_weight = Tensor(params["classifier.weight"].copy(), requires_grad=True,
                                  name="classifier.weight")
        self.head_bias = Tensor(params["classifier.bias"].copy(), requires_grad=True,
                                name="classifier.bias")
        self.pets: PetSet | None = None

    @classmethod
    def create(cls, cfg: TransformerConfig, seed: int) -> "Model":
        return cls(cfg, build_model(cfg, seed))

    def head(self) -> list[Tensor]:
        return [self.head_weight, self.head_bias]

    def head_state(self) -> dict[str, np.ndarray]:
        return {"weight": self.head_weight.data.copy(), "bias": self.head_bias.data.copy()}

    def load_head(self, state: Mapping[str, np.ndarray]) -> None:
        self.head_weight.data = state["weight"].copy()
        self.head_bias.data = state["bias"].copy()

    def attach(self, pets: "PetSet") -> None:
        for pet in pets:
            site = self.sites.get(pet.site.key)
            if site is None or site != pet.site:
                raise AttachmentError(f"{pet.pet_id}: site {pet.site} does not exist in this model")
            if site.site_name == CLASSIFIER:
                raise AttachmentError("the classifier head is trained directly, not through PETs")
            pet.check_site(site)
        self.pets = pets

    def detach(self) -> None:
        self.pets = None

    def _bias_pet(self, key):
        return None if self.pets is None else self.pets.bias.get(key)

    def _lora_pet(self, key):
        return None if self.pets is None else self.pets.lora.get(key)

    def _linear(self, x: Tensor, key: str) -> Tensor:
        w = self.params[f"{key}.weight"]
        y = ad.matmul(x, Tensor(w.data.T))
        y = y + self.params[f"{key}.bias"]
        bias_pet = self._bias_pet(key)
        if bias_pet is not None:
            y = y + bias_pet.delta
        lora = self._lora_pet(key)
        if lora is not None:
            y = y + ad.matmul(ad.matmul(x, lora.V), ad.transpose(lora.U))
        return y

    def _norm(self, x: Tensor, key: str) -> Tensor:
        bias = self.params[f"{key}.bias"]
        bias_pet = self._bias_pet(key)
        if bias_pet is not None:
            bias = bias + bias_pet.delta
        return ad.layer_norm(x, self.params[f"{key}.gain"], bias)

    def _attention(self, x: Tensor, layer: int, pad: np.ndarray) -> Tensor:
        b, s, h = x.shape
        nh = self.cfg.heads
        dh = h // nh
        pre = f"layers.{layer}.attention"

        def heads(t):
            return ad.transpose(ad.reshape(t, (b, s, nh, dh)), (0, 2, 1, 3))

        q = heads(self._linear(x, f"{pre}.query"))
        k = heads(self._linear(x, f"{pre}.key"))
        v = heads(self._linear(x, f"{pre}.value"))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        scores = ad.add_constant(scores, np.where(pad, -1e9, 0.0)[:, None, None, :])
        ctx = ad.matmul(ad.softmax(scores), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, s, h))
        return self._linear(ctx, f"{pre}.output")

    def encode(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] > self.cfg.max_seq_len:
            raise InputError(f"token batch must be 2-D with length <= {self.cfg.max_seq_len}, "
                             f"got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise InputError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        s = tokens.shape[1]
        pad = tokens == PAD_ID
        x = ad.embedding(self.params["embeddings.token"], tokens)
        x = ad.add_constant(x, self.params["embeddings.position"].data[:s])
        for layer in range(self.cfg.layers):
            pre = f"layers.{layer}"
            x = self._norm(x + self._attention(x, layer, pad), f"{pre}.layernorm.attention")
            hidden = ad.gelu(self._linear(x, f"{pre}.ffn.intermediate"))
            x = self._norm(x + self._linear(hidden, f"{pre}.ffn.output"), f"{pre}.layernorm.ffn")
        return x

    def logits(self, tokens: np.ndarray) -> Tensor:
        x = self.encode(tokens)
        first = ad.take(x, (slice(None), 0))
        return ad.matmul(first, ad.transpose(self.head_weight)) + self.head_bias

    def forward(self, tokens: np.ndarray, labels=None) -> tuple[Tensor | None, Tensor]:
        """Return ``(loss, logits)``; ``loss`` is None when no labels are given."""
        logits = self.logits(tokens)
        loss = None if labels is None else ad.softmax_cross_entropy(logits, labels)
        return loss, logits

    def merged(self) -> "Model":
        """A PET-free model whose weights and biases absorb the attached updates."""
        params = {k: t.data.copy() for k, t in self.params.items()}
        if self.pets is not None:
            for key, pet in self.pets.bias.items():
                params[f"{key}.bias"] = params[f"{key}.bias"] + pet.effective_delta()
            for key, pet in self.pets.lora.items():
                params[f"{key}.weight"] = params[f"{key}.weight"] + pet.delta_weight()
        merged = Model(self.cfg, params)
        merged.load_head(self.head_state())
        return merged

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}


# Checkpoint layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header
# {"tensors": [{"name", "shape", "offset"}...]}, then raw little-endian float64 data.
_MAGIC = b"PETNAS01"


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    out = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return out
