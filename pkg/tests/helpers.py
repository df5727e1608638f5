"""Linear-probe experiments shared by the PET tests and the acceptance suite."""

import numpy as np

from petnas import autodiff as ad
from petnas.autodiff import Tensor
from petnas.model import ModuleSite
from petnas.pet import LoRAUpdate, init_lora_balanced, init_lora_original


ACCEPTANCE_LINES: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> bool:
    """Log one acceptance verdict; the conftest hook prints these after the run."""
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def probe_site(out_dim=16, in_dim=64):
    return ModuleSite(0, "attention.query", (out_dim, in_dim), out_dim)


def lora_probe_forward(upd, w, x):
    """y = W x + U (V^T x) for a batch of row vectors x."""
    return ad.add(x @ Tensor(w.T), ad.matmul(ad.matmul(x, upd.V), ad.transpose(upd.U)))


def balanced_grad_ratio(trials=10_000, out_dim=16, in_dim=64, rank=4, seed=0):
    """Monte-Carlo E[g_U^2] / E[g_V^2] under balanced init, isotropic input and readout."""
    rng = np.random.default_rng(seed)
    site = probe_site(out_dim, in_dim)
    su = sv = 0.0
    w = rng.normal(0, 1 / np.sqrt(in_dim), (out_dim, in_dim))
    for _ in range(trials):
        upd = LoRAUpdate(site, rank)
        init_lora_balanced(upd, rng)
        x = Tensor(rng.normal(size=(1, in_dim)))
        readout = Tensor(rng.normal(size=(1, out_dim)))
        loss = ad.sum_all(ad.mul(lora_probe_forward(upd, w, x), readout))
        ad.backward(loss)
        su += np.mean(upd.U.grad ** 2)
        sv += np.mean(upd.V.grad ** 2)
    return su / sv


def train_probe(init, steps=100, out_dim=16, in_dim=64, rank=4, lr=0.05, seed=0):
    """Plain SGD on a random linear regression; returns the trained LoRAUpdate."""
    rng = np.random.default_rng(seed)
    upd = LoRAUpdate(probe_site(out_dim, in_dim), rank)
    init(upd, rng)
    w = rng.normal(0, 1 / np.sqrt(in_dim), (out_dim, in_dim))
    teacher = w + rng.normal(0, 1 / np.sqrt(in_dim), (out_dim, in_dim))
    for _ in range(steps):
        x = rng.normal(size=(16, in_dim))
        target = Tensor(x @ teacher.T)
        err = ad.add(lora_probe_forward(upd, w, Tensor(x)), ad.scale(target, -1.0))
        loss = ad.scale(ad.mean_all(ad.mul(err, err)), 0.5)
        upd.U.grad = upd.V.grad = None
        ad.backward(loss)
        upd.U.data = upd.U.data - lr * upd.U.grad
        upd.V.data = upd.V.data - lr * upd.V.grad
    return upd


__all__ = ["record", "balanced_grad_ratio", "train_probe", "init_lora_original", "probe_site"]
