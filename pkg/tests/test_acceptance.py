"""End-to-end acceptance checks. Each test logs one PASS/FAIL line via ``record``."""

import itertools
import json
import statistics
import time

import numpy as np
import pytest

from petnas import autodiff as ad
from petnas.cli import main
from petnas.config import RunConfig
from petnas.criterion import AVERAGED, BIAS_ENTRY, LAST_STEP, CriterionAccumulator, PruneOp
from petnas.model import BOS_ID, LINEAR_SITES, PAD_ID, Model, TransformerConfig, site_table
from petnas.pet import build_pets
from petnas.pipeline import (
    architecture_map,
    base_params,
    init_pets,
    load_splits,
    prune_to_budget,
    run_baseline,
    run_nas,
    run_nas_modes,
)
from petnas.train import TrainConfig, evaluate, train

from .conftest import central_diff, rel_err
from .helpers import balanced_grad_ratio, init_lora_original, record, train_probe

CFG = TransformerConfig()
SEEDS = (0, 1, 2, 3, 4)

# Desk-scale experiment settings shared by the trend and halving checks.
DESK = {
    "train": {"epochs": 20, "batch_size": 16, "peak_lr": 0.03},
    "seeds": list(SEEDS),
}


def random_batch(rng, batch, cfg=CFG):
    toks = rng.integers(2, cfg.vocab_size, (batch, cfg.max_seq_len))
    toks[:, 0] = BOS_ID
    for row in toks:
        row[rng.integers(cfg.max_seq_len // 2, cfg.max_seq_len + 1):] = PAD_ID
    return toks, rng.integers(0, cfg.num_classes, batch)


def attached_model(rng, lora_sites=("attention.query", "attention.value"), rank=16):
    sites = site_table(CFG)
    bias_at = [(s.layer_index, s.site_name) for s in sites if s.layer_index >= 0]
    lora_at = [(layer, name) for layer in range(CFG.layers) for name in lora_sites]
    pets = build_pets(sites, bias_at, lora_at, bias_structured=False, lora_structured=False,
                      rank=rank, lora_init="balanced", rng=rng)
    for pet in pets:
        for t in pet.tensors():
            if not t.data.any():
                t.data = rng.normal(0.0, 0.1, t.shape)
    model = Model.create(CFG, seed=0)
    model.attach(pets)
    return model, pets


def test_criterion_1_gradient_check():
    rng = np.random.default_rng(11)
    model, pets = attached_model(rng)
    params = pets.parameters() + model.head()
    start = time.perf_counter()
    worst = 0.0
    for _ in range(3):
        toks, labels = random_batch(rng, 4)
        for p in params:
            p.grad = None
        loss, _ = model.forward(toks, labels)
        ad.backward(loss)
        analytic = [p.grad.copy() for p in params]

        def f():
            with ad.no_grad():
                return model.forward(toks, labels)[0].item()

        numeric = central_diff(f, [p.data for p in params], h=1e-5)
        worst = max(worst, max(float(rel_err(a, n).max()) for a, n in zip(analytic, numeric)))
    elapsed = time.perf_counter() - start
    count = sum(p.data.size for p in params)
    ok = worst < 1e-4 and elapsed < 120
    record(1, "gradient check", ok,
           f"{count} parameters x 3 batches, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_merge_matches_unmerged():
    rng = np.random.default_rng(12)
    model, pets = attached_model(rng, lora_sites=LINEAR_SITES, rank=4)
    for pet in pets:
        for m in pet.masks():
            m &= rng.random(m.shape) > 0.3
    pets.apply_masks()
    merged = model.merged()
    toks, _ = random_batch(rng, 100)
    with ad.no_grad():
        a = model.logits(toks).data
        b = merged.logits(toks).data
    diff = float(np.abs(a - b).max())
    ok = diff <= 1e-10
    record(2, "merge equivalence", ok, f"max |logit diff| {diff:.2e} over 100 inputs")
    assert ok


def test_criterion_3_balanced_init():
    ratio = balanced_grad_ratio(trials=10_000)
    upd = train_probe(init_lora_original, steps=100)
    mu, mv = float(np.abs(upd.U.data).mean()), float(np.abs(upd.V.data).mean())
    ok = 0.8 <= ratio <= 1.25 and mu < mv
    record(3, "balanced init", ok,
           f"E[gU^2]/E[gV^2] = {ratio:.3f}; original init after 100 steps mean|U| {mu:.4f} "
           f"vs mean|V| {mv:.4f}")
    assert ok


def test_criterion_4_criterion_fidelity():
    rng = np.random.default_rng(14)
    config = RunConfig.from_dict({
        "task": {"kind": "presence", "train_size": 256, "val_size": 32, "seed": 0},
        "search_space": {"bias": {"sites": "all"},
                         "lora": {"sites": ["attention.query", "ffn.intermediate"], "rank": 4}},
    })
    splits = load_splits(config)
    model = Model(config.model, base_params(config))
    pets = init_pets(config, 0)
    for pet in pets:
        for t in pet.tensors():
            t.data = rng.uniform(-1e-2, 1e-2, t.shape)
    acc = CriterionAccumulator(pets)
    train(model, pets, splits.train, TrainConfig(epochs=1, batch_size=16, peak_lr=1e-7), 0, acc)
    scores = acc.values(AVERAGED)
    base_loss = evaluate(model, splits.train).loss
    entries = [(pet.pet_id, k, i) for pet in pets for k, t in enumerate(pet.tensors())
               for i in range(t.data.size)]
    predicted, actual = [], []
    for j in rng.choice(len(entries), 50, replace=False):
        pet_id, k, i = entries[j]
        t = pets.get(pet_id).tensors()[k]
        old = t.data.reshape(-1)[i]
        t.data.reshape(-1)[i] = 0.0
        actual.append(evaluate(model, splits.train).loss - base_loss)
        t.data.reshape(-1)[i] = old
        predicted.append(scores[pet_id][k].reshape(-1)[i])
    r = float(np.corrcoef(predicted, actual)[0, 1])
    ok = r >= 0.8
    record(4, "criterion fidelity", ok, f"Pearson r = {r:.4f} over 50 single-parameter prunes")
    assert ok


def brute_force_prefix(ops, total, budget):
    """Smallest k such that removing the k lowest-ranked ops reaches the budget."""
    ranked = sorted(ops, key=lambda o: (o.score, o.layer, o.index))
    if total <= budget:
        return []
    for k in range(1, len(ranked) + 1):
        if total - sum(o.param_count for o in ranked[:k]) <= budget:
            return ranked[:k]
    return ranked


def test_criterion_5_pruner_oracle():
    rng = np.random.default_rng(15)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(0, 21))
        # Coarse scores force frequent ties so the tie-break is exercised.
        ops = [PruneOp(BIAS_ENTRY, "x", int(rng.integers(0, 2)), "attention.query", "", i,
                       int(rng.integers(1, 10)), float(rng.integers(-3, 4)))
               for i in range(n)]
        total = sum(o.param_count for o in ops) + int(rng.integers(0, 5))
        budget = int(rng.integers(0, total + 2))
        applied, count = prune_to_budget(ops, total, budget)
        expected = brute_force_prefix(ops, total, budget)
        if applied != expected or count != total - sum(o.param_count for o in expected):
            mismatches += 1
    ok = mismatches == 0
    record(5, "greedy pruner oracle", ok, f"{mismatches} mismatches in 1000 random trials")
    assert ok


def test_criterion_6_lottery_ticket():
    config = RunConfig.from_dict({
        "task": {"kind": "presence", "train_size": 128, "val_size": 32, "seed": 0},
        "search_space": {"bias": {"sites": "all"},
                         "lora": {"sites": ["attention.query", "ffn.output"], "rank": 4}},
        "budget_fraction": 0.3,
        "train": {"epochs": 3, "peak_lr": 0.03},
    })
    violations, steps = 0, 0

    def on_step(step, pets):
        nonlocal violations, steps
        steps += 1
        for pet in pets:
            for t, m in zip(pet.tensors(), pet.masks()):
                violations += int(np.count_nonzero(t.data[~m]))

    bitwise = True
    for seed in (0, 1):
        res = run_nas(config, seed, on_retrain_step=on_step)
        masks = res.spec.masks()
        for pet_id, start in res.retrain_start_values.items():
            for value, init, m in zip(start, res.initial_values[pet_id], masks[pet_id]):
                bitwise &= np.array_equal(value[m], init[m]) and not value[~m].any()
    ok = bitwise and violations == 0 and steps > 0
    record(6, "lottery-ticket restoration", ok,
           f"survivors bitwise equal at step 0: {bitwise}; nonzero pruned entries over "
           f"{steps} retrain steps: {violations}")
    assert ok


def _desk_config(kind, structured, **extra):
    return RunConfig.from_dict({
        **DESK,
        "task": {"kind": kind, "train_size": 512, "val_size": 256, "seed": 0},
        "search_space": {"bias": {"sites": "all", "structured": structured}},
        "budget_fraction": 0.25,
        **extra,
    })


def test_criterion_7_trend():
    start = time.perf_counter()
    verdicts, specs, table = [], [], []
    for kind in ("presence", "order"):
        cfg = _desk_config(kind, False)
        scfg = _desk_config(kind, True)
        params, splits = base_params(cfg), load_splits(cfg)
        acc = {k: [] for k in ("averaged", "last_step", "random", "structured")}
        for seed in SEEDS:
            modes = run_nas_modes(cfg, seed, (AVERAGED, LAST_STEP), params=params, splits=splits)
            acc["averaged"].append(modes[AVERAGED].validation.accuracy)
            acc["last_step"].append(modes[LAST_STEP].validation.accuracy)
            specs.append(modes[AVERAGED].spec)
            rnd = run_baseline(cfg, "random_mask", seed, params=params, splits=splits)
            acc["random"].append(rnd.validation.accuracy)
            acc["structured"].append(run_nas(scfg, seed, params=params, splits=splits).validation.accuracy)
        med = {k: statistics.median(v) for k, v in acc.items()}
        table.append(f"{kind}: " + " ".join(f"{k}={v:.4f}" for k, v in med.items()))
        verdicts += [
            (f"{kind} averaged>=random", med["averaged"] >= med["random"]),
            (f"{kind} averaged>=last_step", med["averaged"] >= med["last_step"]),
            (f"{kind} unstructured>=structured", med["averaged"] >= med["structured"]),
        ]
    rows = architecture_map(specs)
    map_ok = len(rows) == CFG.layers * 8 and all(0.0 <= r["fraction_kept"] <= 1.0 for r in rows)
    elapsed = time.perf_counter() - start
    failed = [name for name, good in verdicts if not good]
    ok = not failed and map_ok and elapsed < 1800
    detail = "; ".join(table) + f"; {elapsed:.0f}s"
    if failed:
        detail += "; failed: " + ", ".join(failed)
    record(7, "trend reproduction", ok, detail)
    assert ok


def test_criterion_8_halving():
    sites = ["attention.query", "attention.key", "ffn.intermediate", "ffn.output"]
    cfg = RunConfig.from_dict({
        **DESK,
        "task": {"kind": "presence", "train_size": 512, "val_size": 256, "seed": 0},
        "search_space": {"bias": {"sites": "all"}, "lora": {"sites": sites, "rank": 16}},
        "budget_fraction": 0.5,
    })
    params, splits = base_params(cfg), load_splits(cfg)
    pruned, full, within = [], [], True
    for seed in SEEDS:
        res = run_nas(cfg, seed, params=params, splits=splits)
        within &= res.spec.param_count <= cfg.resolved_budget()
        pruned.append(res.validation.accuracy)
        full.append(run_baseline(cfg, "full", seed, params=params, splits=splits).validation.accuracy)
    gap = statistics.median(full) - statistics.median(pruned)
    ok = within and abs(gap) <= 0.05
    record(8, "halving", ok,
           f"{cfg.initial_param_count()} -> budget {cfg.resolved_budget()}, count<=budget: {within}; "
           f"median acc pruned {statistics.median(pruned):.4f} vs unpruned {statistics.median(full):.4f}")
    assert ok


def test_criterion_9_determinism(tmp_path):
    config = {
        "task": {"kind": "order", "train_size": 64, "val_size": 32, "seed": 3},
        "search_space": {"bias": {"sites": "all"}, "lora": {"sites": ["attention.value"], "rank": 2}},
        "budget_fraction": 0.4,
        "train": {"epochs": 2, "peak_lr": 0.03},
        "seeds": [0, 1],
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["search", "--config", str(path), "--out", str(out)]) == 0

    def contents(out):
        files = {}
        for p in sorted(out.iterdir()):
            if p.name.startswith("spec_"):
                d = json.loads(p.read_text())
                d.pop("timings")
                files[p.name] = json.dumps(d, sort_keys=True)
            else:
                files[p.name] = p.read_bytes()
        return files

    a, b = contents(outs[0]), contents(outs[1])
    raw_equal = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
                    for n in a if not n.startswith("spec_"))
    ok = a == b and raw_equal
    record(9, "determinism", ok, f"{len(a)} output files compared, identical: {ok}")
    assert ok
