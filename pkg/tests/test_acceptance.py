"""One test per acceptance criterion, each at its stated tolerance and time budget."""
import json
import os
import subprocess
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from sessionlab import bench
from sessionlab.bench import PUBLISHED_TABLE, counts_from_row, metrics
from sessionlab.dataset import build_foundation, chinchilla_plan, rebalance
from sessionlab.distill import DistillConfig, read_teacher_logits, toy_run, toy_separable_dataset, train
from sessionlab.model import LogEntry, load_sessions
from sessionlab.sessionizer import sessionize
from sessionlab.tinymodel import (LoRALinear, SoftMoE, TinyConfig, aux_loss_from_gates, build_model, count_trainable,
                                  forward, gradient_check, load_model, randomize_adapters)

FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
# two layers, four experts, LoRA on Q/K/V/O; narrow so five full checks fit the time budget
GRADCHECK_MODEL = dict(vocab_size=32, d_model=16, n_heads=2, n_layers=2, max_seq=16, expert_hidden=16)


@pytest.fixture
def criterion(record_property):
    def tag(name):
        record_property("criterion", name)
    return tag


def test_c01_published_table_arithmetic(criterion):
    criterion("1. published sweep table accuracy to 4 dp")
    t0 = time.perf_counter()
    for pct, n_att, n_norm, acc, pred_norm, pred_att, tp in PUBLISHED_TABLE:
        counts = counts_from_row(n_att, n_norm, pred_att, tp)
        assert counts.tn + counts.fn == pred_norm
        assert round(metrics(counts)["accuracy"], 4) == acc, pct
    assert [r[3] for r in PUBLISHED_TABLE] == [0.9949, 0.7944, 0.5978, 0.3972, 0.1981, 0.3418]
    assert time.perf_counter() - t0 < 1.0


def test_c02_always_normal_sweep(criterion):
    criterion("2. always-normal sweep accuracy = 1 - f, tp = 0, 10 seeds")
    t0 = time.perf_counter()
    attacks, normals = bench.synthetic_pools()
    for seed in range(10):
        points = bench.sweep(bench.always_normal, attacks, normals, 10_000, FRACTIONS, seed=seed)
        for f, p in zip(FRACTIONS, points):
            assert p.n_attacks + p.n_normal == 10_000
            assert p.accuracy == p.n_normal / 10_000
            assert abs(p.accuracy - (1 - f)) <= 1e-12
            assert p.counts.tp == 0
    assert time.perf_counter() - t0 < 10.0


def test_c03_miscalibrated_threshold_shape(criterion):
    criterion("3. miscalibrated threshold: tp = 0 at f <= 0.4, tp > 0 at f = 1.0")
    points = bench.miscalibration_sweep()
    assert [p.attack_fraction for p in points] == list(FRACTIONS)
    assert all(p.counts.tp == 0 for p in points if p.attack_fraction <= 0.4)
    assert points[-1].counts.tp > 0


def test_c04_sessionizer_matches_oracle(criterion):
    criterion("4. sessionizer equals brute-force oracle on 100 streams")
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for seed in range(100):
        n = int(rng.integers(1_000, 10_001))
        keys = int(rng.integers(20, 50))
        stream = oracles.random_stream(seed, n, keys)
        got = [list(s.entries) for s in sessionize(stream)]
        assert got == oracles.brute_force_sessions(stream), seed
    # a gap of exactly 300 s starts a new session; anything shorter does not
    at_gap = sessionize([oracles.entry(0), oracles.entry(300)])
    under = sessionize([oracles.entry(0), oracles.entry(299.999999)])
    assert [len(s.entries) for s in at_gap] == [1, 1]
    assert [len(s.entries) for s in under] == [2]
    assert time.perf_counter() - t0 < 30.0


def test_c05_rebalance(criterion):
    criterion("5. rebalance 100/10000 to 0.35 keeping all anomalies; foundation untouched")
    sessions = oracles.make_sessions(100, 10_000)
    manifest, kept = rebalance(sessions, 0.35, seed=0)
    ids = [s.session_id for s in kept]
    assert len(ids) == len(set(ids))
    anomalous = {s.session_id for s in sessions if s.is_anomalous}
    assert anomalous <= set(ids)
    value = sum(s.is_anomalous for s in kept) / len(kept)
    assert 0.34 <= value <= 0.36 and manifest.achieved_prevalence["value"] == value
    foundation = build_foundation(sessions, seed=0)
    assert foundation.achieved_prevalence["value"] == 100 / 10_100
    assert (foundation.achieved_prevalence["anomalous"], foundation.achieved_prevalence["total"]) == (100, 10_100)


def test_c06_chinchilla_ratio(criterion):
    criterion("6. tokens per trainable parameter in [51.5, 51.7]")
    ratio = chinchilla_plan(29.9e6, 1.544e9)["ratio"]
    assert 51.5 <= ratio <= 51.7


def test_c07_gradient_check(criterion):
    criterion("7. analytic vs central-difference gradients < 1e-4 on 5 seeds")
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        model = build_model(TinyConfig(**GRADCHECK_MODEL, seed=seed))
        assert model.cfg.n_layers == 2 and model.cfg.n_experts == 4 and model.cfg.dtype == "float64"
        randomize_adapters(model, 0.1, seed=seed)
        ids = torch.randint(0, 32, (8,), generator=torch.Generator().manual_seed(seed)).tolist()
        report = gradient_check(model, [ids, (ids, seed % 2)], eps=1e-5)
        assert report["n_checked"] == count_trainable(model)["trainable"]
        worst = max(worst, report["max_relative_error"])
    assert worst < 1e-4
    assert time.perf_counter() - t0 < 120.0


def test_c08_moe_aux_loss(criterion):
    criterion("8. soft-MoE aux loss: uniform = lambda, one-hot = lambda * E, bounded")
    lam, experts = 0.01, 4
    uniform = torch.full((10, experts), 1 / experts, dtype=torch.float64)
    assert aux_loss_from_gates(uniform, lam).item() == lam
    one_hot = torch.zeros(10, experts, dtype=torch.float64)
    one_hot[:, 2] = 1.0
    assert aux_loss_from_gates(one_hot, lam).item() == lam * experts
    block = SoftMoE(8, experts, 8, lam, torch.Generator().manual_seed(0))
    for seed in range(50):
        x = torch.randn(12, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)) * (1 + seed)
        aux = block(x)[1].item()
        assert lam - 1e-12 <= aux <= lam * experts + 1e-12


def test_c09_lora_identity_at_init(criterion):
    criterion("9. LoRA-adapted logits equal frozen base at init; scale 2.0")
    ids = list(range(1, 120, 7))
    adapted = build_model(TinyConfig(seed=3)).eval()
    base = build_model(TinyConfig(seed=3, lora_rank=0)).eval()
    assert torch.max(torch.abs(forward(adapted, ids) - forward(base, ids))).item() <= 1e-12
    assert LoRALinear(64, 64, 16, 32.0, 0.1, torch.Generator().manual_seed(0)).scale == 2.0


SMALL_TRAIN = dict(vocab_size=32, d_model=16, n_heads=2, n_layers=1, max_seq=16, expert_hidden=16)


def test_c10_distillation_loop(criterion, tmp_path):
    criterion("10. accumulation equivalence, 3 checkpoints kept, toy agreement >= 0.9")
    data = toy_separable_dataset(16, 32, seed=0)
    rng = np.random.default_rng(0)
    store = {ex.example_id: rng.normal(size=2).tolist() for ex in data}
    deltas = []
    for per_step, accum in ((1, 16), (16, 1)):
        model = build_model(TinyConfig(**SMALL_TRAIN, seed=1))
        before = {n: p.detach().clone() for n, p in model.trainable_parameters()}
        cfg = DistillConfig(per_step_batch=per_step, accumulation_steps=accum, warmup_ratio=0.0, epochs=1,
                            base_lr=0.05, optimizer="sgd")
        train(model, store, data, cfg)
        deltas.append({n: p.detach() - before[n] for n, p in model.trainable_parameters()})
    for n in deltas[0]:
        assert torch.max(torch.abs(deltas[0][n] - deltas[1][n])).item() <= 1e-10

    data = toy_separable_dataset(320, 32, seed=1)
    store = {ex.example_id: rng.normal(size=2).tolist() for ex in data}
    cfg = DistillConfig(accumulation_steps=1, epochs=1, base_lr=1e-3)
    result = train(build_model(TinyConfig(**SMALL_TRAIN)), store, data, cfg, out_dir=tmp_path)
    assert result.steps >= 300
    assert len([p for p in (tmp_path / "ckpt").iterdir() if p.is_dir()]) == 3

    toy = toy_run(seed=0)[0]
    assert toy.teacher_agreement >= 0.90


PIPELINE = (
    ("gen", "--out", "gen"),
    ("parse", "--input", "gen", "--out", "parsed"),
    ("sessionize", "--input", "parsed", "--out", "sessions"),
    ("build-defense", "--input", "sessions", "--out", "defense"),
    ("train-distill", "--input", "defense", "--out", "distill"),
    ("bench", "--classifier", "always-normal", "--input", "sessions", "--total", "200", "--out", "bench"),
)


def _demo_seed() -> int:
    return json.loads(resources.files("sessionlab.data").joinpath("demo_testbed.json").read_text())["seed"]


def _pipeline_script() -> str:
    lines = ["set -e"]
    for stage in PIPELINE:
        cmd = [sys.executable, "-m", "sessionlab.cli", "--seed", str(_demo_seed()), *stage]
        lines.append(" ".join(cmd) + " > /dev/null")
    return "\n".join(lines)


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _check_schemas(root: Path) -> None:
    for line in open(root / "parsed" / "entries.jsonl"):
        LogEntry.from_dict(json.loads(line))
    sessions = load_sessions(root / "sessions" / "sessions.jsonl")
    assert sessions
    for split in ("train", "val"):
        assert load_sessions(root / "defense" / f"sessions_{split}.jsonl")
        for line in open(root / "defense" / f"pairs_{split}.jsonl"):
            assert set(json.loads(line)) == {"prompt", "response"}
    manifest = json.loads((root / "defense" / "manifest.json").read_text())
    assert abs(manifest["achieved_prevalence"]["value"] - 0.35) <= 0.01
    assert read_teacher_logits(root / "distill" / "teacher_logits.jsonl")
    load_model(root / "distill" / "student.tensors")
    assert len(list((root / "distill" / "ckpt").iterdir())) <= 3
    assert bench.read_csv(root / "bench" / "sweep.csv")
    for stage in ("gen", "parsed", "sessions", "defense", "distill", "bench"):
        run = json.loads((root / stage / "run.json").read_text())
        assert run["seed"] == _demo_seed() and run["command"]


def test_c11_end_to_end_smoke(criterion, tmp_path):
    criterion("11. full CLI pipeline under 10 min, schema-valid, byte-reproducible")
    runs = [tmp_path / "a", tmp_path / "b"]
    env = dict(os.environ, PYTHONHASHSEED="0")
    procs = []
    for root in runs:
        root.mkdir()
        procs.append((time.perf_counter(), subprocess.Popen(["bash", "-c", _pipeline_script()], cwd=root, env=env,
                                                             stderr=subprocess.PIPE, text=True)))
    for t0, proc in procs:
        _, err = proc.communicate(timeout=900)
        assert proc.returncode == 0, err
        assert time.perf_counter() - t0 < 600
    lines = sum(1 for p in (runs[0] / "gen").rglob("*.log") for _ in open(p, errors="replace"))
    assert 50_000 <= lines <= 200_000
    _check_schemas(runs[0])
    a, b = _tree(runs[0]), _tree(runs[1])
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
