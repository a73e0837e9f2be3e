"""Knowledge distillation of a teacher classifier into a LoRA/Soft-MoE student."""
from __future__ import annotations

import csv
import json
import math
import random
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .tinymodel import TinyConfig, TinyModel, build_model, count_trainable, save_model

METRIC_COLUMNS = ("step", "lr", "kl", "ce", "aux", "total", "eval_acc")


class MissingTeacherOutput(KeyError):
    def __init__(self, example_id: str):
        super().__init__(f"no teacher logits for example {example_id!r}")
        self.example_id = example_id


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    alpha: float = 0.5
    base_lr: float = 1e-4
    warmup_ratio: float = 0.1
    epochs: int = 5
    per_step_batch: int = 1
    accumulation_steps: int = 16
    eval_every: int = 100
    save_every: int = 100
    keep_checkpoints: int = 3
    seed: int = 0
    use_t2: bool = True
    optimizer: str = "sgd"
    weight_decay: float = 0.01
    max_steps: Optional[int] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.per_step_batch < 1 or self.accumulation_steps < 1 or self.epochs < 1:
            raise ValueError("batch size, accumulation steps and epochs must be positive")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError("optimizer must be 'sgd' or 'adamw'")

    @property
    def examples_per_step(self) -> int:
        return self.per_step_batch * self.accumulation_steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Example:
    example_id: str
    token_ids: tuple
    label: int


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.to(torch.float64)
    return torch.as_tensor(x, dtype=torch.float64)


def soft_targets(logits, temperature: float) -> torch.Tensor:
    """``softmax(logits / T)``, max-subtracted."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = _as_tensor(logits) / temperature
    if not torch.isfinite(z).all():
        raise ValueError("logits must be finite")
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def distill_terms(student_logits, teacher_logits, hard_label: int, cfg: DistillConfig) -> tuple:
    """``(KL(p_teacher || p_student) at temperature T, CE(raw student logits, label))``."""
    s = _as_tensor(student_logits)
    t = _as_tensor(teacher_logits).to(s.dtype)
    if s.shape != t.shape or s.dim() != 1:
        raise ValueError(f"student {tuple(s.shape)} and teacher {tuple(t.shape)} logits must be matching vectors")
    if not 0 <= hard_label < s.shape[0]:
        raise ValueError(f"label {hard_label} outside [0, {s.shape[0]})")
    T = cfg.temperature
    p_t = soft_targets(t, T)
    log_p_s = F.log_softmax(s / T, dim=-1)
    log_p_t = torch.log(p_t.clamp_min(torch.finfo(s.dtype).tiny))
    kl = torch.sum(p_t * (log_p_t - log_p_s))
    ce = -F.log_softmax(s, dim=-1)[hard_label]
    return kl, ce


def distill_loss(student_logits, teacher_logits, hard_label: int, cfg: DistillConfig) -> torch.Tensor:
    kl, ce = distill_terms(student_logits, teacher_logits, hard_label, cfg)
    scale = cfg.temperature ** 2 if cfg.use_t2 else 1.0
    return cfg.alpha * scale * kl + (1 - cfg.alpha) * ce


def warmup_steps(total_steps: int, cfg: DistillConfig) -> int:
    return math.ceil(cfg.warmup_ratio * total_steps)


def lr_at(step: int, total_steps: int, cfg: DistillConfig) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.base_lr * step / warm
    if total_steps == warm:
        return cfg.base_lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- teacher logits ---------------------------------------------------------

def teacher_logits(teacher: TinyModel, examples: Sequence[Example]) -> dict:
    was = teacher.training
    teacher.eval()
    out = {}
    with torch.no_grad():
        for ex in examples:
            out[ex.example_id] = [float(v) for v in teacher.classify(ex.token_ids)[0]]
    teacher.train(was)
    return out


def write_teacher_logits(store: Mapping[str, Sequence[float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for eid in sorted(store):
            fh.write(json.dumps({"example_id": eid, "logits": [float(v) for v in store[eid]]}, sort_keys=True))
            fh.write("\n")


def read_teacher_logits(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["example_id"])] = [float(v) for v in rec["logits"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad teacher-logit record ({exc})") from exc
    return out


# --- training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    steps: int
    metrics: list
    epoch_mean_loss: list
    checkpoints: list
    eval_accuracy: Optional[float] = None
    teacher_agreement: Optional[float] = None
    trainable: dict = field(default_factory=dict)


def _example_loss(model: TinyModel, ex: Example, t_logits, cfg: DistillConfig) -> tuple:
    logits, aux = model.classify(ex.token_ids)
    kl, ce = distill_terms(logits, torch.as_tensor(t_logits, dtype=logits.dtype), ex.label, cfg)
    scale = cfg.temperature ** 2 if cfg.use_t2 else 1.0
    total = cfg.alpha * scale * kl + (1 - cfg.alpha) * ce + aux
    return total, kl, ce, aux


def accumulate_gradients(model: TinyModel, group: Sequence[Example], store: Mapping, cfg: DistillConfig) -> dict:
    """Backpropagate the mean loss of ``group`` in micro-batches of ``cfg.per_step_batch``.

    Gradients are left in ``.grad``; returns summed loss components divided by
    the group size.
    """
    sums = {"kl": 0.0, "ce": 0.0, "aux": 0.0, "total": 0.0}
    n = len(group)
    for i in range(0, n, cfg.per_step_batch):
        micro = group[i:i + cfg.per_step_batch]
        loss = None
        for ex in micro:
            if ex.example_id not in store:
                raise MissingTeacherOutput(ex.example_id)
            total, kl, ce, aux = _example_loss(model, ex, store[ex.example_id], cfg)
            loss = total if loss is None else loss + total
            for k, v in (("kl", kl), ("ce", ce), ("aux", aux), ("total", total)):
                sums[k] += float(v.detach())
        (loss / n).backward()
    return {k: v / n for k, v in sums.items()}


def _sgd_step(params, lr: float) -> None:
    with torch.no_grad():
        for p in params:
            if p.grad is not None:
                p.sub_(lr * p.grad)


def _save_checkpoint(model: TinyModel, root: Path, step: int, lr: float, keep: int) -> Path:
    d = root / f"step-{step}"
    d.mkdir(parents=True, exist_ok=True)
    save_model(model, d / "model.tensors", {"step": step})
    (d / "state.json").write_text(json.dumps({"step": step, "lr": lr}, sort_keys=True) + "\n")
    existing = sorted((p for p in root.iterdir() if p.is_dir() and p.name.startswith("step-")),
                      key=lambda p: int(p.name.split("-", 1)[1]))
    for old in existing[:-keep] if keep > 0 else existing:
        shutil.rmtree(old)
    return d


def evaluate(model: TinyModel, examples: Sequence[Example], store: Optional[Mapping] = None) -> dict:
    """Accuracy against labels and, when teacher logits are given, argmax agreement."""
    was = model.training
    model.eval()
    correct = agree = 0
    with torch.no_grad():
        for ex in examples:
            pred = int(torch.argmax(model.classify(ex.token_ids)[0]))
            correct += pred == ex.label
            if store is not None:
                agree += pred == int(np.argmax(store[ex.example_id]))
    model.train(was)
    n = len(examples)
    return {"accuracy": correct / n if n else None,
            "teacher_agreement": (agree / n if n else None) if store is not None else None}


def total_steps_for(n_examples: int, cfg: DistillConfig) -> int:
    steps = cfg.epochs * math.ceil(n_examples / cfg.examples_per_step)
    return min(steps, cfg.max_steps) if cfg.max_steps is not None else steps


def train(student: TinyModel, teacher: Union[TinyModel, Mapping], train_set: Sequence[Example],
          cfg: DistillConfig, eval_set: Sequence[Example] = (), out_dir=None) -> TrainResult:
    """Distill ``teacher`` (a model or an ``{example_id: logits}`` store) into ``student``.

    One optimizer step per ``per_step_batch * accumulation_steps`` examples; the
    last group of an epoch may be smaller. Examples are reshuffled every epoch
    from ``cfg.seed``.
    """
    if not train_set:
        raise ValueError("empty training set")
    if isinstance(teacher, TinyModel):
        store = teacher_logits(teacher, list(train_set) + list(eval_set))
    else:
        store = teacher
    for ex in list(train_set) + list(eval_set):
        if ex.example_id not in store:
            raise MissingTeacherOutput(ex.example_id)

    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    params = [p for _, p in student.trainable_parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay) if cfg.optimizer == "adamw" else None
    total = total_steps_for(len(train_set), cfg)
    ckpt_root = Path(out_dir) / "ckpt" if out_dir is not None else None

    student.train()
    rows, epoch_means, ckpts = [], [], []
    step = 0
    order = list(range(len(train_set)))
    for _ in range(cfg.epochs):
        rng.shuffle(order)
        epoch_losses = []
        for g in range(0, len(order), cfg.examples_per_step):
            if step >= total:
                break
            group = [train_set[i] for i in order[g:g + cfg.examples_per_step]]
            lr = lr_at(step, total, cfg)
            for p in params:
                p.grad = None
            comps = accumulate_gradients(student, group, store, cfg)
            if opt is None:
                _sgd_step(params, lr)
            else:
                for pg in opt.param_groups:
                    pg["lr"] = lr
                opt.step()
            step += 1
            epoch_losses.append(comps["total"])
            eval_acc = None
            if eval_set and (step % cfg.eval_every == 0 or step == total):
                eval_acc = evaluate(student, eval_set)["accuracy"]
            rows.append({"step": step, "lr": lr, **comps, "eval_acc": eval_acc})
            if ckpt_root is not None and step % cfg.save_every == 0:
                ckpts.append(str(_save_checkpoint(student, ckpt_root, step, lr, cfg.keep_checkpoints)))
        if epoch_losses:
            epoch_means.append(sum(epoch_losses) / len(epoch_losses))

    result = TrainResult(step, rows, epoch_means, [], trainable=_trainable_summary(student))
    if ckpt_root is not None and ckpt_root.exists():
        result.checkpoints = sorted((p.name for p in ckpt_root.iterdir() if p.is_dir()),
                                    key=lambda n: int(n.split("-", 1)[1]))
    if eval_set:
        ev = evaluate(student, eval_set, store)
        result.eval_accuracy, result.teacher_agreement = ev["accuracy"], ev["teacher_agreement"]
    if out_dir is not None:
        write_metrics(rows, Path(out_dir) / "metrics.csv")
    return result


def _trainable_summary(model: TinyModel) -> dict:
    c = count_trainable(model)
    return {"trainable": c["trainable"], "total": c["total"], "fraction": c["fraction"]}


def write_metrics(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in METRIC_COLUMNS})


# --- teacher pre-training (phase-1 stand-in) -------------------------------

def train_classifier(model: TinyModel, examples: Sequence[Example], epochs: int = 5, lr: float = 1e-3,
                     seed: int = 0, batch: int = 16) -> list:
    """Plain supervised fit of the classification head plus adapters; returns epoch-mean losses."""
    torch.manual_seed(seed)
    rng = random.Random(seed)
    params = [p for _, p in model.trainable_parameters()]
    opt = torch.optim.AdamW(params, lr=lr)
    model.train()
    order = list(range(len(examples)))
    means = []
    for _ in range(epochs):
        rng.shuffle(order)
        losses = []
        for g in range(0, len(order), batch):
            opt.zero_grad()
            group = [examples[i] for i in order[g:g + batch]]
            loss = 0.0
            for ex in group:
                logits, aux = model.classify(ex.token_ids)
                loss = loss + F.cross_entropy(logits.unsqueeze(0), torch.tensor([ex.label])) + aux
            loss = loss / len(group)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        means.append(sum(losses) / len(losses))
    model.eval()
    return means


# --- toy data ----------------------------------------------------------------

def byte_tokenize(text: str, max_len: int, vocab_size: int = 256) -> tuple:
    """UTF-8 bytes folded into ``vocab_size``; keeps the last ``max_len`` tokens."""
    ids = [b % vocab_size for b in text.encode("utf-8")] or [0]
    return tuple(ids[-max_len:])


def toy_separable_dataset(n: int, vocab_size: int = 32, seed: int = 0, min_len: int = 6,
                          max_len: int = 12, signal: float = 0.7) -> list:
    """Two classes of token sequences, each biased towards its own small token set."""
    rng = np.random.default_rng(seed)
    k = max(2, vocab_size // 8)
    pools = (np.arange(0, k), np.arange(vocab_size - k, vocab_size))
    out = []
    for i in range(n):
        label = int(rng.integers(2))
        length = int(rng.integers(min_len, max_len + 1))
        biased = rng.random(length) < signal
        ids = np.where(biased, rng.choice(pools[label], size=length), rng.integers(0, vocab_size, size=length))
        out.append(Example(f"toy-{i:05d}", tuple(int(v) for v in ids), label))
    return out


def split_examples(examples: Sequence[Example], eval_fraction: float = 0.2) -> tuple:
    n_eval = int(round(len(examples) * eval_fraction))
    return list(examples[n_eval:]), list(examples[:n_eval])


def toy_run(seed: int = 0, n: int = 400, cfg: Optional[DistillConfig] = None,
            model_cfg: Optional[TinyConfig] = None, teacher_epochs: int = 5, out_dir=None) -> tuple:
    """Teacher fit then distillation on the toy task. Returns ``(result, student, teacher, store)``."""
    model_cfg = model_cfg or TinyConfig(vocab_size=32, d_model=16, n_heads=2, n_layers=2, max_seq=16,
                                        expert_hidden=16, seed=seed)
    cfg = cfg or DistillConfig(seed=seed, optimizer="adamw", base_lr=1e-3)
    data = toy_separable_dataset(n, model_cfg.vocab_size, seed=seed, max_len=model_cfg.max_seq)
    train_set, eval_set = split_examples(data)
    teacher = build_model(TinyConfig(**{**model_cfg.to_dict(), "seed": seed + 1}))
    train_classifier(teacher, train_set, epochs=teacher_epochs, seed=seed)
    store = teacher_logits(teacher, data)
    student = build_model(model_cfg)
    result = train(student, store, train_set, cfg, eval_set, out_dir)
    return result, student, teacher, store
