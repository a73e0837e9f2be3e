"""Foundation and defense dataset materialization, instruction pairs and statistics."""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .model import AttackTag, Label, Session, format_ts
from .sessionizer import prevalence

TRAIN_FRACTION = 0.9
DEFAULT_TARGET = 0.35
DEFAULT_TOLERANCE = 0.01
GRADES = ("CRITICAL", "HIGH", "MEDIUM", "LOW")
PART_HEADERS = ("### 1. Activity Summary", "### 2. Anomalous Patterns",
                "### 3. Risk Assessment", "### 4. Recommended Remediation")


class InfeasibleRebalance(ValueError):
    def __init__(self, message: str, min_achievable: float, max_achievable: float):
        super().__init__(message)
        self.min_achievable = min_achievable
        self.max_achievable = max_achievable


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson product-moment correlation."""
    if len(xs) != len(ys):
        raise ValueError("inputs must have equal length")
    if len(xs) < 2:
        raise ValueError("need at least two points")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation is undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def chinchilla_plan(trainable_params: float, tokens: float) -> dict:
    """Tokens-per-parameter ratio and the 20:1 compute-optimal token budget."""
    if trainable_params <= 0 or tokens <= 0:
        raise ValueError("parameter and token counts must be positive")
    ratio = tokens / trainable_params
    return {
        "trainable_params": trainable_params,
        "tokens": tokens,
        "ratio": ratio,
        "compute_optimal_tokens_at_20_per_param": 20 * trainable_params,
        "regime": "data-rich" if ratio > 20 else "compute-optimal or under-trained",
    }


@dataclass
class StatsReport:
    session_count: int
    hour_histogram: list
    weekday_share: float
    weekend_share: float
    duration_median: float
    duration_q1: float
    duration_q3: float
    logs_per_session: dict
    duration_logcount_pearson: Optional[float]
    per_host_sessions: dict
    prevalence: dict
    log_prevalence: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def compute_stats(sessions: Sequence[Session]) -> StatsReport:
    if not sessions:
        raise ValueError("statistics need at least one session")
    n = len(sessions)
    hours = [0] * 24
    weekend = 0
    per_host: dict = {}
    for s in sessions:
        hours[s.meta.hour] += 1
        weekend += s.meta.is_weekend
        per_host[s.meta.host] = per_host.get(s.meta.host, 0) + 1
    durations = np.array([s.meta.duration_seconds for s in sessions], dtype=np.float64)
    counts = np.array([len(s.entries) for s in sessions], dtype=np.float64)
    try:
        r: Optional[float] = pearson(durations, counts)
    except ValueError:
        r = None
    q1, med, q3 = (float(v) for v in np.percentile(durations, [25, 50, 75]))
    c1, cmed, c3 = (float(v) for v in np.percentile(counts, [25, 50, 75]))
    attack_logs = int(sum(len(s.entries) for s in sessions if s.is_anomalous))
    total_logs = int(counts.sum())
    return StatsReport(
        session_count=n,
        hour_histogram=hours,
        weekday_share=(n - weekend) / n,
        weekend_share=weekend / n,
        duration_median=med,
        duration_q1=q1,
        duration_q3=q3,
        logs_per_session={"min": int(counts.min()), "q1": c1, "median": cmed, "q3": c3,
                          "max": int(counts.max()), "mean": float(counts.mean())},
        duration_logcount_pearson=r,
        per_host_sessions=dict(sorted(per_host.items())),
        prevalence=prevalence(sessions).to_dict(),
        log_prevalence={"attack_associated": attack_logs, "normal": total_logs - attack_logs,
                        "value": attack_logs / total_logs},
    )


@dataclass
class DatasetManifest:
    kind: str
    seed: int
    splits: list  # [{"session_id", "split", "label"}] in dataset order
    achieved_prevalence: dict
    stats: StatsReport
    target_prevalence: Optional[float] = None
    tolerance: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def split_ids(self, split: str) -> list:
        return [r["session_id"] for r in self.splits if r["split"] == split]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "target_prevalence": self.target_prevalence,
            "tolerance": self.tolerance,
            "achieved_prevalence": self.achieved_prevalence,
            "split_counts": {s: len(self.split_ids(s)) for s in ("train", "val")},
            "splits": self.splits,
            "stats": self.stats.to_dict(),
            **self.extra,
        }


def _n_train(n: int) -> int:
    return int(math.floor(n * TRAIN_FRACTION + 0.5))


def _split(sessions: Sequence[Session], rng: random.Random) -> dict:
    order = list(range(len(sessions)))
    rng.shuffle(order)
    cut = _n_train(len(order))
    return {i: ("train" if rank < cut else "val") for rank, i in enumerate(order)}


def _records(sessions, assignment) -> list:
    return [{"session_id": s.session_id, "split": assignment[i], "label": s.label.value}
            for i, s in enumerate(sessions)]


def build_foundation(sessions: Sequence[Session], seed: int = 0) -> DatasetManifest:
    """All sessions kept as-is, shuffled 90/10 into train/val."""
    sessions = list(sessions)
    if not sessions:
        raise ValueError("cannot build a dataset from zero sessions")
    assignment = _split(sessions, random.Random(seed))
    return DatasetManifest(
        kind="foundation",
        seed=seed,
        splits=_records(sessions, assignment),
        achieved_prevalence=prevalence(sessions).to_dict(),
        stats=compute_stats(sessions),
    )


def plan_rebalance(n_anomalous: int, n_normal: int, target: float = DEFAULT_TARGET,
                   tolerance: float = DEFAULT_TOLERANCE) -> int:
    """Number of normal units to keep so prevalence lands within ``target ± tolerance``.

    Works on any unit (sessions or log lines). Nothing is dropped when the
    input is already inside the band.
    """
    if n_anomalous <= 0 or n_normal <= 0:
        raise InfeasibleRebalance("both classes must be present", 0.0, 1.0)
    if not 0 < target < 1:
        raise ValueError("target prevalence must be in (0, 1)")
    lo_p = n_anomalous / (n_anomalous + n_normal)
    hi_p = n_anomalous / (n_anomalous + 1)
    if target - tolerance <= lo_p <= target + tolerance:
        return n_normal
    if lo_p > target + tolerance:
        raise InfeasibleRebalance(
            f"target {target} ± {tolerance} is below the minimum achievable prevalence {lo_p:.4f} "
            f"(anomalous units are never dropped and normals never duplicated); "
            f"achievable range is [{lo_p:.4f}, {hi_p:.4f}]", lo_p, hi_p)
    keep = n_anomalous * (1 - target) / target
    best = min((max(1, math.floor(keep)), max(1, math.ceil(keep))),
               key=lambda k: abs(n_anomalous / (n_anomalous + k) - target))
    best = min(best, n_normal)
    achieved = n_anomalous / (n_anomalous + best)
    if abs(achieved - target) > tolerance:
        raise InfeasibleRebalance(
            f"closest achievable prevalence {achieved:.4f} is outside {target} ± {tolerance}; "
            f"maximum achievable prevalence is {hi_p:.4f}", lo_p, hi_p)
    return best


def rebalance(sessions: Sequence[Session], target_prevalence: float = DEFAULT_TARGET,
              tolerance: float = DEFAULT_TOLERANCE, seed: int = 0) -> tuple:
    """Subsample normal sessions to reach the target prevalence.

    Returns ``(manifest, kept_sessions)``. Every anomalous session is kept,
    nothing is duplicated, and the kept sessions preserve input order. The
    train/val split is stratified by label.
    """
    sessions = list(sessions)
    anomalous = [i for i, s in enumerate(sessions) if s.is_anomalous]
    normal = [i for i, s in enumerate(sessions) if not s.is_anomalous]
    keep_n = plan_rebalance(len(anomalous), len(normal), target_prevalence, tolerance)
    rng = random.Random(seed)
    kept_normal = set(rng.sample(normal, keep_n)) if keep_n < len(normal) else set(normal)
    kept = [s for i, s in enumerate(sessions) if s.is_anomalous or i in kept_normal]

    assignment: dict = {}
    for label in (Label.ANOMALOUS, Label.NORMAL):
        idx = [i for i, s in enumerate(kept) if s.label is label]
        order = list(idx)
        rng.shuffle(order)
        cut = _n_train(len(order))
        for rank, i in enumerate(order):
            assignment[i] = "train" if rank < cut else "val"

    manifest = DatasetManifest(
        kind="defense",
        seed=seed,
        splits=_records(kept, assignment),
        achieved_prevalence=prevalence(kept).to_dict(),
        stats=compute_stats(kept),
        target_prevalence=target_prevalence,
        tolerance=tolerance,
        extra={"input_sessions": len(sessions), "dropped_normal_sessions": len(normal) - keep_n},
    )
    return manifest, kept


# --- instruction pairs ----------------------------------------------------

@dataclass(frozen=True)
class RiskRule:
    grade: str
    justification: str
    remediation: tuple


def load_risk_rules(path=None) -> dict:
    """Read the tag -> (grade, justification, remediation) table. Key ``None`` is the untagged row."""
    if path is None:
        text = resources.files("sessionlab.data").joinpath("risk_rules.tsv").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    rules: dict = {}
    rows = csv.reader((ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")),
                      delimiter="\t")
    for row in rows:
        tag, grade, why, steps = row
        if grade not in GRADES:
            raise ValueError(f"unknown risk grade {grade!r} for {tag!r}")
        key = None if tag == "none" else AttackTag(tag)
        rules[key] = RiskRule(grade, why, tuple(s.strip() for s in steps.split("|")))
    missing = [t for t in list(AttackTag) + [None] if t not in rules]
    if missing:
        raise ValueError(f"risk rule table lacks rows for {missing}")
    return rules


_RULES: Optional[dict] = None


def _default_rules() -> dict:
    global _RULES
    if _RULES is None:
        _RULES = load_risk_rules()
    return _RULES


@dataclass(frozen=True)
class InstructionPair:
    prompt: str
    response: str

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "response": self.response}


def session_prompt(session: Session, max_entries: int = 200) -> str:
    meta = session.meta
    k = session.key
    head = [
        "Analyze the following log session and report on its security posture.",
        f"host: {meta.host}; process: {k.process or '-'}; user: {k.user or '-'}",
        f"start: {format_ts(session.start)}; duration_seconds: {meta.duration_seconds:g}; "
        f"hour: {meta.hour}; is_weekend: {str(meta.is_weekend).lower()}",
        "log_types: " + ", ".join(f"{t}={c}" for t, c in meta.log_types.items()),
        "logs:",
    ]
    body = [f"[{e.timestamp:%H:%M:%S}] {e.source_type.value} {e.process or '-'}: {e.message}"
            for e in session.entries[:max_entries]]
    if len(session.entries) > max_entries:
        body.append(f"... ({len(session.entries) - max_entries} more entries)")
    return "\n".join(head + body)


def grade_session(session: Session, rules: Optional[dict] = None) -> tuple:
    """Worst grade over the session's tags, with the tag that set it (``None`` when untagged)."""
    rules = rules or _default_rules()
    tags = session.tags()
    if not tags:
        return rules[None].grade, None
    worst = min(tags, key=lambda t: (GRADES.index(rules[t].grade), t.value))
    return rules[worst].grade, worst


def to_instruction_pair(session: Session, rules: Optional[dict] = None) -> InstructionPair:
    rules = rules or _default_rules()
    meta = session.meta
    types = ", ".join(f"{c} {t}" for t, c in meta.log_types.items())
    summary = (f"{len(session.entries)} log entries over {meta.duration_seconds:g} seconds on host "
               f"{meta.host} ({types}), starting at {meta.hour:02d}:00 UTC on a "
               f"{'weekend' if meta.is_weekend else 'weekday'}.")

    tagged = [e for e in session.entries if e.attack_tags]
    if tagged:
        by_tag: dict = {}
        for e in tagged:
            for t in e.attack_tags:
                by_tag.setdefault(t, []).append(e)
        lines = []
        for t in sorted(by_tag, key=lambda t: t.value):
            group = by_tag[t]
            lines.append(f"- {t.value}: {len(group)} entries, e.g. \"{group[0].message}\"")
        anomalies = "\n".join(lines)
    else:
        anomalies = "none observed"

    grade, tag = grade_session(session, rules)
    rule = rules[tag]
    remediation = "\n".join(f"{i}. {step}" for i, step in enumerate(rule.remediation, 1))
    response = "\n".join([
        PART_HEADERS[0], summary, "",
        PART_HEADERS[1], anomalies, "",
        PART_HEADERS[2], f"Risk: {grade}", f"Justification: {rule.justification}", "",
        PART_HEADERS[3], remediation,
    ])
    return InstructionPair(session_prompt(session), response)


def parse_response(response: str) -> dict:
    """Split a response back into its four parts (used for validation)."""
    parts: dict = {}
    current = None
    for line in response.splitlines():
        if line in PART_HEADERS:
            current = line
            parts[current] = []
        elif current is not None:
            parts[current].append(line)
    return {h: "\n".join(v).strip() for h, v in parts.items()}
