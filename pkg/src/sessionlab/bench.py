"""Attack-fraction sweep: how accuracy and friends behave as test-set prevalence moves."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta, timezone
from typing import Callable, Optional, Sequence

import numpy as np

from .model import AttackTag, LogEntry, Session, SourceType

DEFAULT_TOTAL = 10_000
DEFAULT_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
# Seed of the shipped miscalibration demo (used for both score draws and the sweep).
DEMO_SEED = 1
CSV_COLUMNS = ("attack_pct", "n_attacks", "n_normal", "accuracy",
               "predicted_normal", "predicted_attack", "true_positive")

Classifier = Callable[[Session], bool]


class InsufficientPool(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def metrics(counts: ConfusionCounts) -> dict:
    """Accuracy, precision, recall and F1; zero denominators give 0."""
    total = counts.total
    if total == 0:
        raise ValueError("metrics of an empty evaluation are undefined")
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + counts.tn) / total, "precision": precision, "recall": recall, "f1": f1}


@dataclass(frozen=True)
class DistributionPoint:
    attack_fraction: float
    n_attacks: int
    n_normal: int
    counts: ConfusionCounts
    accuracy: float
    precision: float
    recall: float
    f1: float

    @property
    def predicted_attack(self) -> int:
        return self.counts.tp + self.counts.fp

    @property
    def predicted_normal(self) -> int:
        return self.counts.tn + self.counts.fn

    @property
    def attack_pct(self) -> int:
        return int(round(self.attack_fraction * 100))

    @classmethod
    def from_counts(cls, attack_fraction: float, counts: ConfusionCounts) -> "DistributionPoint":
        return cls(attack_fraction, counts.tp + counts.fn, counts.tn + counts.fp, counts, **metrics(counts))

    def csv_row(self) -> dict:
        return {
            "attack_pct": self.attack_pct,
            "n_attacks": self.n_attacks,
            "n_normal": self.n_normal,
            "accuracy": self.accuracy,
            "predicted_normal": self.predicted_normal,
            "predicted_attack": self.predicted_attack,
            "true_positive": self.counts.tp,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(predicted_attack=self.predicted_attack, predicted_normal=self.predicted_normal,
                 attack_pct=self.attack_pct)
        return d


def evaluate(classifier: Classifier, attacks: Sequence[Session], normals: Sequence[Session]) -> ConfusionCounts:
    tp = sum(1 for s in attacks if classifier(s))
    fp = sum(1 for s in normals if classifier(s))
    return ConfusionCounts(tp=tp, fp=fp, tn=len(normals) - fp, fn=len(attacks) - tp)


def sweep(classifier: Classifier, attack_pool: Sequence[Session], normal_pool: Sequence[Session],
          total: int = DEFAULT_TOTAL, fractions: Sequence[float] = DEFAULT_FRACTIONS,
          seed: int = 0) -> list:
    """Evaluate ``classifier`` on fixed-size test sets at each attack fraction.

    Each point draws its own sample without replacement from the full pools,
    using a per-point child seed.
    """
    plan = []
    for f in fractions:
        if not 0 <= f <= 1:
            raise ValueError(f"attack fraction {f} outside [0, 1]")
        n_att = int(round(f * total))
        n_norm = total - n_att
        if n_att > len(attack_pool) or n_norm > len(normal_pool):
            raise InsufficientPool(
                f"fraction {f}: needs {n_att} attack and {n_norm} normal sessions, "
                f"pools have {len(attack_pool)} and {len(normal_pool)}")
        plan.append((f, n_att, n_norm))

    points = []
    for (f, n_att, n_norm), ss in zip(plan, np.random.SeedSequence(seed).spawn(len(plan))):
        rng = np.random.default_rng(ss)
        ai = rng.choice(len(attack_pool), size=n_att, replace=False)
        ni = rng.choice(len(normal_pool), size=n_norm, replace=False)
        counts = evaluate(classifier, [attack_pool[i] for i in ai], [normal_pool[i] for i in ni])
        points.append(DistributionPoint.from_counts(f, counts))
    return points


def always_normal(session: Session) -> bool:
    return False


def always_attack(session: Session) -> bool:
    return True


def threshold_detector(score: Callable[[Session], float], threshold: float) -> Classifier:
    """Flag a session as an attack iff ``score(session) >= threshold``."""
    def classify(session: Session) -> bool:
        return score(session) >= threshold
    classify.threshold = threshold
    return classify


# --- synthetic pools and the miscalibration demo --------------------------

_EPOCH = datetime(2022, 1, 17, tzinfo=timezone.utc)


def _stub_session(i: int, attack: bool) -> Session:
    entry = LogEntry(
        timestamp=_EPOCH + timedelta(seconds=i),
        host=f"pool{'a' if attack else 'n'}{i % 97:02d}",
        source_type=SourceType.SYSLOG,
        process="bench",
        user=f"u{i}",
        message=f"synthetic {'attack' if attack else 'normal'} session {i}",
        attack_tags=frozenset({AttackTag.RECONNAISSANCE}) if attack else frozenset(),
    )
    return Session.from_entries([entry])


def synthetic_pools(n_attack: int = DEFAULT_TOTAL, n_normal: int = DEFAULT_TOTAL) -> tuple:
    """Single-entry labeled sessions for sweeps that do not need real content."""
    return ([_stub_session(i, True) for i in range(n_attack)],
            [_stub_session(i, False) for i in range(n_normal)])


def pools_from_sessions(sessions: Sequence[Session]) -> tuple:
    return ([s for s in sessions if s.is_anomalous], [s for s in sessions if not s.is_anomalous])


@dataclass
class MiscalibrationDemo:
    """Threshold detector tuned on a ~2%-prevalence pool, then swept.

    Normal scores are standard normal. Most attack scores come from a narrow
    band well under the normal upper tail, so a threshold at the 99.5th
    percentile of the imbalanced calibration pool sits above them; a handful of
    loud attacks score above it.
    """

    attack_pool: list
    normal_pool: list
    scores: dict
    threshold: float
    calibration_prevalence: float
    n_loud: int

    def score(self, session: Session) -> float:
        return self.scores[session.session_id]

    @property
    def classifier(self) -> Classifier:
        return threshold_detector(self.score, self.threshold)


def miscalibration_demo(seed: int = DEMO_SEED, total: int = DEFAULT_TOTAL, n_loud: int = 1,
                        calibration_size: int = 20_000, calibration_prevalence: float = 0.02,
                        percentile: float = 99.5) -> MiscalibrationDemo:
    rng = np.random.default_rng(seed)
    attacks, normals = synthetic_pools(total, total)

    def attack_scores(n):
        return np.clip(rng.normal(1.0, 0.4, size=n), None, 2.0)

    # calibration pool: imbalanced, drawn from the same score families
    n_cal_att = int(round(calibration_prevalence * calibration_size))
    cal = np.concatenate([rng.normal(0.0, 1.0, size=calibration_size - n_cal_att), attack_scores(n_cal_att)])
    threshold = float(np.percentile(cal, percentile))

    a_scores = attack_scores(total)
    loud = rng.choice(total, size=n_loud, replace=False)
    a_scores[loud] = threshold + 1.0
    n_scores = rng.normal(0.0, 1.0, size=total)
    scores = {s.session_id: float(v) for s, v in zip(attacks, a_scores)}
    scores.update({s.session_id: float(v) for s, v in zip(normals, n_scores)})
    return MiscalibrationDemo(attacks, normals, scores, threshold, calibration_prevalence, n_loud)


def miscalibration_sweep(seed: int = DEMO_SEED, total: int = DEFAULT_TOTAL,
                         fractions: Sequence[float] = DEFAULT_FRACTIONS) -> list:
    demo = miscalibration_demo(seed=seed, total=total)
    return sweep(demo.classifier, demo.attack_pool, demo.normal_pool, total, fractions, seed=seed)


# --- reporting ------------------------------------------------------------

def write_csv(points: Sequence[DistributionPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for p in points:
            w.writerow(p.csv_row())


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != CSV_COLUMNS:
        raise ValueError(f"unexpected sweep CSV columns: {list(rows[0].keys())}")
    return rows


def write_json(points: Sequence[DistributionPoint], path, extra: Optional[dict] = None) -> None:
    doc = {"points": [p.to_dict() for p in points]}
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# Published sweep rows: (attack %, n attacks, n normal, accuracy, predicted normal, predicted attack, tp)
PUBLISHED_TABLE = (
    (0, 0, 10_000, 0.9949, 9_949, 51, 0),
    (20, 2_000, 8_000, 0.7944, 9_944, 56, 0),
    (40, 4_000, 6_000, 0.5978, 9_978, 22, 0),
    (60, 6_000, 4_000, 0.3972, 9_972, 28, 0),
    (80, 8_000, 2_000, 0.1981, 9_981, 19, 0),
    (100, 10_000, 0, 0.3418, 6_582, 3_418, 3_418),
)


def counts_from_row(n_attacks: int, n_normal: int, predicted_attack: int, tp: int) -> ConfusionCounts:
    fp = predicted_attack - tp
    return ConfusionCounts(tp=tp, fp=fp, tn=n_normal - fp, fn=n_attacks - tp)


def is_close_4dp(a: float, b: float) -> bool:
    return math.isclose(round(a, 4), round(b, 4), abs_tol=1e-12)
