"""ROC statistics: AUC via midranks, percentile bootstrap CIs, paired DeLong
test from placement values, stratified splitting, and the multi-model
comparison harness."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


@dataclass
class ScoredSet:
    """Scores and binary labels for a fixed set of subjects."""

    subject_ids: list[str]
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not (len(self.subject_ids) == self.scores.size == self.labels.size):
            raise ValueError("subject ids, scores, and labels must have equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return self.scores.size

    def take(self, indices: np.ndarray) -> "ScoredSet":
        idx = np.asarray(indices)
        return ScoredSet([self.subject_ids[i] for i in idx], self.scores[idx], self.labels[idx])


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their run."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    z = x[order]
    n = x.size
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j < n and z[j] == z[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks
    return out


def auc(scored: ScoredSet) -> float:
    """P(score+ > score-) + 0.5 P(tie), computed from midranks."""
    pos = scored.scores[scored.labels == 1]
    neg = scored.scores[scored.labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one subject of each class")
    ranks = midranks(scored.scores)
    pos_rank_sum = ranks[scored.labels == 1].sum()
    m, n = pos.size, neg.size
    return float((pos_rank_sum - m * (m + 1) / 2.0) / (m * n))


def normal_cdf(x: float) -> float:
    """Phi(x) through the C library's erfc; absolute error well below 1e-12."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def bootstrap_ci(
    scored: ScoredSet,
    metric: Callable[[ScoredSet], float] = auc,
    reps: int = 100,
    seed: int = 0,
    retry_cap: int = 1000,
) -> tuple[float, float]:
    """Percentile (2.5, 97.5) interval over `reps` resamples with replacement.

    Resamples missing a class are redrawn; repetition r uses its own rng
    derived from (seed, r), so repetitions are order-independent.
    """
    n = len(scored)
    if n == 0:
        raise ValueError("cannot bootstrap an empty set")
    values = np.empty(reps, dtype=np.float64)
    for r in range(reps):
        rng = np.random.default_rng([seed, r])
        for attempt in range(retry_cap + 1):
            idx = rng.integers(0, n, size=n)
            resample = scored.take(idx)
            if 0 < resample.labels.sum() < n:
                break
        else:
            raise ValueError(f"no two-class resample found in {retry_cap} attempts")
        values[r] = metric(resample)
    low, high = np.percentile(values, [2.5, 97.5])
    return float(low), float(high)


def _placements(scored: ScoredSet) -> tuple[float, np.ndarray, np.ndarray]:
    """AUC plus the positive/negative structural components."""
    labels = scored.labels
    pos = scored.scores[labels == 1]
    neg = scored.scores[labels == 0]
    m, n = pos.size, neg.size
    if m == 0 or n == 0:
        raise ValueError("DeLong components need both classes")
    rank_all = midranks(scored.scores)
    rank_pos = midranks(pos)
    rank_neg = midranks(neg)
    v10 = (rank_all[labels == 1] - rank_pos) / n
    v01 = 1.0 - (rank_all[labels == 0] - rank_neg) / m
    theta = float((rank_all[labels == 1].sum() - m * (m + 1) / 2.0) / (m * n))
    return theta, v10, v01


def delong_test(a: ScoredSet, b: ScoredSet) -> tuple[float, float]:
    """Two-sided paired comparison of two AUCs on identical subjects.

    Returns (z, p). Zero variance with equal AUCs yields (0, 1).
    """
    if a.subject_ids != b.subject_ids or not np.array_equal(a.labels, b.labels):
        raise ValueError("DeLong test requires identically ordered paired subjects and labels")
    if a.labels.sum() < 2 or (a.labels == 0).sum() < 2:
        raise ValueError("DeLong variance needs at least two subjects per class")
    theta_a, v10_a, v01_a = _placements(a)
    theta_b, v10_b, v01_b = _placements(b)
    m = v10_a.size
    n = v01_a.size
    s10 = np.cov(np.vstack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.vstack([v01_a, v01_b]), ddof=1)
    s = s10 / m + s01 / n
    var = float(s[0, 0] + s[1, 1] - 2.0 * s[0, 1])
    diff = theta_a - theta_b
    if var <= 1e-16:
        if abs(diff) <= 1e-12:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    z = diff / math.sqrt(var)
    p = 2.0 * (1.0 - normal_cdf(abs(z)))
    return float(z), float(min(max(p, 0.0), 1.0))


def stratified_split(
    labels: np.ndarray,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint, complete (train, valid, test) index split, stratified by class.

    Within each class the valid/test counts are the rounded targets, so the
    per-class deviation from the exact ratio is at most one subject.
    """
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    valid_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        n = members.size
        n_valid = int(round(ratios[1] * n))
        n_test = int(round(ratios[2] * n))
        if n_valid + n_test > n:
            raise ValueError(f"class {cls} has too few subjects ({n}) for the requested split")
        valid_idx.append(members[:n_valid])
        test_idx.append(members[n_valid:n_valid + n_test])
        train_idx.append(members[n_valid + n_test:])
    return (
        np.sort(np.concatenate(train_idx)),
        np.sort(np.concatenate(valid_idx)),
        np.sort(np.concatenate(test_idx)),
    )


@dataclass
class ModelResult:
    name: str
    auc: float
    ci_low: float
    ci_high: float


@dataclass
class EvalReport:
    """Per-model AUC with bootstrap CIs and the pairwise DeLong matrix."""

    task: str
    results: list[ModelResult]
    pairwise: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)
    bootstrap_reps: int = 100

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "bootstrap_reps": self.bootstrap_reps,
            "models": [
                {"name": r.name, "auc": r.auc, "ci_low": r.ci_low, "ci_high": r.ci_high}
                for r in self.results
            ],
            "pairwise_delong": [
                {"model_a": a, "model_b": b, "z": z, "p": p}
                for (a, b), (z, p) in self.pairwise.items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["model", "auc", "ci_low", "ci_high"])
            for r in self.results:
                writer.writerow([r.name, f"{r.auc:.6f}", f"{r.ci_low:.6f}", f"{r.ci_high:.6f}"])


Scorer = Callable[[np.ndarray], np.ndarray]


def run_comparison(
    models: Sequence[tuple[str, Scorer]],
    volumes: np.ndarray,
    labels: np.ndarray,
    subject_ids: Sequence[str] | None = None,
    task: str = "task",
    reps: int = 100,
    seed: int = 0,
) -> EvalReport:
    """Score every model on the shared test volumes and rank by AUC."""
    if len(models) == 0:
        raise ValueError("run_comparison needs at least one model")
    ids = list(subject_ids) if subject_ids is not None else [f"s{i}" for i in range(len(labels))]
    scored: dict[str, ScoredSet] = {}
    for name, scorer in models:
        if name in scored:
            raise ValueError(f"duplicate model name {name!r}")
        scores = np.asarray(scorer(volumes), dtype=np.float64).reshape(-1)
        scored[name] = ScoredSet(ids, scores, labels)
    results = [
        ModelResult(name, auc(s), *bootstrap_ci(s, auc, reps=reps, seed=seed))
        for name, s in scored.items()
    ]
    results.sort(key=lambda r: -r.auc)
    pairwise: dict[tuple[str, str], tuple[float, float]] = {}
    names = [r.name for r in results]
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            pairwise[(a, b)] = delong_test(scored[a], scored[b])
    return EvalReport(task, results, pairwise, bootstrap_reps=reps)
