"""Explainable boosting head: additive binned shape functions on a logit link.

The head predicts logit(x) = intercept + sum_j f_j(x_j), where each f_j is a
piecewise-constant function over quantile bins, learned by cyclic gradient
boosting of depth-1 trees with optional bagging. Bins are computed once on
the full training matrix and shared across bags, so bag averaging is exact.

Binning rule (deterministic): with N sorted values and max_bins B, the
candidate cut for quantile i/B sits between sorted[(i*N)//B - 1] and
sorted[(i*N)//B]; a cut is placed at their midpoint only when the two values
differ, so runs of tied values are never straddled.

Tree rule (deterministic): a split is allowed only after an occupied bin with
a non-empty right side; the best split maximizes sum_L^2/n_L + sum_R^2/n_R of
the working residual, first index winning ties. Empty bins inherit the leaf
value of the side they fall on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

INTERCEPT_LIMIT = 15.0
CENTERING_TOLERANCE = 1e-9


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    # softplus(s) - y*s, numerically stable for large |s|
    per = np.log1p(np.exp(-np.abs(scores))) + np.maximum(scores, 0.0) - labels * scores
    return float(per.mean())


def _clamped_log_odds(rate: float) -> float:
    if rate <= 0.0:
        return -INTERCEPT_LIMIT
    if rate >= 1.0:
        return INTERCEPT_LIMIT
    return float(np.clip(math.log(rate / (1.0 - rate)), -INTERCEPT_LIMIT, INTERCEPT_LIMIT))


def quantile_bin_edges(values: np.ndarray, max_bins: int) -> np.ndarray:
    """Ascending cut points per the midpoint rule documented above."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n == 0:
        raise ValueError("cannot bin an empty feature column")
    ordered = np.sort(values)
    edges: list[float] = []
    for i in range(1, max_bins):
        idx = (i * n) // max_bins
        if idx <= 0 or idx >= n:
            continue
        lo, hi = ordered[idx - 1], ordered[idx]
        if lo < hi:
            edges.append(0.5 * (lo + hi))
    return np.unique(np.asarray(edges, dtype=np.float64))


@dataclass
class ShapeFunction:
    """Binned additive logit contribution for one feature."""

    feature_index: int
    bin_edges: np.ndarray  # ascending, len m
    bin_values: np.ndarray  # len m + 1

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.bin_values = np.asarray(self.bin_values, dtype=np.float64)
        if self.bin_values.size != self.bin_edges.size + 1:
            raise ValueError(
                f"shape function needs {self.bin_edges.size + 1} bin values, got {self.bin_values.size}"
            )
        if self.bin_edges.size > 1 and not (np.diff(self.bin_edges) > 0).all():
            raise ValueError("bin edges must be strictly ascending")
        if not np.isfinite(self.bin_values).all():
            raise ValueError("bin values must be finite")

    def bin_index(self, x: np.ndarray) -> np.ndarray:
        """Out-of-range inputs clamp to the outermost bins by construction."""
        return np.searchsorted(self.bin_edges, np.asarray(x, dtype=np.float64), side="right")

    def __call__(self, x) -> np.ndarray:
        return self.bin_values[self.bin_index(x)]

    def interpolation_knots(self) -> tuple[np.ndarray, np.ndarray]:
        """(centers, values) of the piecewise-linear surrogate through bin centers.

        Interior bin centers are edge midpoints; the two unbounded edge bins
        use centers mirrored over the outermost edge (half the adjacent bin
        width away, or 0.5 when there is a single edge).
        """
        e = self.bin_edges
        m = e.size
        if m == 0:
            return np.zeros(1), self.bin_values.copy()
        if m == 1:
            centers = np.array([e[0] - 0.5, e[0] + 0.5])
        else:
            first = e[0] - 0.5 * (e[1] - e[0])
            last = e[-1] + 0.5 * (e[-1] - e[-2])
            centers = np.concatenate([[first], 0.5 * (e[:-1] + e[1:]), [last]])
        return centers, self.bin_values.copy()

    def surrogate_value(self, x) -> np.ndarray:
        """Piecewise-linear interpolation at bin centers, flat outside."""
        centers, values = self.interpolation_knots()
        return np.interp(np.asarray(x, dtype=np.float64), centers, values)

    def surrogate_gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        centers, values = self.interpolation_knots()
        if centers.size < 2:
            return np.zeros_like(x)
        slopes = np.diff(values) / np.diff(centers)
        seg = np.searchsorted(centers, x, side="right") - 1
        inside = (seg >= 0) & (seg < slopes.size)
        out = np.zeros_like(x)
        out[inside] = slopes[np.clip(seg, 0, slopes.size - 1)][inside]
        return out


@dataclass
class EbmHead:
    """Intercept plus one shape function per feature, on a logistic link."""

    intercept: float
    shapes: list[ShapeFunction]
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.shapes:
            raise ValueError("an EBM head needs at least one shape function")
        if not self.feature_names:
            self.feature_names = tuple(f"feature_{j}" for j in range(len(self.shapes)))
        if len(self.feature_names) != len(self.shapes):
            raise ValueError("feature name count does not match shape count")

    @property
    def feature_count(self) -> int:
        return len(self.shapes)

    def _check_width(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.feature_count:
            raise ValueError(f"expected {self.feature_count} features, got shape {x.shape}")
        return x

    def individual_importance(self, x) -> np.ndarray:
        """Per-feature shape outputs; sums (plus intercept) to the exact logit."""
        squeeze = np.asarray(x).ndim == 1
        x = self._check_width(x)
        out = np.column_stack([s(x[:, j]) for j, s in enumerate(self.shapes)])
        return out[0] if squeeze else out

    def predict_logit(self, x) -> np.ndarray | float:
        squeeze = np.asarray(x).ndim == 1
        imp = self.individual_importance(self._check_width(x))
        logit = self.intercept + imp.sum(axis=1)
        return float(logit[0]) if squeeze else logit

    def predict_proba(self, x) -> np.ndarray | float:
        logit = self.predict_logit(x)
        if np.isscalar(logit):
            return float(_sigmoid(np.asarray([logit]))[0])
        return _sigmoid(logit)

    def group_importance(self, dataset) -> np.ndarray:
        """Element-wise mean of absolute individual importances over the rows."""
        x = self._check_width(dataset)
        if x.shape[0] == 0:
            raise ValueError("group importance needs at least one row")
        return np.abs(self.individual_importance(x)).mean(axis=0)

    def surrogate_gradient(self, x) -> np.ndarray:
        """d logit / d x_j of the interpolated surrogate; forward values stay exact."""
        squeeze = np.asarray(x).ndim == 1
        x = self._check_width(x)
        out = np.column_stack([s.surrogate_gradient(x[:, j]) for j, s in enumerate(self.shapes)])
        return out[0] if squeeze else out

    def surrogate_logit(self, x) -> np.ndarray:
        """Interpolated logit; only the gradient-verification tests need it."""
        squeeze = np.asarray(x).ndim == 1
        x = self._check_width(x)
        out = self.intercept + np.column_stack(
            [s.surrogate_value(x[:, j]) for j, s in enumerate(self.shapes)]
        ).sum(axis=1)
        return out[0] if squeeze else out

    def to_json(self) -> str:
        payload = {
            "format": "ebm-head",
            "version": 1,
            "intercept": self.intercept,
            "feature_names": list(self.feature_names),
            "shapes": [
                {
                    "feature_index": s.feature_index,
                    "bin_edges": s.bin_edges.tolist(),
                    "bin_values": s.bin_values.tolist(),
                }
                for s in self.shapes
            ],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "EbmHead":
        payload = json.loads(text)
        if payload.get("format") != "ebm-head":
            raise ValueError("not an EBM head document")
        shapes = [
            ShapeFunction(s["feature_index"], np.asarray(s["bin_edges"]), np.asarray(s["bin_values"]))
            for s in payload["shapes"]
        ]
        return cls(float(payload["intercept"]), shapes, tuple(payload["feature_names"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "EbmHead":
        return cls.from_json(Path(path).read_text())


@dataclass
class EbmTrainConfig:
    max_bins: int = 64
    learning_rate: float = 0.01
    max_rounds: int = 2000
    bag_count: int = 8
    validation_fraction: float = 0.15
    early_stopping_patience: int = 50
    bootstrap: bool = True  # disabled only by tests that need identical bags

    def __post_init__(self):
        if min(self.max_bins, self.max_rounds, self.bag_count, self.early_stopping_patience) <= 0:
            raise ValueError("EBM config values must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation fraction must be in (0, 1)")


def group_importance_ci(
    head: EbmHead,
    features: np.ndarray,
    reps: int = 100,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group importance with percentile bootstrap CIs over subjects.

    Returns (point, ci_low, ci_high), each of length k. Repetition r draws
    its subject resample from default_rng([seed, r]).
    """
    x = np.asarray(features, dtype=np.float64)
    point = head.group_importance(x)
    absolute = np.abs(head.individual_importance(x))
    if absolute.ndim == 1:
        absolute = absolute[None, :]
    n = absolute.shape[0]
    samples = np.empty((reps, absolute.shape[1]))
    for r in range(reps):
        idx = np.random.default_rng([seed, r]).integers(0, n, size=n)
        samples[r] = absolute[idx].mean(axis=0)
    low, high = np.percentile(samples, [2.5, 97.5], axis=0)
    return point, low, high


def _best_split(sums: np.ndarray, counts: np.ndarray) -> tuple[int, float, float] | None:
    """Best boundary t (cut after bin t) or None when no occupied boundary exists."""
    total_n = counts.sum()
    total_s = sums.sum()
    prefix_n = np.cumsum(counts)[:-1]
    prefix_s = np.cumsum(sums)[:-1]
    valid = (counts[:-1] > 0) & (total_n - prefix_n > 0)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(
            valid,
            prefix_s ** 2 / prefix_n + (total_s - prefix_s) ** 2 / (total_n - prefix_n),
            -np.inf,
        )
    t = int(np.argmax(gain))
    left = prefix_s[t] / prefix_n[t]
    right = (total_s - prefix_s[t]) / (total_n - prefix_n[t])
    return t, float(left), float(right)


def _boost_one_bag(
    bins: np.ndarray,
    labels: np.ndarray,
    bin_counts: list[int],
    rows: np.ndarray,
    split_rng: np.random.Generator,
    config: EbmTrainConfig,
) -> tuple[float, list[np.ndarray]]:
    """Cyclic boosting on one bag; returns (intercept, best bin values per feature)."""
    n_rows = rows.size
    k = bins.shape[1]
    perm = split_rng.permutation(n_rows)
    n_val = max(1, int(round(config.validation_fraction * n_rows)))
    val_rows = rows[perm[:n_val]]
    train_rows = rows[perm[n_val:]]
    if train_rows.size == 0:
        raise ValueError("bag too small for the inner validation split")

    y_tr = labels[train_rows].astype(np.float64)
    y_val = labels[val_rows].astype(np.float64)
    bins_tr = bins[train_rows]
    bins_val = bins[val_rows]

    beta = _clamped_log_odds(float(y_tr.mean()))
    values = [np.zeros(b, dtype=np.float64) for b in bin_counts]
    counts = [np.bincount(bins_tr[:, j], minlength=bin_counts[j]).astype(np.float64) for j in range(k)]

    scores_tr = np.full(train_rows.size, beta, dtype=np.float64)
    scores_val = np.full(val_rows.size, beta, dtype=np.float64)

    best_loss = _log_loss(scores_val, y_val)
    best_values = [v.copy() for v in values]
    rounds_since_best = 0
    lr = config.learning_rate

    for _ in range(config.max_rounds):
        for j in range(k):
            residual = y_tr - _sigmoid(scores_tr)
            sums = np.bincount(bins_tr[:, j], weights=residual, minlength=bin_counts[j])
            split = _best_split(sums, counts[j])
            if split is None:
                leaf = lr * sums.sum() / counts[j].sum()
                contrib = np.full(bin_counts[j], leaf)
            else:
                t, left, right = split
                contrib = np.where(np.arange(bin_counts[j]) <= t, lr * left, lr * right)
            values[j] += contrib
            scores_tr += contrib[bins_tr[:, j]]
            scores_val += contrib[bins_val[:, j]]
        val_loss = _log_loss(scores_val, y_val)
        if val_loss < best_loss:
            best_loss = val_loss
            best_values = [v.copy() for v in values]
            rounds_since_best = 0
        else:
            rounds_since_best += 1
            if rounds_since_best >= config.early_stopping_patience:
                break
    return beta, best_values


def fit_ebm(
    features: np.ndarray,
    labels: np.ndarray,
    config: EbmTrainConfig | None = None,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
) -> EbmHead:
    """Fit the head: shared quantile bins, bagged cyclic boosting, centering.

    Determinism: bag b draws its bootstrap rows from default_rng([seed, b]);
    the inner train/validation permutation comes from default_rng([seed]) and
    is shared by all bags, so disabling the bootstrap makes bags identical.
    """
    config = config or EbmTrainConfig()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be a 2D matrix, got shape {x.shape}")
    n, k = x.shape
    if n < 10:
        raise ValueError(f"need at least 10 training rows, got {n}")
    if np.isnan(x).any():
        raise ValueError("features contain NaN")
    y = np.asarray(labels).reshape(-1)
    if y.size != n:
        raise ValueError(f"{n} rows but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)

    edges = [quantile_bin_edges(x[:, j], config.max_bins) for j in range(k)]
    bin_counts = [e.size + 1 for e in edges]
    bins = np.column_stack(
        [np.searchsorted(edges[j], x[:, j], side="right") for j in range(k)]
    ).astype(np.int64)

    all_rows = np.arange(n)
    betas = []
    bag_values = []
    for b in range(config.bag_count):
        if config.bootstrap:
            rows = np.random.default_rng([seed, b]).choice(n, size=n, replace=True)
        else:
            rows = all_rows
        split_rng = np.random.default_rng([seed])
        beta, values = _boost_one_bag(bins, y, bin_counts, rows, split_rng, config)
        betas.append(beta)
        bag_values.append(values)

    intercept = float(np.mean(betas))
    shapes = []
    for j in range(k):
        merged = np.mean([bag[j] for bag in bag_values], axis=0)
        offset = float(merged[bins[:, j]].mean())
        merged = merged - offset
        intercept += offset
        shapes.append(ShapeFunction(j, edges[j], merged))
    return EbmHead(intercept, shapes, tuple(feature_names) if feature_names else ())
