"""Independent reference implementations used by unit and acceptance tests.

These deliberately avoid the production code paths: explicit loops and masks
instead of histogram prefix sums, np.digitize instead of the library's
searchsorted wrapper.
"""

import math

import numpy as np

from patchebm.ebm import EbmTrainConfig


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def oracle_single_feature_fit(x, y, config: EbmTrainConfig, seed: int):
    """Plain gradient-boosted-stumps trainer for one feature.

    Follows the same documented schedule as the library (shared binning rule,
    bootstrap and split seeding, occupied-boundary splits, best-round
    snapshot, centering) with direct per-split computation.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size

    ordered = np.sort(x)
    edges = []
    for i in range(1, config.max_bins):
        idx = (i * n) // config.max_bins
        if 0 < idx < n and ordered[idx - 1] < ordered[idx]:
            edges.append((ordered[idx - 1] + ordered[idx]) / 2.0)
    edges = np.unique(np.array(edges))
    nbins = edges.size + 1
    bins = np.digitize(x, edges, right=False)

    if config.bootstrap:
        rows = np.random.default_rng([seed, 0]).choice(n, size=n, replace=True)
    else:
        rows = np.arange(n)
    perm = np.random.default_rng([seed]).permutation(rows.size)
    n_val = max(1, int(round(config.validation_fraction * rows.size)))
    val_rows, train_rows = rows[perm[:n_val]], rows[perm[n_val:]]

    y_tr, y_val = y[train_rows], y[val_rows]
    b_tr, b_val = bins[train_rows], bins[val_rows]
    rate = y_tr.mean()
    if rate <= 0:
        beta = -15.0
    elif rate >= 1:
        beta = 15.0
    else:
        beta = float(np.clip(math.log(rate / (1 - rate)), -15, 15))

    values = np.zeros(nbins)
    s_tr = np.full(train_rows.size, beta)
    s_val = np.full(val_rows.size, beta)

    def logloss(s, yy):
        return float(np.mean(np.log1p(np.exp(-np.abs(s))) + np.maximum(s, 0) - yy * s))

    best_loss = logloss(s_val, y_val)
    best_values = values.copy()
    stale = 0
    for _ in range(config.max_rounds):
        r = y_tr - sigmoid(s_tr)
        best_gain, best_t = None, None
        for t in range(nbins - 1):
            left = b_tr <= t
            if not np.any(b_tr == t) or not np.any(~left):
                continue  # cut must follow an occupied bin with a non-empty right side
            gl = r[left].sum() ** 2 / left.sum()
            gr = r[~left].sum() ** 2 / (~left).sum()
            if best_gain is None or gl + gr > best_gain:
                best_gain, best_t = gl + gr, t
        if best_t is None:
            contrib = np.full(nbins, config.learning_rate * r.mean())
        else:
            left = b_tr <= best_t
            vl = r[left].mean()
            vr = r[~left].mean()
            contrib = np.where(np.arange(nbins) <= best_t,
                               config.learning_rate * vl, config.learning_rate * vr)
        values += contrib
        s_tr += contrib[b_tr]
        s_val += contrib[b_val]
        loss = logloss(s_val, y_val)
        if loss < best_loss:
            best_loss, best_values, stale = loss, values.copy(), 0
        else:
            stale += 1
            if stale >= config.early_stopping_patience:
                break

    offset = best_values[bins].mean()
    return edges, best_values - offset, beta + offset
