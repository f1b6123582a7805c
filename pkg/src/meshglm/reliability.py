"""Test-retest reliability metrics: ICC, Dice overlap, proxy accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class IccComponents:
    value: float
    sigma_t2: float
    sigma_w2: float
    sigma_b2: float
    truncated: bool
    degenerate: bool  # total variance was zero


def _pop_var(x):
    """Population (1/n) variance along the first axis."""
    x = np.asarray(x, dtype=float)
    return np.mean((x - x.mean(axis=0)) ** 2, axis=0)


def icc_components(paired) -> IccComponents:
    """Variance decomposition of an (M, 2) matrix of repeated measures.

    Total variance is the mean of the two per-visit variances, within-
    subject variance is half the variance of the visit difference, and
    between-subject variance is their difference, truncated at zero. All
    variances use the 1/n convention.
    """
    b = np.asarray(paired, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2:
        raise ValueError(f"expected an (M, 2) matrix, got {b.shape}")
    if b.shape[0] < 2:
        raise ValueError("need at least two subjects")
    if not np.all(np.isfinite(b)):
        raise ValueError("paired estimates must be finite")
    sigma_t2 = 0.5 * (_pop_var(b[:, 0]) + _pop_var(b[:, 1]))
    sigma_w2 = 0.5 * _pop_var(b[:, 0] - b[:, 1])
    sigma_b2 = sigma_t2 - sigma_w2
    truncated = sigma_b2 < 0
    degenerate = sigma_t2 == 0
    value = 0.0 if (degenerate or truncated) else float(sigma_b2 / sigma_t2)
    return IccComponents(
        value=value,
        sigma_t2=float(sigma_t2),
        sigma_w2=float(sigma_w2),
        sigma_b2=float(sigma_b2),
        truncated=bool(truncated),
        degenerate=bool(degenerate),
    )


def icc(paired) -> float:
    """Intraclass correlation in [0, 1]; negatives truncate to zero."""
    return icc_components(paired).value


def icc_map(visit1, visit2):
    """Vertex-wise ICC for (M, N) per-visit estimate matrices."""
    a = np.asarray(visit1, dtype=float)
    b = np.asarray(visit2, dtype=float)
    if a.shape != b.shape:
        raise ValueError("visit matrices must have equal shape")
    sigma_t2 = 0.5 * (_pop_var(a) + _pop_var(b))
    sigma_w2 = 0.5 * _pop_var(a - b)
    sigma_b2 = np.maximum(sigma_t2 - sigma_w2, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = sigma_b2 / sigma_t2
    return np.where(sigma_t2 > 0, vals, 0.0)


# quality bins: fair [0.4, 0.6), good [0.6, 0.75), excellent [0.75, 1]
ICC_BINS = {"fair": (0.4, 0.6), "good": (0.6, 0.75), "excellent": (0.75, np.inf)}


def icc_quality_bins(icc_values, mask=None) -> dict:
    """Proportion of (masked) vertices in each ICC quality bin."""
    v = np.asarray(icc_values, dtype=float)
    if mask is not None:
        v = v[np.asarray(mask, dtype=bool)]
    if v.size == 0:
        return {name: 0.0 for name in ICC_BINS}
    out = {}
    for name, (lo, hi) in ICC_BINS.items():
        out[name] = float(np.mean((v >= lo) & (v < hi)))
    return out


def dice(map_a, map_b):
    """Overlap 2|A & B| / (|A| + |B|); two empty maps count as perfect
    agreement (1). Use :func:`dice_flagged` to tell that case apart."""
    value, _ = dice_flagged(map_a, map_b)
    return value


def dice_flagged(map_a, map_b):
    a = np.asarray(map_a, dtype=bool)
    b = np.asarray(map_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("maps must have equal length")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0, True
    return 2.0 * int((a & b).sum()) / denom, False


def proxy_accuracy(est, proxy, mask=None) -> dict:
    """Masked MSE and Pearson correlation against a noisy unbiased reference."""
    e = np.asarray(est, dtype=float)
    p = np.asarray(proxy, dtype=float)
    if e.shape != p.shape:
        raise ValueError("estimate and proxy must have equal shape")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        e, p = e[m], p[m]
    if e.size < 2:
        raise ValueError("need at least two values")
    mse = float(np.mean((e - p) ** 2))
    pearson = float(stats.pearsonr(e, p).statistic)
    return {"mse": mse, "pearson": pearson}


def paired_dice_difference(dice_a, dice_b):
    """Mean per-subject difference of two Dice sequences plus a two-sided
    paired t-test. Zero-variance differences flag the result and set p = 1."""
    a = np.asarray(dice_a, dtype=float)
    b = np.asarray(dice_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("need two equal-length 1-D dice sequences")
    diff = a - b
    mean = float(diff.mean())
    if diff.size < 2 or np.allclose(diff, diff[0]):
        # zero variance of the differences: the t statistic is undefined
        return {"mean_difference": mean, "p_value": 1.0, "flagged": True}
    res = stats.ttest_rel(a, b)
    return {"mean_difference": mean, "p_value": float(res.pvalue), "flagged": False}


def bootstrap_ci(values, stat=np.mean, n_boot=2000, level=0.95, seed=0):
    """Plain percentile bootstrap interval for a 1-D statistic."""
    v = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(n_boot, v.size))
    reps = np.array([stat(v[i]) for i in idx])
    lo = (1.0 - level) / 2.0
    return float(np.quantile(reps, lo)), float(np.quantile(reps, 1.0 - lo))


def metric_table(rows):
    """Long-format metric rows -> TSV text with header vertex/task/metric/value."""
    lines = ["vertex\ttask\tmetric\tvalue"]
    for vertex, task, metric, value in rows:
        lines.append(f"{vertex}\t{task}\t{metric}\t{value:.17g}")
    return "\n".join(lines) + "\n"
