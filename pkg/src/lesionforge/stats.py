"""Rank-based method comparison and volume agreement statistics.

Wilcoxon rank-sum with an exact small-sample null distribution (full count of
all C(n+m, n) group assignments, computed by dynamic programming over doubled
mid-ranks) and a tie-corrected, continuity-corrected normal approximation for
larger samples. Benjamini-Hochberg step-up adjustment, significance stars,
Bland-Altman limits of agreement, and aggregation of per-case metric tables.
"""

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

EXACT_MAX_N = 12

METRIC_COLUMNS = ("dsc", "lesional_dsc", "ppv", "fpr", "hd95_mm", "assd_mm")
DISTANCE_METRICS = frozenset({"hd95_mm", "assd_mm"})


@dataclass(frozen=True)
class TestResult:
    statistic: float  # rank-sum W of the first sample
    p_two_sided: float
    method: str  # "exact" | "normal-approx"
    n: int
    m: int


def _exact_two_sided(double_ranks: np.ndarray, n: int, w2: int) -> float:
    """P-value from the full null distribution of the doubled rank-sum.

    dp[k, s] counts assignments of k pooled observations to the first sample
    with doubled rank-sum s; iterating over all observations enumerates every
    C(n+m, n) assignment.
    """
    total = int(double_ranks.sum())
    dp = np.zeros((n + 1, total + 1), dtype=np.int64)
    dp[0, 0] = 1
    for r in double_ranks:
        r = int(r)
        for k in range(n, 0, -1):
            dp[k, r:] += dp[k - 1, : total + 1 - r]
    counts = dp[n]
    ways = counts.sum()
    p_low = counts[: w2 + 1].sum() / ways
    p_high = counts[w2:].sum() / ways
    return min(1.0, 2.0 * min(p_low, p_high))


def wilcoxon_rank_sum(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """Two-sided Wilcoxon rank-sum test on mid-ranks of the pooled sample.

    Exact when both samples have at most 12 observations; otherwise a normal
    approximation with tie-corrected variance and 0.5 continuity correction.
    Two-sided p is twice the smaller tail, capped at 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise ValueError("empty sample")
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled, method="average")
    w = float(ranks[:n].sum())

    if n <= EXACT_MAX_N and m <= EXACT_MAX_N:
        double_ranks = np.round(2.0 * ranks).astype(np.int64)
        w2 = int(round(2.0 * w))
        p = _exact_two_sided(double_ranks, n, w2)
        return TestResult(w, p, "exact", n, m)

    big_n = n + m
    mu = n * (big_n + 1) / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts))
    var = n * m / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if var <= 0:
        return TestResult(w, 1.0, "normal-approx", n, m)
    d = w - mu
    if d > 0:
        d -= 0.5
    elif d < 0:
        d += 0.5
    z = d / math.sqrt(var)
    p_one = 0.5 * math.erfc(abs(z) / math.sqrt(2.0))
    return TestResult(w, min(1.0, 2.0 * p_one), "normal-approx", n, m)


def bh_adjust(pvals: Sequence[float]) -> list[float]:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.size == 0:
        return []
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    n = p.size
    order = np.argsort(p, kind="stable")
    ranked = p[order] * n / np.arange(1, n + 1)
    adjusted = np.minimum.accumulate(ranked[::-1])[::-1]
    adjusted = np.minimum(adjusted, 1.0)
    out = np.empty(n)
    out[order] = adjusted
    return out.tolist()


def stars(p: float) -> str:
    """Significance band: *** below 0.001, ** below 0.01, * below 0.05, else ns."""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


@dataclass
class BlandAltman:
    """Volume agreement: bias (mean of gt - pred) and 1.96-SD limits."""

    bias: float
    loa_low: float
    loa_high: float
    means: np.ndarray
    diffs: np.ndarray


def bland_altman(gt_volumes: Sequence[float],
                 pred_volumes: Sequence[float]) -> BlandAltman:
    """Bland-Altman agreement of predicted volumes against ground truth."""
    gt = np.asarray(gt_volumes, dtype=np.float64)
    pred = np.asarray(pred_volumes, dtype=np.float64)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValueError("volume lists must be equal-length 1D sequences")
    if len(gt) < 2:
        raise ValueError("at least two paired volumes required")
    diffs = gt - pred
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd,
                       (gt + pred) / 2.0, diffs)


# ---------------------------------------------------------------------------
# report aggregation
# ---------------------------------------------------------------------------


@dataclass
class Report:
    medians: pd.DataFrame
    comparisons: pd.DataFrame
    bland_altman: dict[str, BlandAltman] = field(default_factory=dict)


def _group_frames(df: pd.DataFrame, keys: Sequence[str]):
    if not keys:
        yield (), df
        return
    for key, sub in df.groupby(list(keys), sort=True):
        yield (key if isinstance(key, tuple) else (key,)), sub


def _metric_values(df: pd.DataFrame, metric: str) -> np.ndarray:
    vals = pd.to_numeric(df[metric], errors="coerce").to_numpy(dtype=np.float64)
    return vals[~np.isnan(vals)]


def aggregate_report(tables: Mapping[str, pd.DataFrame],
                     group_keys: Sequence[str] = ()) -> Report:
    """Summarize per-case metric tables and compare methods pairwise.

    Produces per method and group the median and interquartile range of every
    metric column (distance metrics skip undefined cases; overlap metrics
    keep their assigned zeros), rank-sum p-values for every method pair and
    metric, BH-adjusted over the whole invocation, with significance stars,
    and a Bland-Altman analysis per method when volume columns are present.
    """
    median_rows = []
    cmp_rows = []
    for method, df in tables.items():
        for gkey, sub in _group_frames(df, group_keys):
            for metric in METRIC_COLUMNS:
                if metric not in sub.columns:
                    continue
                vals = _metric_values(sub, metric)
                if vals.size == 0:
                    continue
                q1, q3 = np.percentile(vals, [25, 75])
                median_rows.append({
                    "method": method,
                    **dict(zip(group_keys, gkey)),
                    "metric": metric,
                    "n": int(vals.size),
                    "median": float(np.median(vals)),
                    "iqr": float(q3 - q1),
                })

    for method_a, method_b in combinations(sorted(tables), 2):
        df_a, df_b = tables[method_a], tables[method_b]
        groups_a = dict(_group_frames(df_a, group_keys))
        groups_b = dict(_group_frames(df_b, group_keys))
        for gkey in sorted(set(groups_a) & set(groups_b)):
            for metric in METRIC_COLUMNS:
                if metric not in groups_a[gkey].columns \
                        or metric not in groups_b[gkey].columns:
                    continue
                xs = _metric_values(groups_a[gkey], metric)
                ys = _metric_values(groups_b[gkey], metric)
                if xs.size == 0 or ys.size == 0:
                    continue
                res = wilcoxon_rank_sum(xs, ys)
                cmp_rows.append({
                    "method_a": method_a,
                    "method_b": method_b,
                    **dict(zip(group_keys, gkey)),
                    "metric": metric,
                    "n_a": res.n,
                    "n_b": res.m,
                    "statistic": res.statistic,
                    "test": res.method,
                    "p": res.p_two_sided,
                })

    comparisons = pd.DataFrame(cmp_rows)
    if len(comparisons):
        comparisons["q"] = bh_adjust(comparisons["p"].tolist())
        comparisons["stars"] = [stars(q) for q in comparisons["q"]]

    ba = {}
    for method, df in tables.items():
        if {"gt_volume_mm3", "pred_volume_mm3"} <= set(df.columns) and len(df) >= 2:
            ba[method] = bland_altman(
                pd.to_numeric(df["gt_volume_mm3"]).to_numpy(),
                pd.to_numeric(df["pred_volume_mm3"]).to_numpy())

    return Report(pd.DataFrame(median_rows), comparisons, ba)
