"""Independent statistics oracle.

Deliberately does NOT share code with the package: descriptive statistics use
numpy's reference implementations and direct formulas; test p-values come from
scipy's distributions. The production path implements everything itself, so
agreement here is a genuine cross-check.
"""

import numpy as np
from scipy import stats as scipy_stats


def summary_oracle(values):
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return None
    return {
        "n": int(arr.size),
        "mean": float(np.mean(arr)),
        "median": float(np.median(arr)),
        "std": float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0,
        "min": float(np.min(arr)),
        "max": float(np.max(arr)),
        "p5": float(np.percentile(arr, 5)),
        "p25": float(np.percentile(arr, 25)),
        "p50": float(np.percentile(arr, 50)),
        "p75": float(np.percentile(arr, 75)),
        "p95": float(np.percentile(arr, 95)),
    }


def pearson_oracle(x, y):
    r, p = scipy_stats.pearsonr(np.asarray(x, dtype=np.float64),
                                np.asarray(y, dtype=np.float64))
    return float(r), float(p)


def spearman_oracle(x, y):
    rho, p = scipy_stats.spearmanr(np.asarray(x, dtype=np.float64),
                                   np.asarray(y, dtype=np.float64))
    return float(rho), float(p)


def welch_oracle(a, b):
    res = scipy_stats.ttest_ind(np.asarray(a, dtype=np.float64),
                                np.asarray(b, dtype=np.float64), equal_var=False)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(res.statistic), float(df), float(res.pvalue)


def anova_oracle(*groups):
    # F from first principles (sums of squares by hand), p from scipy's F dist
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    all_values = np.concatenate(arrays)
    grand = all_values.mean()
    ssb = sum(a.size * (a.mean() - grand) ** 2 for a in arrays)
    ssw = sum(((a - a.mean()) ** 2).sum() for a in arrays)
    dfb = len(arrays) - 1
    dfw = all_values.size - len(arrays)
    f = (ssb / dfb) / (ssw / dfw)
    return float(f), float(scipy_stats.f.sf(f, dfb, dfw))
