"""Auto-triggered dataset summary and statistics.

Per-variable descriptive statistics, correlation maps, and user-specified
tests (Welch t, Pearson, Spearman, one-way ANOVA), all exportable as CSV.
P-values are computed here via the regularized incomplete beta function
(continued-fraction evaluation), not an external stats package; the test tree
keeps an independent brute-force oracle.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ArityMismatch, DegenerateGroups, InsufficientData, NotFound
from .model import utc_now_ms
from .stores import BlobStore, Warehouse

DATASET_BUCKET = "datasets"

SUMMARY_COLUMNS = ["variable", "group", "n", "mean", "median", "std", "min", "max",
                   "p5", "p25", "p50", "p75", "p95"]


# ---------------------------------------------------------------------------
# special functions (double precision; target 1e-10 against reference tables)
# ---------------------------------------------------------------------------

def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    max_iterations = 300
    eps = 3e-16
    fpmin = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iterations + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b), the regularized incomplete beta function."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided p-value for a t statistic."""
    if df <= 0:
        return float("nan")
    x = df / (df + t * t)
    return betainc_regularized(df / 2.0, 0.5, x)


def f_sf(f_stat: float, df1: float, df2: float) -> float:
    """Upper-tail p-value for an F statistic."""
    if f_stat <= 0:
        return 1.0
    x = df2 / (df2 + df1 * f_stat)
    return betainc_regularized(df2 / 2.0, df1 / 2.0, x)


# ---------------------------------------------------------------------------
# descriptive statistics
# ---------------------------------------------------------------------------

def _clean(values: Sequence[Optional[float]]) -> list[float]:
    return [float(v) for v in values if v is not None]


def percentile(sorted_values: Sequence[float], p: float) -> float:
    """Linear interpolation between closest ranks; percentile(50) is the
    median exactly."""
    n = len(sorted_values)
    if n == 0:
        raise InsufficientData("empty column")
    if n == 1:
        return sorted_values[0]
    rank = (p / 100.0) * (n - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    return sorted_values[lo] * (1.0 - frac) + sorted_values[hi] * frac


def mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def sample_std(values: Sequence[float]) -> float:
    n = len(values)
    if n < 2:
        return 0.0
    m = mean(values)
    return math.sqrt(sum((x - m) ** 2 for x in values) / (n - 1))


def summarize_column(values: Sequence[Optional[float]]) -> Optional[dict]:
    """n, mean, median, sample std, extremes, percentile spread; None when the
    column has no observations (reported per column, not fatal).
    """
    data = sorted(_clean(values))
    if not data:
        return None
    return {
        "n": len(data),
        "mean": mean(data),
        "median": percentile(data, 50),
        "std": sample_std(data),
        "min": data[0],
        "max": data[-1],
        "p5": percentile(data, 5),
        "p25": percentile(data, 25),
        "p50": percentile(data, 50),
        "p75": percentile(data, 75),
        "p95": percentile(data, 95),
    }


def summarize(columns: dict[str, Sequence[Optional[float]]],
              groups: Optional[Sequence] = None) -> list[dict]:
    """Summary rows per variable, and per (variable, group) when a grouping
    column is supplied. Empty columns yield a row with n = 0.
    """
    out = []
    for name in columns:
        if groups is None:
            buckets = {"": columns[name]}
        else:
            buckets = {"": columns[name]}
            labels = sorted({str(g) for g in groups if g is not None})
            for label in labels:
                buckets[label] = [v for v, g in zip(columns[name], groups)
                                  if g is not None and str(g) == label]
        for label, values in buckets.items():
            stats = summarize_column(values)
            if stats is None:
                out.append({"variable": name, "group": label, "n": 0,
                            **{k: None for k in SUMMARY_COLUMNS[3:]}})
            else:
                out.append({"variable": name, "group": label, **stats})
    return out


# ---------------------------------------------------------------------------
# correlation and tests
# ---------------------------------------------------------------------------

def _paired(x: Sequence[Optional[float]], y: Sequence[Optional[float]]):
    pairs = [(a, b) for a, b in zip(x, y) if a is not None and b is not None]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Pearson r with its two-sided t-distributed p-value."""
    n = len(x)
    if n != len(y):
        raise ArityMismatch("paired samples required")
    if n < 3:
        raise InsufficientData("need at least 3 paired observations")
    mx, my = mean(x), mean(y)
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateGroups("zero variance: correlation undefined")
    r = sxy / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    df = n - 2
    t = r * math.sqrt(df / (1.0 - r * r))
    return r, t_sf_two_sided(t, df)


def _average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0  # 1-based, ties share the average rank
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman rho: Pearson on average ranks."""
    return pearson(_average_ranks(x), _average_ranks(y))


def welch_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """Welch's unequal-variance t-test: (t, Welch-Satterthwaite df, two-sided p)."""
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        raise InsufficientData("each group needs at least 2 observations")
    m1, m2 = mean(a), mean(b)
    v1 = sum((x - m1) ** 2 for x in a) / (n1 - 1)
    v2 = sum((x - m2) ** 2 for x in b) / (n2 - 1)
    se2 = v1 / n1 + v2 / n2
    if se2 == 0.0:
        if m1 == m2:
            return 0.0, float(n1 + n2 - 2), 1.0
        raise DegenerateGroups("zero variance with different means")
    t = (m1 - m2) / math.sqrt(se2)
    df = se2 ** 2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1))
    return t, df, t_sf_two_sided(t, df)


def one_way_anova(*groups: Sequence[float]) -> tuple[float, float, float, float]:
    """One-way ANOVA: (F, df between, df within, p). F = MS_between/MS_within."""
    if len(groups) < 2:
        raise ArityMismatch("ANOVA needs at least 2 groups")
    if any(len(g) < 1 for g in groups):
        raise InsufficientData("every group needs at least 1 observation")
    k = len(groups)
    all_values = [x for g in groups for x in g]
    n = len(all_values)
    if n - k < 1:
        raise InsufficientData("no within-group degrees of freedom")
    grand = mean(all_values)
    ss_between = sum(len(g) * (mean(g) - grand) ** 2 for g in groups)
    ss_within = sum(sum((x - mean(g)) ** 2 for x in g) for g in groups)
    df_between, df_within = k - 1, n - k
    if ss_within == 0.0:
        if ss_between == 0.0:
            return 0.0, df_between, df_within, 1.0
        raise DegenerateGroups("zero within-group variance")
    f_stat = (ss_between / df_between) / (ss_within / df_within)
    return f_stat, df_between, df_within, f_sf(f_stat, df_between, df_within)


def correlate(columns: dict[str, Sequence[Optional[float]]]) -> dict:
    """Pairwise-deletion Pearson correlation map: symmetric, unit diagonal,
    null where fewer than 3 pairs or the correlation is undefined.
    """
    names = list(columns)
    if len(names) < 2:
        raise InsufficientData("need at least 2 numeric variables")
    matrix: list[list[Optional[float]]] = [[None] * len(names) for _ in names]
    for i, a in enumerate(names):
        matrix[i][i] = 1.0
        for j in range(i + 1, len(names)):
            x, y = _paired(columns[a], columns[names[j]])
            try:
                r, _ = pearson(x, y)
            except (InsufficientData, DegenerateGroups):
                r = None
            matrix[i][j] = matrix[j][i] = r
    return {"variables": names, "matrix": matrix}


def run_test(kind: str, groups: Sequence[Sequence[Optional[float]]]) -> dict:
    """Dispatch a user-specified statistical test over cleaned columns."""
    cleaned = [_clean(g) for g in groups]
    if kind == "t-test":
        if len(cleaned) != 2:
            raise ArityMismatch("t-test takes exactly 2 groups")
        t, df, p = welch_t(cleaned[0], cleaned[1])
        return {"kind": kind, "statistic": t, "df": df, "p_value": p}
    if kind == "pearson":
        if len(groups) != 2:
            raise ArityMismatch("pearson takes exactly 2 variables")
        x, y = _paired(groups[0], groups[1])
        r, p = pearson(x, y)
        return {"kind": kind, "statistic": r, "n": len(x), "p_value": p}
    if kind == "spearman":
        if len(groups) != 2:
            raise ArityMismatch("spearman takes exactly 2 variables")
        x, y = _paired(groups[0], groups[1])
        rho, p = spearman(x, y)
        return {"kind": kind, "statistic": rho, "n": len(x), "p_value": p}
    if kind == "anova":
        f_stat, dfb, dfw, p = one_way_anova(*cleaned)
        return {"kind": kind, "statistic": f_stat, "df_between": dfb, "df_within": dfw,
                "p_value": p}
    raise ArityMismatch(f"unknown test kind {kind!r}")


# ---------------------------------------------------------------------------
# dataset integration
# ---------------------------------------------------------------------------

def load_numeric_columns(warehouse: Warehouse, blobs: BlobStore, dataset_id: str,
                         version: int) -> tuple[dict[str, list[Optional[float]]], dict]:
    from . import cohort

    manifest = cohort.get_dataset(warehouse, dataset_id, version)
    if manifest["state"] != "complete":
        raise NotFound(f"dataset {dataset_id} v{version} is not complete")
    bucket, _, key = manifest["files"]["numeric"].partition("/")
    reader = csv.reader(io.StringIO(blobs.get(bucket, key).decode()))
    rows = list(reader)
    header, data = rows[0], rows[1:]
    variable_names = [v["name"] for v in manifest["spec"]["variables"]]
    columns: dict[str, list[Optional[float]]] = {name: [] for name in variable_names}
    for row in data:
        for name in variable_names:
            cell = row[header.index(name)]
            try:
                columns[name].append(float(cell))
            except ValueError:
                columns[name].append(None)
    return columns, manifest


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summary_csv(rows: list[dict]) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(SUMMARY_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in SUMMARY_COLUMNS])
    return out.getvalue().encode()


def correlation_csv(corr: dict) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["variable"] + corr["variables"])
    for name, row in zip(corr["variables"], corr["matrix"]):
        writer.writerow([name] + [_fmt(v) for v in row])
    return out.getvalue().encode()


def tests_csv(results: list[dict]) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["kind", "variables", "statistic", "df", "df_between", "df_within",
                     "n", "p_value"])
    for r in results:
        writer.writerow([r.get("kind"), ";".join(r.get("variables", ())),
                         _fmt(r.get("statistic")), _fmt(r.get("df")),
                         _fmt(r.get("df_between")), _fmt(r.get("df_within")),
                         _fmt(r.get("n")), _fmt(r.get("p_value"))])
    return out.getvalue().encode()


AUTO_CORRELATION_CAP = 16  # auto-triggered maps stay linear in variable count


def handle_analyze_job(body: dict, warehouse: Warehouse, blobs: BlobStore) -> None:
    """Auto-triggered summary + correlation map for a freshly created dataset.

    The automatic correlation map covers the first AUTO_CORRELATION_CAP
    variables (full pairwise maps are quadratic; users request wider maps
    explicitly through the test endpoint).
    """
    dataset_id, version = body["dataset_id"], body["version"]
    columns, manifest = load_numeric_columns(warehouse, blobs, dataset_id, version)
    summary_rows = summarize(columns)
    corr_columns = {name: columns[name]
                    for name in list(columns)[:AUTO_CORRELATION_CAP]}
    try:
        corr = correlate(corr_columns)
    except InsufficientData:
        corr = {"variables": list(corr_columns), "matrix": []}

    base = f"{dataset_id}/v{version}/analysis"
    keys = {"summary": f"{DATASET_BUCKET}/{base}/summary.csv",
            "correlation": f"{DATASET_BUCKET}/{base}/correlation.csv"}
    blobs.put(DATASET_BUCKET, f"{base}/summary.csv", summary_csv(summary_rows),
              if_absent=True)
    blobs.put(DATASET_BUCKET, f"{base}/correlation.csv", correlation_csv(corr),
              if_absent=True)

    analysis_id = f"auto-{dataset_id}-v{version}"
    with warehouse.transaction() as conn:
        conn.execute(
            "INSERT OR IGNORE INTO analyses (analysis_id, dataset_id, version, kind, spec,"
            " result, blob_keys, created_at) VALUES (?,?,?,?,?,?,?,?)",
            (analysis_id, dataset_id, version, "auto",
             json.dumps({"variables": list(columns)}),
             json.dumps({"summary": summary_rows, "correlation": corr}, sort_keys=True),
             json.dumps(keys, sort_keys=True), utc_now_ms()))
        conn.execute(
            "INSERT OR IGNORE INTO provenance (subject_kind, subject_id, parent_kind,"
            " parent_id, code_version, created_at) VALUES (?,?,?,?,?,?)",
            ("model-artifact", analysis_id, "dataset", f"{dataset_id}/v{version}",
             "analysis", utc_now_ms()))


def run_dataset_test(warehouse: Warehouse, blobs: BlobStore, dataset_id: str, version: int,
                     kind: str, variables: Sequence[str],
                     group_by: Optional[str] = None) -> dict:
    """User-specified test over dataset columns. With ``group_by``, the first
    variable is split into groups by the grouping column's values.
    """
    columns, _ = load_numeric_columns(warehouse, blobs, dataset_id, version)
    missing = [v for v in variables if v not in columns]
    if missing or (group_by is not None and group_by not in columns):
        raise NotFound(f"unknown variable(s): {', '.join(missing or [group_by])}")

    if group_by is not None:
        if len(variables) != 1:
            raise ArityMismatch("grouped tests take exactly 1 measured variable")
        measured = columns[variables[0]]
        labels = sorted({g for g in columns[group_by] if g is not None})
        groups = [[v for v, g in zip(measured, columns[group_by])
                   if g == label and v is not None] for label in labels]
        groups = [g for g in groups if g]  # groups with no observations drop out
    else:
        groups = [columns[v] for v in variables]

    result = run_test(kind, groups)
    result["variables"] = list(variables) + ([group_by] if group_by else [])

    material = json.dumps({"d": dataset_id, "v": version, "k": kind,
                           "vars": result["variables"]}, sort_keys=True)
    analysis_id = "test-" + hashlib.sha256(material.encode()).hexdigest()[:16]
    key = f"{dataset_id}/v{version}/analysis/{analysis_id}.csv"
    blobs.put(DATASET_BUCKET, key, tests_csv([result]), if_absent=True)
    with warehouse.transaction() as conn:
        conn.execute(
            "INSERT OR IGNORE INTO analyses (analysis_id, dataset_id, version, kind, spec,"
            " result, blob_keys, created_at) VALUES (?,?,?,?,?,?,?,?)",
            (analysis_id, dataset_id, version, kind,
             json.dumps({"variables": result["variables"]}, sort_keys=True),
             json.dumps(result, sort_keys=True),
             json.dumps({"test": f"{DATASET_BUCKET}/{key}"}, sort_keys=True), utc_now_ms()))
    result["analysis_id"] = analysis_id
    return result


def export_results(warehouse: Warehouse, blobs: BlobStore, analysis_id: str) -> dict[str, bytes]:
    """Stable CSV export of a stored analysis; re-export is byte-identical."""
    row = warehouse.one("SELECT * FROM analyses WHERE analysis_id = ?", (analysis_id,))
    if row is None:
        raise NotFound(f"analysis {analysis_id}")
    out = {}
    for name, path in json.loads(row["blob_keys"]).items():
        bucket, _, key = path.partition("/")
        out[name] = blobs.get(bucket, key)
    return out


def get_analyses(warehouse: Warehouse, dataset_id: str, version: int) -> list[dict]:
    rows = warehouse.query(
        "SELECT analysis_id, kind, result, blob_keys, created_at FROM analyses "
        "WHERE dataset_id = ? AND version = ? ORDER BY created_at, analysis_id",
        (dataset_id, version))
    return [{"analysis_id": r["analysis_id"], "kind": r["kind"],
             "result": json.loads(r["result"]) if r["result"] else None,
             "files": json.loads(r["blob_keys"]) if r["blob_keys"] else {},
             "created_at": r["created_at"]} for r in rows]
