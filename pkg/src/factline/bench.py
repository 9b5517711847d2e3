"""Benchmark harness: ingestion scaling in patients and workers, dataset
generation scaling in variables, and analysis scaling, with machine-readable
metrics CSVs ({scenario, size, replicate, wall_ms, cpu_ms, peak_mem_bytes}).

Workers are separate OS processes coordinating only through the broker and
stores; "nodes" are emulated as worker-process groups on one machine. All
runs are seeded.
"""

from __future__ import annotations

import copy
import csv
import multiprocessing
import time
from pathlib import Path
from typing import Optional, Sequence

import psutil

from . import analysis, cohort, ingest
from .cohort import DatasetSpec, VariableDef
from .deploy import Deployment, worker_main
from .errors import InsufficientData
from .synth import load_profiles, patient_id_for

METRIC_FIELDS = ["scenario", "size", "replicate", "wall_ms", "cpu_ms", "peak_mem_bytes"]

PAPER_REFERENCE_PATIENTS_PER_HOUR = 15_000  # published deployment, reference only


class WorkerPool:
    """Worker processes plus their resource telemetry (peak RSS, CPU time)."""

    def __init__(self, data_dir: str | Path, count: int,
                 queues: Optional[list[str]] = None) -> None:
        ctx = multiprocessing.get_context("fork")
        self.processes = [
            ctx.Process(target=worker_main, args=(str(data_dir), queues), daemon=True)
            for _ in range(count)]
        for p in self.processes:
            p.start()
        self._handles = [psutil.Process(p.pid) for p in self.processes]
        self.peak_rss = [0] * count
        self.cpu_seconds = [0.0] * count

    def sample(self) -> None:
        for i, handle in enumerate(self._handles):
            try:
                # unique set size: a worker's own memory, not the shared
                # file-backed pages of the (growing) mmap'd database
                try:
                    mem = handle.memory_full_info().uss
                except (psutil.AccessDenied, AttributeError):
                    mem = handle.memory_info().rss
                self.peak_rss[i] = max(self.peak_rss[i], mem)
                times = handle.cpu_times()
                self.cpu_seconds[i] = max(self.cpu_seconds[i], times.user + times.system)
            except psutil.NoSuchProcess:
                pass

    def stop(self) -> None:
        self.sample()
        for p in self.processes:
            p.terminate()
        for p in self.processes:
            p.join(timeout=10)

    @property
    def max_peak_rss(self) -> int:
        return max(self.peak_rss)

    @property
    def total_cpu_seconds(self) -> float:
        return sum(self.cpu_seconds)


def _drain(deployment: Deployment, pool: Optional[WorkerPool],
           queues: Optional[list[str]] = None, poll: float = 0.05,
           timeout: float = 3600.0) -> None:
    queues = queues or deployment.all_queues()
    deadline = time.monotonic() + timeout
    while True:
        if pool is not None:
            pool.sample()
        if deployment.broker.idle(queues):
            return
        if time.monotonic() > deadline:
            raise TimeoutError(f"queues {queues} did not drain within {timeout}s")
        time.sleep(poll)


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        writer.writerows({k: row[k] for k in METRIC_FIELDS} for row in rows)


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> dict:
    """Least-squares line with R^2."""
    n = len(xs)
    sx, sy = sum(xs), sum(ys)
    sxx = sum(x * x for x in xs)
    sxy = sum(x * y for x, y in zip(xs, ys))
    denom = n * sxx - sx * sx
    slope = (n * sxy - sx * sy) / denom
    intercept = (sy - slope * sx) / n
    mean_y = sy / n
    ss_tot = sum((y - mean_y) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return {"slope": slope, "intercept": intercept, "r2": r2}


def fit_report(rows: Sequence[dict], scenario: str, y_field: str = "wall_ms") -> dict:
    points = [(float(r["size"]), float(r[y_field])) for r in rows
              if r["scenario"] == scenario]
    return linear_fit([p[0] for p in points], [p[1] for p in points])


# ---------------------------------------------------------------------------
# ingestion benchmarks
# ---------------------------------------------------------------------------

def _ingest_once(run_dir: Path, patients: int, workers: int, seed: int,
                 profile: str = "desk", patients_per_shard: int = 25) -> dict:
    deployment = Deployment(run_dir)
    source_spec = {"source_id": "bench-ehr", "profile": profile, "master_seed": seed,
                   "patient_count": patients, "malformed_fraction": 0.0}
    ids = [patient_id_for(i) for i in range(patients)]
    pool = WorkerPool(run_dir, workers)
    try:
        started = time.perf_counter()
        controller = psutil.Process()
        cpu_before = controller.cpu_times()
        ingest.request_pull(deployment.warehouse, deployment.broker, source_spec, ids,
                            patients_per_shard=patients_per_shard,
                            block_size=deployment.block_size)
        _drain(deployment, pool,
               queues=[ingest.PULL_QUEUE] + deployment.etl_queues())
        wall = time.perf_counter() - started
        cpu_after = controller.cpu_times()
    finally:
        pool.stop()
    controller_cpu = (cpu_after.user + cpu_after.system
                      - cpu_before.user - cpu_before.system)
    return {
        "wall_ms": round(wall * 1000, 3),
        "cpu_ms": round((pool.total_cpu_seconds + controller_cpu) * 1000, 3),
        "peak_mem_bytes": pool.max_peak_rss,
        "state_hash": deployment.warehouse.state_hash(),
        "facts": deployment.warehouse.fact_count(),
    }


def bench_ingest(work_dir: str | Path, sizes: Sequence[int], workers: int = 2,
                 replicates: int = 1, seed: int = 7, profile: str = "desk") -> list[dict]:
    """Ingestion scaling in patient count, fixed worker pool."""
    work_dir = Path(work_dir)
    rows = []
    for size in sizes:
        for rep in range(replicates):
            run = _ingest_once(work_dir / f"ingest-{size}-{rep}", size, workers,
                               seed=seed + rep, profile=profile)
            rows.append({"scenario": "ingest", "size": size, "replicate": rep, **run})
    return rows


def bench_scale_out(work_dir: str | Path, patients: int, worker_sets: Sequence[int],
                    seed: int = 7, profile: str = "desk") -> list[dict]:
    """Ingestion of a fixed corpus across growing worker pools; the warehouse
    state hash is recorded so runs can be proven identical.
    """
    work_dir = Path(work_dir)
    rows = []
    for workers in worker_sets:
        run = _ingest_once(work_dir / f"scaleout-{workers}", patients, workers,
                           seed=seed, profile=profile)
        rows.append({"scenario": "scaleout", "size": workers, "replicate": 0, **run})
    return rows


def throughput_report(rows: Sequence[dict]) -> list[str]:
    """Patients/hour extrapolation next to the published reference figure
    (reference only: hardware differs)."""
    lines = []
    for row in rows:
        if row["scenario"] != "ingest":
            continue
        patients_per_hour = float(row["size"]) / (float(row["wall_ms"]) / 3_600_000.0)
        lines.append(
            f"ingest size={row['size']}: {patients_per_hour:,.0f} patients/hour "
            f"(published deployment reference: {PAPER_REFERENCE_PATIENTS_PER_HOUR:,}/hour)")
    return lines


# ---------------------------------------------------------------------------
# dataset and analysis benchmarks
# ---------------------------------------------------------------------------

def bench_profile_config(rows_per_patient: tuple[int, int] = (18, 36)) -> dict:
    """Compact synthetic profile for dataset benchmarks: the measured cost is
    variable evaluation, so patients carry few entries each."""
    config = copy.deepcopy(load_profiles("desk"))
    config["name"] = "bench-mini"
    config["entries_per_patient"] = list(rows_per_patient)
    per_patient = {"encounters": [1, 1], "vitals": [10, 20], "labs": [3, 6],
                   "diagnoses": [2, 5], "medications": [2, 4], "waveforms": [0, 0]}
    for category, rng in per_patient.items():
        config["categories"][category]["per_patient"] = rng
    return config


_BENCH_OPS = [
    ("Mean", "heart_rate"), ("Max", "systolic_bp"), ("Min", "diastolic_bp"),
    ("Count", "diagnosis.icd10"), ("Exists", "medication.form"),
    ("Mean", "respiratory_rate"), ("Max", "temperature"), ("Count", "medication.form"),
    ("Mean", "spo2"), ("Right-Like", "diagnosis.icd10"),
]


def make_bench_variables(count: int) -> tuple[VariableDef, ...]:
    """Unique variables that all require some computation (never identity)."""
    out = []
    for i in range(count):
        op, concept = _BENCH_OPS[i % len(_BENCH_OPS)]
        value = "O" if op == "Right-Like" else None
        out.append(VariableDef(name=f"v{i:04d}", data_source={"concept": concept},
                               operation=op, value=value))
    return tuple(out)


def prepare_bench_warehouse(run_dir: Path, rows: int, seed: int, workers: int = 2,
                            deployment: Optional[Deployment] = None) -> Deployment:
    deployment = deployment or Deployment(run_dir)
    profile_path = Path(run_dir) / "bench-profile.json"
    import json as _json

    profile_path.write_text(_json.dumps(bench_profile_config()))
    spec = {"source_id": "bench-mini", "profile": str(profile_path), "master_seed": seed,
            "patient_count": rows, "malformed_fraction": 0.0}
    ids = [patient_id_for(i) for i in range(rows)]
    pool = WorkerPool(run_dir, workers)
    try:
        ingest.request_pull(deployment.warehouse, deployment.broker, spec, ids,
                            patients_per_shard=100)
        _drain(deployment, pool)
    finally:
        pool.stop()
    return deployment


def bench_dataset(work_dir: str | Path, variable_counts: Sequence[int], rows: int = 2000,
                  seed: int = 7, workers: int = 2) -> tuple[list[dict], list[dict]]:
    """Dataset generation scaling in variable count, rows held constant.
    Returns (metric rows, generated dataset handles for the analysis bench).
    """
    work_dir = Path(work_dir)
    run_dir = work_dir / "datasetbench"
    deployment = prepare_bench_warehouse(run_dir, rows, seed, workers)

    metric_rows, handles = [], []
    pool = WorkerPool(run_dir, workers, queues=[cohort.DATASET_QUEUE])
    try:
        for count in variable_counts:
            spec = DatasetSpec(name=f"bench-{count}", project_id="bench",
                               variables=make_bench_variables(count))
            pool.sample()
            cpu_before = pool.total_cpu_seconds
            started = time.perf_counter()
            dataset_id, version = cohort.launch_dataset(
                deployment.warehouse, deployment.blobs, deployment.broker,
                deployment.registry, spec, created_by="bench")
            _drain(deployment, pool, queues=[cohort.DATASET_QUEUE])
            wall = time.perf_counter() - started
            pool.sample()
            metric_rows.append({"scenario": "dataset", "size": count, "replicate": 0,
                                "wall_ms": round(wall * 1000, 3),
                                "cpu_ms": round((pool.total_cpu_seconds - cpu_before)
                                                * 1000, 3),
                                "peak_mem_bytes": pool.max_peak_rss})
            handles.append({"dataset_id": dataset_id, "version": version,
                            "variables": count, "data_dir": str(run_dir)})
    finally:
        pool.stop()
    return metric_rows, handles


def bench_analysis(handles: Sequence[dict]) -> list[dict]:
    """Analysis wall time per variable count over the datasets generated by
    bench_dataset (an empty dataset is an error, not a crash)."""
    rows = []
    for handle in handles:
        deployment = Deployment(handle["data_dir"])
        manifest = cohort.get_dataset(deployment.warehouse, handle["dataset_id"],
                                      handle["version"])
        if not manifest["row_count"]:
            raise InsufficientData(
                f"dataset {handle['dataset_id']} v{handle['version']} has no rows")
        controller = psutil.Process()
        before = controller.cpu_times()
        started = time.perf_counter()
        analysis.handle_analyze_job({"dataset_id": handle["dataset_id"],
                                     "version": handle["version"]},
                                    deployment.warehouse, deployment.blobs)
        wall = time.perf_counter() - started
        after = controller.cpu_times()
        rows.append({"scenario": "analysis", "size": handle["variables"], "replicate": 0,
                     "wall_ms": round(wall * 1000, 3),
                     "cpu_ms": round((after.user + after.system
                                      - before.user - before.system) * 1000, 3),
                     "peak_mem_bytes": controller.memory_info().rss})
    return rows
