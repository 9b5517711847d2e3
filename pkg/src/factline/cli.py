"""Command-line interface: synthetic corpus tools, workers, the API server,
the seeded demo deployment, and the benchmark suite.
"""

from __future__ import annotations

import json
import multiprocessing
import threading
from pathlib import Path

import click

from . import bench as bench_mod
from . import etl as etl_mod
from . import ingest
from .deploy import Deployment, seed_demo, worker_main
from .synth import SyntheticSource, calibrate, load_profiles


@click.group()
def main():
    """factline: queue-driven clinical research data platform."""


def _parse_sizes(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# -- synth -----------------------------------------------------------------------

@main.group()
def synth():
    """Synthetic EHR: calibrate profiles and generate corpora."""


@synth.command("calibrate")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="Text file with one raw sample string per line.")
@click.option("--category", required=True)
@click.option("--out", required=True, type=click.Path())
def synth_calibrate(input_path, category, out):
    sample = [line for line in Path(input_path).read_text().splitlines() if line]
    profile = calibrate(category, sample)
    Path(out).write_text(json.dumps({
        "category": profile.category,
        "string_len_mean": profile.string_len_mean,
        "string_len_std": profile.string_len_std,
        "vocabulary": list(profile.vocabulary),
    }, indent=2))
    click.echo(f"calibrated {category}: mean={profile.string_len_mean:.2f} "
               f"std={profile.string_len_std:.2f} tokens={len(profile.vocabulary)}")


@synth.command("generate")
@click.option("--patients", required=True, type=int)
@click.option("--seed", default=7, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--profile", default="desk", help="Packaged profile name or JSON path.")
@click.option("--malformed", default=None, type=float,
              help="Fraction of rows to corrupt (default: profile setting).")
def synth_generate(patients, seed, out, profile, malformed):
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = SyntheticSource(load_profiles(profile), seed, patients,
                             malformed_fraction=malformed)
    total = 0
    with (out_dir / "rows.jsonl").open("w") as fh:
        for page in source.iter_rows(source.patient_ids(), page_size=1000):
            for row in page:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                total += 1
    (out_dir / "corpus.json").write_text(json.dumps({
        "profile": profile, "seed": seed, "patients": patients, "rows": total}, indent=2))
    click.echo(f"wrote {total} rows for {patients} patients to {out_dir}")


# -- workers and services ------------------------------------------------------------

@main.command()
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--queues", default=None, help="Comma-separated queue names (default: all).")
@click.option("--until-idle", is_flag=True, help="Exit when all queues drain.")
def worker(data_dir, queues, until_idle):
    """Run one worker process against a deployment's data directory."""
    queue_list = queues.split(",") if queues else None
    worker_main(data_dir, queues=queue_list, stop_when_idle=until_idle)


@main.group()
def etl():
    """Translator operations."""


@etl.command("run")
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--translator", "translator_id", required=True)
@click.option("--replicas", default=1, type=int)
@click.option("--until-idle", is_flag=True)
def etl_run(data_dir, translator_id, replicas, until_idle):
    """Run N replicas of one translator's worker."""
    deployment = Deployment(data_dir)
    config = etl_mod.load_translator_config(deployment.warehouse, translator_id)
    queue = ingest.etl_queue(config.category)
    ctx = multiprocessing.get_context("fork")
    procs = [ctx.Process(target=worker_main, args=(data_dir, [queue], until_idle))
             for _ in range(replicas)]
    for p in procs:
        p.start()
    click.echo(f"{replicas} replica(s) of {translator_id} consuming {queue}")
    for p in procs:
        p.join()


@etl.command("reprocess")
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--translator", "translator_id", required=True)
@click.option("--from-version", required=True, type=int)
def etl_reprocess(data_dir, translator_id, from_version):
    deployment = Deployment(data_dir)
    batch_id = etl_mod.reprocess(deployment.warehouse, deployment.broker,
                                 translator_id, from_version)
    click.echo(f"reprocess batch {batch_id} published")


def _serve(deployment: Deployment, host: str, port: int, workers: int) -> None:
    import uvicorn

    from .api import create_app

    for _ in range(workers):
        thread = threading.Thread(
            target=deployment.run_worker,
            kwargs={"stop_when_idle": False, "raise_on_error": False}, daemon=True)
        thread.start()
    uvicorn.run(create_app(deployment), host=host, port=port, log_level="warning")


@main.command()
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
@click.option("--workers", default=2, type=int, help="In-process worker threads.")
def serve(data_dir, host, port, workers):
    """Serve the REST API over an existing deployment."""
    _serve(Deployment(data_dir), host, port, workers)


@main.command()
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8765, type=int)
@click.option("--seed", default=424242, type=int)
@click.option("--patients", default=10, type=int)
@click.option("--workers", default=2, type=int)
def demo(data_dir, host, port, seed, patients, workers):
    """Seed a demo deployment (idempotent) and serve it."""
    deployment = Deployment(data_dir)
    marker = Path(data_dir) / "demo.json"
    if marker.exists():
        info = json.loads(marker.read_text())
    else:
        info = seed_demo(deployment, master_seed=seed, patients=patients)
        marker.write_text(json.dumps(info, indent=2))
    click.echo(f"demo ready: dataset {info['dataset_id']} v{info['dataset_version']}")
    for name, token in info["tokens"].items():
        click.echo(f"  token[{name}] = {token}")
    click.echo(f"serving on http://{host}:{port}")
    _serve(deployment, host, port, workers)


# -- bench ------------------------------------------------------------------------

@main.group()
def bench():
    """Scaling benchmarks; all emit {scenario,size,replicate,wall_ms,cpu_ms,peak_mem_bytes}."""


@bench.command("ingest")
@click.option("--sizes", default="10,20,50,100,200")
@click.option("--workers", default=2, type=int)
@click.option("--replicates", default=1, type=int)
@click.option("--seed", default=7, type=int)
@click.option("--profile", default="desk", help="desk (default) or paper scale.")
@click.option("--out", required=True, type=click.Path())
@click.option("--work-dir", default=None, type=click.Path())
def bench_ingest_cmd(sizes, workers, replicates, seed, profile, out, work_dir):
    work_dir = work_dir or (Path(out).parent / "bench-work")
    rows = bench_mod.bench_ingest(work_dir, _parse_sizes(sizes), workers=workers,
                                  replicates=replicates, seed=seed, profile=profile)
    bench_mod.write_metrics(out, rows)
    for line in bench_mod.throughput_report(rows):
        click.echo(line)
    fit = bench_mod.fit_report(rows, "ingest")
    click.echo(f"wall-time fit: slope={fit['slope']:.2f} ms/patient R2={fit['r2']:.4f}")


@bench.command("scaleout")
@click.option("--patients", default=1000, type=int)
@click.option("--worker-sets", default="1,2")
@click.option("--seed", default=7, type=int)
@click.option("--profile", default="desk")
@click.option("--out", required=True, type=click.Path())
@click.option("--work-dir", default=None, type=click.Path())
def bench_scaleout_cmd(patients, worker_sets, seed, profile, out, work_dir):
    work_dir = work_dir or (Path(out).parent / "bench-work")
    rows = bench_mod.bench_scale_out(work_dir, patients, _parse_sizes(worker_sets),
                                     seed=seed, profile=profile)
    bench_mod.write_metrics(out, rows)
    hashes = {r["size"]: r["state_hash"] for r in rows}
    identical = len(set(hashes.values())) == 1
    for r in rows:
        click.echo(f"workers={r['size']}: {r['wall_ms']:.0f} ms")
    click.echo(f"warehouse state identical across worker counts: {identical}")


@bench.command("dataset")
@click.option("--variables", default="1,5,10,50,100")
@click.option("--rows", default=2000, type=int)
@click.option("--seed", default=7, type=int)
@click.option("--workers", default=2, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--work-dir", default=None, type=click.Path())
def bench_dataset_cmd(variables, rows, seed, workers, out, work_dir):
    work_dir = work_dir or (Path(out).parent / "bench-work")
    metric_rows, handles = bench_mod.bench_dataset(work_dir, _parse_sizes(variables),
                                                   rows=rows, seed=seed, workers=workers)
    bench_mod.write_metrics(out, metric_rows)
    Path(str(out) + ".handles.json").write_text(json.dumps(handles, indent=2))
    fit = bench_mod.fit_report(metric_rows, "dataset")
    click.echo(f"wall-time fit: slope={fit['slope']:.2f} ms/variable R2={fit['r2']:.4f}")


@bench.command("analysis")
@click.option("--variables", default="1,5,10,50,100")
@click.option("--rows", default=2000, type=int)
@click.option("--seed", default=7, type=int)
@click.option("--workers", default=2, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--work-dir", default=None, type=click.Path())
def bench_analysis_cmd(variables, rows, seed, workers, out, work_dir):
    """Generate the datasets (unmeasured), then time the analysis stage."""
    work_dir = work_dir or (Path(out).parent / "bench-work")
    _, handles = bench_mod.bench_dataset(work_dir, _parse_sizes(variables), rows=rows,
                                         seed=seed, workers=workers)
    rows_out = bench_mod.bench_analysis(handles)
    bench_mod.write_metrics(out, rows_out)
    fit = bench_mod.fit_report(rows_out, "analysis")
    click.echo(f"wall-time fit: slope={fit['slope']:.2f} ms/variable R2={fit['r2']:.4f}")


@bench.command("fit")
@click.argument("metrics_csv", type=click.Path(exists=True))
@click.option("--scenario", default=None)
@click.option("--y-field", default="wall_ms")
def bench_fit_cmd(metrics_csv, scenario, y_field):
    """Least-squares fit summary (slope, intercept, R2) for a metrics CSV."""
    rows = bench_mod.read_metrics(metrics_csv)
    scenarios = sorted({r["scenario"] for r in rows}) if scenario is None else [scenario]
    for name in scenarios:
        fit = bench_mod.fit_report(rows, name, y_field=y_field)
        click.echo(f"{name}: slope={fit['slope']:.3f} intercept={fit['intercept']:.1f} "
                   f"R2={fit['r2']:.4f}")


if __name__ == "__main__":
    main()
