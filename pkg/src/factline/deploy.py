"""Deployment wiring: opens the shared resources, syncs packaged translator
configs and the concept registry, registers queues, and runs workers.

A deployment is fully described by its data directory; worker processes in
other OS processes rebuild the same object from the path and coordinate purely
through the broker and stores.
"""

from __future__ import annotations

import json
import time
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import etl, ingest
from .audit import AuditLog
from .broker import Broker
from .errors import FactlineError
from .model import ConceptDef, ConceptRegistry, ValueKind
from .stores import BlobStore, Warehouse
from .synth import SyntheticSource, load_profiles

DATASET_QUEUE = "datasets"
ANALYSIS_QUEUE = "analysis"


def _packaged_translator_files() -> list[dict]:
    base = resources.files("factline").joinpath("config/translators")
    configs = []
    for entry in sorted(base.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            configs.append(json.loads(entry.read_text()))
    return configs


class Deployment:
    def __init__(self, data_dir: str | Path, block_size: int = ingest.DEFAULT_BLOCK_SIZE):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.warehouse = Warehouse(self.data_dir / "warehouse.db")
        self.broker = Broker(self.data_dir / "broker.db")
        self.blobs = BlobStore(self.data_dir / "blobs")
        self.audit = AuditLog(self.warehouse)
        self.block_size = block_size
        self.sources: dict[str, SyntheticSource] = {}
        self._shard_sources: dict[str, SyntheticSource] = {}  # pull-shard worker cache

        self._sync_translator_configs()
        self.registry = self._build_registry()
        self._register_queues()

    # -- configuration ---------------------------------------------------------

    def _sync_translator_configs(self) -> None:
        """Packaged JSON configs seed the shared table; a runtime version bump
        in the table wins over an older file (hot reload goes through the DB).
        """
        for doc in _packaged_translator_files():
            current = self.warehouse.one(
                "SELECT version FROM translator_configs WHERE translator_id = ?",
                (doc["translator_id"],))
            if current is None or doc["version"] > current[0]:
                etl.save_translator_config(self.warehouse, etl.TranslatorConfig(
                    translator_id=doc["translator_id"], version=doc["version"],
                    category=doc["category"], knowledge=doc.get("knowledge", {}),
                    halt=bool(doc.get("halt", False))))

    def _build_registry(self) -> ConceptRegistry:
        registry = ConceptRegistry()
        with resources.as_file(
                resources.files("factline").joinpath("config/concepts.json")) as p:
            registry.load_file(p)
        override = self.data_dir / "concepts.json"
        if override.exists():
            registry.load_file(override)
        # medication ingredient concepts come from the translator lexicon, so a
        # knowledge update introduces its concepts in the same step
        try:
            meds = etl.load_translator_config(self.warehouse, "medications")
            for ingredient in meds.knowledge.get("ingredients", ()):
                registry.register(ConceptDef(
                    name=f"medication.{ingredient}", value_kind=ValueKind.NUMBER, unit="mg"))
        except FactlineError:
            pass
        return registry

    def reload_concepts(self) -> None:
        self.registry = self._build_registry()

    def _register_queues(self) -> None:
        for row in self.warehouse.query("SELECT DISTINCT category FROM translator_configs"):
            self.broker.register(ingest.etl_queue(row[0]))
        self.broker.register(ingest.PULL_QUEUE)
        self.broker.register(DATASET_QUEUE)
        self.broker.register(ANALYSIS_QUEUE)

    def etl_queues(self) -> list[str]:
        return sorted(q for q in self.broker.queues() if q.startswith("etl."))

    def all_queues(self) -> list[str]:
        return [ingest.PULL_QUEUE] + self.etl_queues() + [DATASET_QUEUE, ANALYSIS_QUEUE]

    # -- sources ------------------------------------------------------------------

    def add_synthetic_source(self, master_seed: int, patient_count: int,
                             profile: str = "desk",
                             malformed_fraction: Optional[float] = None,
                             source_id: Optional[str] = None) -> SyntheticSource:
        source = SyntheticSource(load_profiles(profile), master_seed, patient_count,
                                 malformed_fraction=malformed_fraction)
        self.sources[source_id or source.source_id] = source
        return source

    # -- ingestion conveniences ------------------------------------------------------

    def pull(self, source_id: str, patient_ids: Sequence[str],
             categories: Optional[Sequence[str]] = None,
             project_id: Optional[str] = None) -> str:
        batch_id = ingest.start_pull(self.warehouse, self.blobs, self.sources, source_id,
                                     patient_ids, categories, project_id,
                                     page_size=self.block_size)
        ingest.split_request(self.warehouse, self.broker, batch_id,
                             block_size=self.block_size)
        return batch_id

    # -- worker loop --------------------------------------------------------------

    def _halted_categories(self) -> set[str]:
        return {r[0] for r in self.warehouse.query(
            "SELECT category FROM translator_configs WHERE halt = 1")}

    def handle_job(self, envelope) -> None:
        kind = envelope.kind
        if kind == "translate-block":
            etl.process_block(envelope.body, self.warehouse, self.registry, audit=self.audit)
        elif kind == "pull-shard":
            ingest.handle_pull_shard(envelope.body, self.warehouse, self.blobs,
                                     self.broker, self._shard_sources)
        elif kind in ("eval-variable", "join-dataset"):
            from . import cohort  # lazy: ETL workers should not pay for unused stages

            if kind == "eval-variable":
                cohort.handle_eval_job(envelope.body, self.warehouse, self.blobs, self.broker,
                                       self.registry)
            else:
                cohort.handle_join_job(envelope.body, self.warehouse, self.blobs, self.broker,
                                       self.registry)
        elif kind == "analyze-dataset":
            from . import analysis

            analysis.handle_analyze_job(envelope.body, self.warehouse, self.blobs)
        else:
            raise FactlineError(f"no handler for job kind {kind!r}")

    def run_worker(self, queues: Optional[Sequence[str]] = None, stop_when_idle: bool = True,
                   max_jobs: Optional[int] = None, lease: float = 60.0,
                   poll: float = 0.005, fail_hook=None, raise_on_error: bool = True) -> int:
        """Service loop: consume, process, ack; nack on infrastructure errors.
        Data problems never raise out of handlers (they become QA rows), so a
        nack here always means the environment, not the payload.
        """
        queues = list(queues) if queues is not None else self.all_queues()
        processed = 0
        while True:
            halted = self._halted_categories()
            consumable = [q for q in queues
                          if not (q.startswith("etl.") and q[4:] in halted)]
            progressed = False
            for queue in consumable:
                envelope = self.broker.consume(queue, lease)
                if envelope is None:
                    continue
                progressed = True
                if fail_hook is not None and fail_hook(envelope):
                    # injected crash: requeue as a lease expiry would
                    self.broker.nack(envelope.job_id, envelope.receipt)
                    continue
                try:
                    self.handle_job(envelope)
                except Exception:
                    self.broker.nack(envelope.job_id, envelope.receipt)
                    if raise_on_error:
                        raise
                    continue
                self.broker.ack(envelope.job_id, envelope.receipt)
                processed += 1
                if max_jobs is not None and processed >= max_jobs:
                    return processed
            if not progressed:
                if stop_when_idle and self.broker.idle(consumable):
                    return processed
                time.sleep(poll)

    def run_until_idle(self, queues: Optional[Sequence[str]] = None) -> int:
        return self.run_worker(queues=queues, stop_when_idle=True)


def worker_main(data_dir: str, queues: Optional[list[str]] = None,
                stop_when_idle: bool = False, lease: float = 60.0) -> None:
    """Entry point for worker processes: rebuild the deployment from its data
    directory and serve jobs until terminated.
    """
    deployment = Deployment(data_dir)
    deployment.run_worker(queues=queues, stop_when_idle=stop_when_idle, lease=lease,
                          raise_on_error=False)


DEMO_TOKENS = {
    "admin": "demo-admin-token",
    "dr-alpha": "demo-alpha-token",
    "dr-beta": "demo-beta-token",
    "svc-worker": "demo-worker-token",
}


def seed_demo(deployment: Deployment, master_seed: int = 424242, patients: int = 10,
              malformed_fraction: float = 0.04) -> dict:
    """One-command demo deployment: protocols, projects, users with fixed
    tokens, an ingested synthetic corpus (with a few QA rows to mitigate),
    and one generated dataset with its automatic analysis.
    """
    from . import accounts, cohort

    accounts.create_protocol(deployment.warehouse, "P-alpha", "Peripartum Hypertension Outcomes")
    accounts.create_protocol(deployment.warehouse, "P-beta", "Respiratory Illness Registry")
    accounts.create_protocol(deployment.warehouse, "P-gamma", "Chronic Pain Cohorts")
    accounts.create_project(deployment.warehouse, "proj-alpha", "P-alpha", "BP after delivery")
    accounts.create_project(deployment.warehouse, "proj-beta", "P-beta", "Flu season load")
    accounts.create_project(deployment.warehouse, "proj-gamma", "P-gamma", "Analgesic use")
    accounts.create_user(deployment.warehouse, "admin", "Platform Admin",
                         {"admin", "researcher", "qa"}, {"P-alpha", "P-beta", "P-gamma"},
                         token=DEMO_TOKENS["admin"])
    accounts.create_user(deployment.warehouse, "dr-alpha", "Dr. Alpha",
                         {"researcher", "qa"}, {"P-alpha"}, token=DEMO_TOKENS["dr-alpha"])
    accounts.create_user(deployment.warehouse, "dr-beta", "Dr. Beta",
                         {"researcher", "qa"}, {"P-beta"}, token=DEMO_TOKENS["dr-beta"])
    accounts.create_user(deployment.warehouse, "svc-worker", "Worker Service",
                         {"worker"}, set(), token=DEMO_TOKENS["svc-worker"])

    source = deployment.add_synthetic_source(master_seed, patients,
                                             malformed_fraction=malformed_fraction,
                                             source_id="demo-ehr")
    batch_id = deployment.pull("demo-ehr", source.patient_ids(), project_id="proj-alpha")
    deployment.run_until_idle()

    spec = cohort.DatasetSpec(
        name="bp-and-dx", project_id="proj-alpha",
        variables=(
            cohort.VariableDef(name="o10_codes", data_source={"concept": "diagnosis.icd10"},
                               operation="Right-Like", value="O10."),
            cohort.VariableDef(name="hr_mean", data_source={"concept": "heart_rate"},
                               operation="Mean"),
            cohort.VariableDef(name="sbp_max", data_source={"concept": "systolic_bp"},
                               operation="Max"),
            cohort.VariableDef(name="pain", data_source={"concept": "pain_severity"},
                               operation="Identity"),
        ))
    manifest = cohort.generate_dataset(deployment, spec, created_by="admin")
    return {"tokens": dict(DEMO_TOKENS), "batch_id": batch_id,
            "dataset_id": manifest["dataset_id"], "dataset_version": manifest["version"],
            "source_id": "demo-ehr"}
