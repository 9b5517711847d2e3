"""The single networked entrance: REST API with bearer-token authentication,
protocol-scoped authorization, idempotent mutation, and append-only audit.

Every access decision (allow or deny) lands in the hash-chained audit log.
Data, projects, and researchers must share an IRB protocol for access to be
granted; administrative and broker-wire actions are role-gated instead.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Optional

from fastapi import Depends, FastAPI, Form, Request, Response, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import accounts, analysis, cohort, etl, ingest, qaqc
from .deploy import Deployment
from .errors import (
    AlreadyMitigated,
    ArityMismatch,
    BodyTooLarge,
    Conflict,
    CyclicConstraint,
    DegenerateGroups,
    FactlineError,
    InsufficientData,
    KeyExists,
    LeaseExpired,
    NotFound,
    RefusedNeedsUpgrade,
    SchemaMismatch,
    Unauthorized,
    UnknownCategory,
    UnknownConcept,
    UnknownJob,
    UnknownOperation,
    UnknownQueue,
    UnknownSource,
    UnknownTranslator,
    UnsupportedFormat,
    ValidationFailed,
)
from .model import User, utc_now_ms

ACTION_ROLES: dict[str, set[str]] = {
    "ingest.pull": {"researcher", "admin"},
    "ingest.upload": {"researcher", "admin"},
    "batch.read": {"researcher", "qa", "admin"},
    "dataset.create": {"researcher", "admin"},
    "dataset.read": {"researcher", "qa", "admin"},
    "analysis.run": {"researcher", "admin"},
    "qa.read": {"researcher", "qa", "admin"},
    "qa.mitigate": {"qa", "admin"},
    "translator.manage": {"qa", "admin"},
    "admin.manage": {"admin"},
    "audit.read": {"qa", "admin"},
    "broker.use": {"worker", "admin"},
    "meta.read": {"researcher", "qa", "admin", "worker"},
}

# actions that are governed by role alone (no data protocol applies)
PROTOCOL_FREE = {"admin.manage", "audit.read", "broker.use", "meta.read",
                 "translator.manage"}

_STATUS = {
    NotFound: 404, UnknownSource: 404, UnknownQueue: 404, UnknownJob: 404,
    UnknownTranslator: 404, UnknownCategory: 404,
    Unauthorized: 403,
    AlreadyMitigated: 409, Conflict: 409, KeyExists: 409, LeaseExpired: 409,
    RefusedNeedsUpgrade: 409,
    ValidationFailed: 422, SchemaMismatch: 422, UnsupportedFormat: 422,
    CyclicConstraint: 422, UnknownOperation: 422, UnknownConcept: 422,
    ArityMismatch: 422, BodyTooLarge: 422, InsufficientData: 422, DegenerateGroups: 422,
}


def status_for(exc: FactlineError) -> int:
    for cls, code in _STATUS.items():
        if isinstance(exc, cls):
            return code
    return 500


class AccessDenied(Exception):
    pass


def authorize(deployment: Deployment, user: User, action: str,
              resource_id: str, resource_protocol: Optional[str] = None) -> bool:
    """Allow iff the user's protocol set intersects the resource's protocol
    and the user's roles permit the action. Every decision is audited.
    """
    roles_ok = bool(user.roles & ACTION_ROLES[action])
    if action in PROTOCOL_FREE or resource_protocol == "*":
        # "*" marks listing endpoints: role check here, rows filtered per protocol
        protocol_ok = True
    elif resource_protocol is None:
        # ungoverned resource: only admins may touch it
        protocol_ok = "admin" in user.roles
    else:
        protocol_ok = resource_protocol in user.protocol_ids
    allowed = roles_ok and protocol_ok
    deployment.audit.append(user.user_id, action, resource_id,
                            "allowed" if allowed else "denied")
    return allowed


def require(deployment: Deployment, user: User, action: str, resource_id: str,
            resource_protocol: Optional[str] = None) -> None:
    if not authorize(deployment, user, action, resource_id, resource_protocol):
        raise AccessDenied(f"{action} on {resource_id}")


# -- request bodies ---------------------------------------------------------------

class PublishBody(BaseModel):
    kind: str
    body: dict = Field(default_factory=dict)
    job_id: Optional[str] = None


class ConsumeBody(BaseModel):
    lease: float = 60.0


class ReceiptBody(BaseModel):
    receipt: Optional[str] = None


class PullBody(BaseModel):
    source: str
    patient_ids: list[str]
    categories: Optional[list[str]] = None
    project_id: str


class DatasetBody(BaseModel):
    name: str
    project_id: str
    variables: list[dict]
    cohort: dict = Field(default_factory=lambda: {"all": True})
    index_event: Optional[str] = None


class MitigateBody(BaseModel):
    corrected_payload: str


class DismissBody(BaseModel):
    reason: str = ""


class TestBody(BaseModel):
    kind: str
    variables: list[str]
    group_by: Optional[str] = None


class UserBody(BaseModel):
    user_id: str
    display_name: str
    roles: list[str]
    protocol_ids: list[str] = Field(default_factory=list)


class ProtocolBody(BaseModel):
    protocol_id: str
    title: str
    active: bool = True


class ProjectBody(BaseModel):
    project_id: str
    protocol_id: str
    name: str


def create_app(deployment: Deployment) -> FastAPI:
    app = FastAPI(title="factline", version="0.1.0",
                  description="Clinical research data platform API")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    wh = deployment.warehouse

    # -- plumbing ---------------------------------------------------------------

    @app.exception_handler(FactlineError)
    async def _factline_error(request: Request, exc: FactlineError):
        return JSONResponse(status_code=status_for(exc),
                            content={"error": type(exc).__name__, "detail": str(exc)})

    @app.exception_handler(AccessDenied)
    async def _denied(request: Request, exc: AccessDenied):
        return JSONResponse(status_code=403,
                            content={"error": "Forbidden", "detail": str(exc)})

    def current_user(request: Request) -> User:
        header = request.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            raise Unauthenticated()
        user = accounts.user_by_token(wh, header.removeprefix("Bearer ").strip())
        if user is None:
            raise Unauthenticated()
        return user

    class Unauthenticated(Exception):
        pass

    @app.exception_handler(Unauthenticated)
    async def _unauthenticated(request: Request, exc: Unauthenticated):
        return JSONResponse(status_code=401,
                            content={"error": "Unauthorized",
                                     "detail": "missing or invalid bearer token"})

    def idempotent(request: Request, endpoint: str, payload: Any, produce):
        """Replay-safe mutation: the same Idempotency-Key returns the stored
        response without a second side effect; a key reused with a different
        payload is a conflict.
        """
        key = request.headers.get("Idempotency-Key")
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()
        if key:
            row = wh.one("SELECT * FROM idempotency WHERE key = ?", (key,))
            if row is not None:
                if row["request_digest"] != digest:
                    return JSONResponse(status_code=409, content={
                        "error": "IdempotencyKeyReuse",
                        "detail": "key was used with a different request body"})
                return JSONResponse(status_code=row["status"],
                                    content=json.loads(row["response"]))
        result = produce()
        if key:
            with wh.transaction() as conn:
                conn.execute(
                    "INSERT OR IGNORE INTO idempotency (key, endpoint, request_digest,"
                    " status, response, created_at) VALUES (?,?,?,?,?,?)",
                    (key, endpoint, digest, 200, json.dumps(result), utc_now_ms()))
        return result

    def batch_protocol(batch_id: str) -> Optional[str]:
        row = wh.one("SELECT project_id FROM batches WHERE batch_id = ?", (batch_id,))
        return accounts.protocol_of_project(wh, row["project_id"]) if row else None

    def qa_protocol(qa_id: str) -> Optional[str]:
        qa = qaqc.get_qa(wh, qa_id)
        if qa.pathway == "dataset-validation":
            dataset_id = qa.source_record_id.split(":", 1)[-1].split("/")[0]
            row = wh.one("SELECT project_id FROM datasets WHERE dataset_id = ? LIMIT 1",
                         (dataset_id,))
            return accounts.protocol_of_project(wh, row["project_id"]) if row else None
        record = wh.get_record(qa.source_record_id)
        return batch_protocol(record.batch_id)

    def dataset_protocol(dataset_id: str) -> Optional[str]:
        row = wh.one("SELECT project_id FROM datasets WHERE dataset_id = ? LIMIT 1",
                     (dataset_id,))
        return accounts.protocol_of_project(wh, row["project_id"]) if row else None

    # -- health and metadata -------------------------------------------------------

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/concepts")
    def concepts(user: User = Depends(current_user)):
        require(deployment, user, "meta.read", "concepts")
        out = []
        for name in deployment.registry.names():
            cdef = deployment.registry.get(name)
            out.append({"name": name, "value_kind": cdef.value_kind.value,
                        "unit": cdef.unit, "choices": list(cdef.choices),
                        "expected_range": list(cdef.expected_range)
                        if cdef.expected_range else None})
        return {"concepts": out}

    @app.get("/operations")
    def operations(user: User = Depends(current_user)):
        require(deployment, user, "meta.read", "operations")
        return {"operations": sorted(cohort.OPERATIONS)}

    @app.get("/sources")
    def sources(user: User = Depends(current_user)):
        require(deployment, user, "meta.read", "sources")
        return {"sources": [
            {"source_id": sid, "patients": s.patient_ids(), "categories": s.categories()}
            for sid, s in sorted(deployment.sources.items())]}

    @app.get("/overview")
    def overview(user: User = Depends(current_user)):
        require(deployment, user, "meta.read", "overview")
        depths = {q: deployment.broker.depth(q) for q in deployment.broker.queues()}
        return {
            "facts": wh.fact_count(),
            "patients": len(wh.patients()),
            "open_qa": len(qaqc.list_qa(wh, state="open")),
            "queues": {q: {"visible": d[0], "inflight": d[1], "dead": d[2]}
                       for q, d in depths.items()},
        }

    # -- broker wire API -------------------------------------------------------------

    @app.post("/queues/{queue}/publish")
    def publish(queue: str, body: PublishBody, request: Request,
                user: User = Depends(current_user)):
        require(deployment, user, "broker.use", f"queue:{queue}")
        return idempotent(request, "publish", body.model_dump(), lambda: {
            "job_id": deployment.broker.publish(queue, body.kind, body.body,
                                                job_id=body.job_id)})

    @app.post("/queues/{queue}/consume")
    def consume(queue: str, body: ConsumeBody, user: User = Depends(current_user)):
        require(deployment, user, "broker.use", f"queue:{queue}")
        envelope = deployment.broker.consume(queue, lease=body.lease)
        if envelope is None:
            return {"job": None}
        return {"job": {"job_id": envelope.job_id, "queue": envelope.queue,
                        "kind": envelope.kind, "body": envelope.body,
                        "attempt": envelope.attempt, "enqueued_at": envelope.enqueued_at,
                        "receipt": envelope.receipt}}

    @app.post("/jobs/{job_id}/ack")
    def ack(job_id: str, body: ReceiptBody, user: User = Depends(current_user)):
        require(deployment, user, "broker.use", f"job:{job_id}")
        deployment.broker.ack(job_id, body.receipt)
        return {"acked": job_id}

    @app.post("/jobs/{job_id}/nack")
    def nack(job_id: str, body: ReceiptBody, user: User = Depends(current_user)):
        require(deployment, user, "broker.use", f"job:{job_id}")
        deployment.broker.nack(job_id, body.receipt)
        return {"nacked": job_id}

    @app.get("/queues/{queue}/depth")
    def depth(queue: str, user: User = Depends(current_user)):
        require(deployment, user, "meta.read", f"queue:{queue}")
        visible, inflight, dead = deployment.broker.depth(queue)
        return {"visible": visible, "inflight": inflight, "dead": dead}

    # -- ingestion -------------------------------------------------------------------

    @app.post("/ingest/pull")
    def pull(body: PullBody, request: Request, user: User = Depends(current_user)):
        protocol = accounts.protocol_of_project(wh, body.project_id)
        require(deployment, user, "ingest.pull", f"project:{body.project_id}", protocol)

        def produce():
            batch_id = ingest.start_pull(wh, deployment.blobs, deployment.sources,
                                         body.source, body.patient_ids, body.categories,
                                         project_id=body.project_id,
                                         page_size=deployment.block_size)
            ingest.split_request(wh, deployment.broker, batch_id,
                                 block_size=deployment.block_size)
            return {"batch_id": batch_id}

        return idempotent(request, "ingest.pull", body.model_dump(), produce)

    @app.post("/ingest/upload")
    def upload(request: Request, file: UploadFile, declared_kind: str = Form(...),
               project_id: str = Form(...), user: User = Depends(current_user)):
        protocol = accounts.protocol_of_project(wh, project_id)
        require(deployment, user, "ingest.upload", f"project:{project_id}", protocol)
        data = file.file.read()
        batch_id = ingest.register_upload(wh, deployment.blobs, deployment.broker, data,
                                          declared_kind, project_id=project_id,
                                          filename=file.filename or "upload")
        return {"batch_id": batch_id}

    @app.get("/ingest/batches/{batch_id}")
    def batch(batch_id: str, user: User = Depends(current_user)):
        require(deployment, user, "batch.read", f"batch:{batch_id}",
                batch_protocol(batch_id))
        return ingest.batch_status(wh, deployment.broker, batch_id)

    # -- QA/QC ----------------------------------------------------------------------

    @app.get("/qa")
    def qa_list(state: Optional[str] = None, user: User = Depends(current_user)):
        require(deployment, user, "qa.read", "qa", "*")
        rows = qaqc.list_qa(wh, state=state)
        visible = []
        for qa in rows:
            protocol = qa_protocol(qa.qa_id)
            if protocol is not None and protocol not in user.protocol_ids \
                    and "admin" not in user.roles:
                continue
            visible.append({
                "qa_id": qa.qa_id, "pathway": qa.pathway,
                "source_record_id": qa.source_record_id,
                "translator_id": qa.translator_id,
                "translator_version": qa.translator_version,
                "status_message": qa.status_message, "state": qa.state,
                "opened_at": qa.opened_at, "signer": qa.signer,
                "signed_at": qa.signed_at,
                "payload": (wh.get_record(qa.source_record_id).payload
                            if qa.pathway != "dataset-validation" else None),
            })
        return {"qa_rows": visible}

    @app.post("/qa/{qa_id}/mitigate")
    def mitigate(qa_id: str, body: MitigateBody, request: Request,
                 user: User = Depends(current_user)):
        require(deployment, user, "qa.mitigate", f"qa:{qa_id}", qa_protocol(qa_id))

        def produce():
            record_id = qaqc.mitigate(wh, deployment.broker, qa_id,
                                      body.corrected_payload, signer=user.user_id,
                                      audit=deployment.audit)
            return {"correction_record_id": record_id}

        return idempotent(request, "qa.mitigate", {"qa_id": qa_id, **body.model_dump()},
                          produce)

    @app.post("/qa/{qa_id}/dismiss")
    def dismiss(qa_id: str, body: DismissBody, user: User = Depends(current_user)):
        require(deployment, user, "qa.mitigate", f"qa:{qa_id}", qa_protocol(qa_id))
        qaqc.dismiss(wh, qa_id, signer=user.user_id, reason=body.reason,
                     audit=deployment.audit)
        return {"dismissed": qa_id}

    @app.get("/translators")
    def translators(user: User = Depends(current_user)):
        require(deployment, user, "meta.read", "translators")
        return {"translators": [
            {"translator_id": c.translator_id, "version": c.version,
             "category": c.category, "halt": c.halt}
            for c in etl.list_translators(wh)]}

    @app.post("/translators/{translator_id}/halt")
    def halt(translator_id: str, user: User = Depends(current_user)):
        require(deployment, user, "translator.manage", f"translator:{translator_id}")
        qaqc.halt(wh, translator_id, signer=user.user_id, origin="qa",
                  audit=deployment.audit)
        return {"halted": translator_id}

    @app.post("/translators/{translator_id}/resume")
    def resume(translator_id: str, user: User = Depends(current_user)):
        require(deployment, user, "translator.manage", f"translator:{translator_id}")
        qaqc.resume(wh, translator_id, signer=user.user_id, audit=deployment.audit)
        return {"resumed": translator_id}

    # -- datasets ----------------------------------------------------------------------

    @app.post("/datasets")
    def create_dataset(body: DatasetBody, request: Request,
                       user: User = Depends(current_user)):
        protocol = accounts.protocol_of_project(wh, body.project_id)
        require(deployment, user, "dataset.create", f"project:{body.project_id}", protocol)

        def produce():
            spec = cohort.DatasetSpec.from_json(body.model_dump())
            dataset_id, version = cohort.launch_dataset(
                wh, deployment.blobs, deployment.broker, deployment.registry, spec,
                created_by=user.user_id)
            return {"dataset_id": dataset_id, "version": version}

        return idempotent(request, "dataset.create", body.model_dump(), produce)

    @app.get("/datasets")
    def datasets(project_id: Optional[str] = None, user: User = Depends(current_user)):
        require(deployment, user, "dataset.read", "datasets",
                accounts.protocol_of_project(wh, project_id) if project_id else "*")
        listed = cohort.list_datasets(wh, project_id=project_id)
        if "admin" not in user.roles:
            listed = [m for m in listed
                      if accounts.protocol_of_project(wh, m["project_id"])
                      in user.protocol_ids]
        return {"datasets": listed}

    @app.get("/datasets/{dataset_id}/v{version}")
    def dataset(dataset_id: str, version: int, user: User = Depends(current_user)):
        require(deployment, user, "dataset.read", f"dataset:{dataset_id}",
                dataset_protocol(dataset_id))
        return cohort.get_dataset(wh, dataset_id, version)

    @app.get("/datasets/{dataset_id}/v{version}/files/{kind}")
    def dataset_file(dataset_id: str, version: int, kind: str,
                     user: User = Depends(current_user)):
        require(deployment, user, "dataset.read", f"dataset:{dataset_id}",
                dataset_protocol(dataset_id))
        manifest = cohort.get_dataset(wh, dataset_id, version)
        path = manifest["files"].get(kind)
        if path is None:
            raise NotFound(f"no {kind} file for dataset {dataset_id} v{version}")
        bucket, _, key = path.partition("/")
        return Response(content=deployment.blobs.get(bucket, key), media_type="text/csv")

    @app.post("/datasets/{dataset_id}/v{version}/validate")
    def validate_dataset(dataset_id: str, version: int,
                         user: User = Depends(current_user)):
        require(deployment, user, "dataset.read", f"dataset:{dataset_id}",
                dataset_protocol(dataset_id))
        report = cohort.validate_dataset(wh, deployment.blobs, deployment.registry,
                                         dataset_id, version)
        qaqc.open_qa(wh, "dataset-validation", f"dataset:{dataset_id}/v{version}",
                     status_message=("coherent" if report["ok"]
                                     else f"{len(report['mismatches'])} mismatches"),
                     qa_id=f"dv-{dataset_id}-v{version}", audit=deployment.audit,
                     actor=user.user_id)
        return report

    @app.get("/datasets/{dataset_id}/v{version}/analyses")
    def analyses(dataset_id: str, version: int, user: User = Depends(current_user)):
        require(deployment, user, "dataset.read", f"dataset:{dataset_id}",
                dataset_protocol(dataset_id))
        return {"analyses": analysis.get_analyses(wh, dataset_id, version)}

    @app.get("/analyses/{analysis_id}/export/{name}")
    def export_analysis(analysis_id: str, name: str, user: User = Depends(current_user)):
        row = wh.one("SELECT dataset_id FROM analyses WHERE analysis_id = ?", (analysis_id,))
        if row is None:
            raise NotFound(f"analysis {analysis_id}")
        require(deployment, user, "dataset.read", f"analysis:{analysis_id}",
                dataset_protocol(row["dataset_id"]))
        exported = analysis.export_results(wh, deployment.blobs, analysis_id)
        if name not in exported:
            raise NotFound(f"no {name} export for {analysis_id}")
        return Response(content=exported[name], media_type="text/csv")

    @app.post("/datasets/{dataset_id}/v{version}/tests")
    def run_test(dataset_id: str, version: int, body: TestBody, request: Request,
                 user: User = Depends(current_user)):
        require(deployment, user, "analysis.run", f"dataset:{dataset_id}",
                dataset_protocol(dataset_id))

        def produce():
            return analysis.run_dataset_test(wh, deployment.blobs, dataset_id, version,
                                             body.kind, body.variables, body.group_by)

        return idempotent(request, "dataset.test",
                          {"dataset_id": dataset_id, "version": version,
                           **body.model_dump()}, produce)

    # -- admin -------------------------------------------------------------------------

    @app.get("/admin/users")
    def users(user: User = Depends(current_user)):
        require(deployment, user, "admin.manage", "users")
        return {"users": [
            {"user_id": u.user_id, "display_name": u.display_name,
             "roles": sorted(u.roles), "protocol_ids": sorted(u.protocol_ids)}
            for u in accounts.list_users(wh)]}

    @app.post("/admin/users")
    def create_user(body: UserBody, user: User = Depends(current_user)):
        require(deployment, user, "admin.manage", f"user:{body.user_id}")
        created, token = accounts.create_user(wh, body.user_id, body.display_name,
                                              set(body.roles), set(body.protocol_ids))
        return {"user_id": created.user_id, "token": token}

    @app.get("/admin/protocols")
    def protocols(user: User = Depends(current_user)):
        require(deployment, user, "meta.read", "protocols")
        return {"protocols": [
            {"protocol_id": p.protocol_id, "title": p.title, "active": p.active}
            for p in accounts.list_protocols(wh)]}

    @app.post("/admin/protocols")
    def create_protocol(body: ProtocolBody, user: User = Depends(current_user)):
        require(deployment, user, "admin.manage", f"protocol:{body.protocol_id}")
        p = accounts.create_protocol(wh, body.protocol_id, body.title, body.active)
        return {"protocol_id": p.protocol_id}

    @app.get("/admin/projects")
    def projects(user: User = Depends(current_user)):
        require(deployment, user, "meta.read", "projects")
        return {"projects": [
            {"project_id": p.project_id, "protocol_id": p.protocol_id, "name": p.name}
            for p in accounts.list_projects(wh)]}

    @app.post("/admin/projects")
    def create_project(body: ProjectBody, user: User = Depends(current_user)):
        require(deployment, user, "admin.manage", f"project:{body.project_id}")
        p = accounts.create_project(wh, body.project_id, body.protocol_id, body.name)
        return {"project_id": p.project_id}

    # -- audit -------------------------------------------------------------------------

    @app.get("/audit")
    def audit_query(actor: Optional[str] = None, resource_id: Optional[str] = None,
                    outcome: Optional[str] = None, since: Optional[int] = None,
                    until: Optional[int] = None, after_id: int = 0, limit: int = 200,
                    user: User = Depends(current_user)):
        require(deployment, user, "audit.read", "audit")
        entries = deployment.audit.query(actor=actor, resource_id=resource_id,
                                         outcome=outcome, since=since, until=until,
                                         after_id=after_id, limit=limit)
        verified, first_bad = deployment.audit.verify()
        return {"entries": [e.__dict__ for e in entries],
                "chain_verified": verified, "first_bad_entry": first_bad}

    return app
