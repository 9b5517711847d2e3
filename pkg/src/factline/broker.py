"""Messaging-queue core resource: named FIFO queues, at-least-once delivery,
visibility-timeout leases, and dead-lettering.

The broker is embedded, backed by relational tables, so any number of worker
processes on one machine (or pointed at a shared file) coordinate through it;
the HTTP surface in the api module exposes the same operations over the wire.
Delivery is at-least-once: consumers must be idempotent.
"""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import BodyTooLarge, LeaseExpired, UnknownJob, UnknownQueue
from .stores import _Database

DEFAULT_LEASE_SECONDS = 60.0
DEFAULT_MAX_ATTEMPTS = 5
DEFAULT_BODY_LIMIT = 256 * 1024  # bytes of serialized JSON


@dataclass(frozen=True)
class JobEnvelope:
    """One unit of worker work. The body only ever carries references
    (blob keys, row-id ranges); bulk data lives in the stores.
    """

    job_id: str
    queue: str
    kind: str
    body: dict
    attempt: int
    enqueued_at: float
    receipt: Optional[str] = None  # delivery lease token, set on consume


class Broker(_Database):
    def __init__(self, path: str | Path, max_attempts: int = DEFAULT_MAX_ATTEMPTS,
                 body_limit: int = DEFAULT_BODY_LIMIT) -> None:
        super().__init__(path, "0002_broker.sql")
        self.max_attempts = max_attempts
        self.body_limit = body_limit

    # -- queue admin -----------------------------------------------------------

    def register(self, queue: str) -> None:
        self.execute("INSERT OR IGNORE INTO queues (name) VALUES (?)", (queue,))

    def queues(self) -> list[str]:
        return [r[0] for r in self.query("SELECT name FROM queues ORDER BY name")]

    def _check_queue(self, queue: str) -> None:
        if self.one("SELECT 1 FROM queues WHERE name = ?", (queue,)) is None:
            raise UnknownQueue(queue)

    # -- lifecycle ---------------------------------------------------------------

    def publish(self, queue: str, kind: str, body: dict,
                job_id: Optional[str] = None) -> str:
        """Enqueue a job. Deterministic job ids deduplicate republished work:
        publishing an id that already exists (in any state) is a no-op.
        """
        self._check_queue(queue)
        encoded = json.dumps(body, sort_keys=True)
        if len(encoded.encode()) > self.body_limit:
            raise BodyTooLarge(f"body is {len(encoded.encode())} bytes; limit {self.body_limit}")
        job_id = job_id or uuid.uuid4().hex
        with self.transaction() as conn:
            cur = conn.execute("INSERT INTO job_fifo DEFAULT VALUES")
            fifo = cur.lastrowid
            conn.execute("DELETE FROM job_fifo WHERE n = ?", (fifo,))
            conn.execute(
                "INSERT OR IGNORE INTO jobs (job_id, queue, kind, body, attempt, state,"
                " enqueued_at, fifo) VALUES (?,?,?,?,0,'visible',?,?)",
                (job_id, queue, kind, encoded, time.time(), fifo))
        return job_id

    def _sweep_expired(self, conn, queue: str, now: float) -> None:
        rows = conn.execute(
            "SELECT job_id, attempt FROM jobs WHERE queue = ? AND state = 'inflight' "
            "AND lease_expiry < ?", (queue, now)).fetchall()
        for row in rows:
            attempt = row["attempt"] + 1
            state = "dead" if attempt >= self.max_attempts else "visible"
            conn.execute(
                "UPDATE jobs SET state = ?, attempt = ?, lease_expiry = NULL, receipt = NULL "
                "WHERE job_id = ?", (state, attempt, row["job_id"]))

    def consume(self, queue: str, lease: float = DEFAULT_LEASE_SECONDS) -> Optional[JobEnvelope]:
        """Claim the oldest visible job for ``lease`` seconds, or None if the
        queue is empty. While the lease is live no other consumer can receive
        the job; an unacked job returns to the queue when the lease expires.
        """
        self._check_queue(queue)
        now = time.time()
        # read-only probe first: idle polling must not take the write lock
        probe = self.one(
            "SELECT 1 FROM jobs WHERE queue = ? AND (state = 'visible' OR "
            "(state = 'inflight' AND lease_expiry < ?)) LIMIT 1", (queue, now))
        if probe is None:
            return None
        receipt = uuid.uuid4().hex
        with self.transaction() as conn:
            self._sweep_expired(conn, queue, now)
            row = conn.execute(
                "UPDATE jobs SET state = 'inflight', lease_expiry = ?, receipt = ? "
                "WHERE job_id = (SELECT job_id FROM jobs WHERE queue = ? AND state = 'visible' "
                "ORDER BY fifo LIMIT 1) RETURNING *",
                (now + lease, receipt, queue)).fetchone()
        if row is None:
            return None
        return JobEnvelope(
            job_id=row["job_id"], queue=row["queue"], kind=row["kind"],
            body=json.loads(row["body"]), attempt=row["attempt"],
            enqueued_at=row["enqueued_at"], receipt=receipt)

    def _checked_inflight(self, conn, job_id: str, receipt: Optional[str], now: float):
        row = conn.execute("SELECT * FROM jobs WHERE job_id = ?", (job_id,)).fetchone()
        if row is None or row["state"] == "acked":
            raise UnknownJob(job_id)
        if row["state"] != "inflight":
            raise LeaseExpired(f"job {job_id} is not in flight")
        if row["lease_expiry"] is not None and row["lease_expiry"] < now:
            attempt = row["attempt"] + 1
            state = "dead" if attempt >= self.max_attempts else "visible"
            conn.execute(
                "UPDATE jobs SET state = ?, attempt = ?, lease_expiry = NULL, receipt = NULL "
                "WHERE job_id = ?", (state, attempt, job_id))
            raise LeaseExpired(f"lease on {job_id} expired")
        if receipt is not None and row["receipt"] != receipt:
            raise LeaseExpired(f"lease on {job_id} was re-issued")
        return row

    def ack(self, job_id: str, receipt: Optional[str] = None) -> None:
        """Complete a job permanently. The row is kept as an ack tombstone so
        deterministic republishes stay no-ops.
        """
        with self.transaction() as conn:
            self._checked_inflight(conn, job_id, receipt, time.time())
            conn.execute(
                "UPDATE jobs SET state = 'acked', lease_expiry = NULL, receipt = NULL, body = '{}' "
                "WHERE job_id = ?", (job_id,))

    def nack(self, job_id: str, receipt: Optional[str] = None) -> None:
        """Return a job to the queue immediately (attempt + 1)."""
        with self.transaction() as conn:
            row = self._checked_inflight(conn, job_id, receipt, time.time())
            attempt = row["attempt"] + 1
            state = "dead" if attempt >= self.max_attempts else "visible"
            conn.execute(
                "UPDATE jobs SET state = ?, attempt = ?, lease_expiry = NULL, receipt = NULL "
                "WHERE job_id = ?", (state, attempt, job_id))

    def depth(self, queue: str) -> tuple[int, int, int]:
        """(visible, in-flight, dead-letter) counts. Read-only: expired leases
        are folded into the visible count arithmetically (the next consume
        performs the actual sweep), so polling never takes the write lock.
        """
        self._check_queue(queue)
        now = time.time()
        counts = {"visible": 0, "inflight": 0, "dead": 0}
        for row in self.query(
                "SELECT CASE WHEN state = 'inflight' AND lease_expiry < ? "
                "AND attempt + 1 >= ? THEN 'dead' "
                "WHEN state = 'inflight' AND lease_expiry < ? THEN 'visible' "
                "ELSE state END AS effective, COUNT(*) FROM jobs "
                "WHERE queue = ? AND state != 'acked' GROUP BY effective",
                (now, self.max_attempts, now, queue)):
            counts[row[0]] = row[1]
        return counts["visible"], counts["inflight"], counts["dead"]

    def dead_letter_jobs(self, queue: str) -> list[JobEnvelope]:
        self._check_queue(queue)
        rows = self.query(
            "SELECT * FROM jobs WHERE queue = ? AND state = 'dead' ORDER BY fifo", (queue,))
        return [JobEnvelope(r["job_id"], r["queue"], r["kind"], json.loads(r["body"]),
                            r["attempt"], r["enqueued_at"]) for r in rows]

    def recover(self) -> int:
        """Restart semantics: demote every in-flight job back to visible
        (their leases died with the previous process group).
        """
        with self.transaction() as conn:
            cur = conn.execute(
                "UPDATE jobs SET state = 'visible', lease_expiry = NULL, receipt = NULL "
                "WHERE state = 'inflight'")
            return cur.rowcount

    def idle(self, queues: Optional[list[str]] = None) -> bool:
        """True when no work is visible or in flight on the given queues."""
        names = queues if queues is not None else self.queues()
        for name in names:
            visible, inflight, _ = self.depth(name)
            if visible or inflight:
                return False
        return True
