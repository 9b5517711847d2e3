"""Append-only, hash-chained audit log.

Every entry embeds the previous entry's digest, so truncation or tampering
anywhere in the chain is detectable by a full re-walk. Appends are serialized
by the store's write transaction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

from .model import utc_now_ms
from .stores import Warehouse

GENESIS = "0" * 64


@dataclass(frozen=True)
class AuditEntry:
    entry_id: int
    actor: str
    action: str
    resource_id: str
    outcome: str  # allowed | denied | error
    at: int
    request_digest: str
    prev_digest: str
    digest: str


def _entry_digest(actor: str, action: str, resource_id: str, outcome: str,
                  at: int, request_digest: str, prev_digest: str) -> str:
    material = json.dumps(
        {"actor": actor, "action": action, "resource": resource_id, "outcome": outcome,
         "at": at, "request": request_digest, "prev": prev_digest},
        sort_keys=True)
    return hashlib.sha256(material.encode()).hexdigest()


class AuditLog:
    def __init__(self, warehouse: Warehouse) -> None:
        self.warehouse = warehouse

    def append(self, actor: str, action: str, resource_id: str, outcome: str,
               request_digest: str = "") -> int:
        at = utc_now_ms()
        with self.warehouse.transaction() as conn:
            row = conn.execute(
                "SELECT digest FROM audit_log ORDER BY entry_id DESC LIMIT 1").fetchone()
            prev = row[0] if row else GENESIS
            digest = _entry_digest(actor, action, resource_id, outcome, at, request_digest, prev)
            cur = conn.execute(
                "INSERT INTO audit_log (actor, action, resource_id, outcome, at,"
                " request_digest, prev_digest, digest) VALUES (?,?,?,?,?,?,?,?)",
                (actor, action, resource_id, outcome, at, request_digest, prev, digest))
            return cur.lastrowid

    def _row_entry(self, row) -> AuditEntry:
        return AuditEntry(row["entry_id"], row["actor"], row["action"], row["resource_id"],
                          row["outcome"], row["at"], row["request_digest"],
                          row["prev_digest"], row["digest"])

    def verify(self) -> tuple[bool, Optional[int]]:
        """Re-walk the whole chain; returns (ok, first bad entry id)."""
        prev = GENESIS
        for row in self.warehouse.connection().execute(
                "SELECT * FROM audit_log ORDER BY entry_id"):
            expected = _entry_digest(row["actor"], row["action"], row["resource_id"],
                                     row["outcome"], row["at"], row["request_digest"], prev)
            if row["prev_digest"] != prev or row["digest"] != expected:
                return False, row["entry_id"]
            prev = row["digest"]
        return True, None

    def query(self, actor: Optional[str] = None, resource_id: Optional[str] = None,
              outcome: Optional[str] = None, since: Optional[int] = None,
              until: Optional[int] = None, after_id: int = 0,
              limit: int = 200) -> list[AuditEntry]:
        sql = "SELECT * FROM audit_log WHERE entry_id > ?"
        params: list = [after_id]
        for clause, value in (("actor = ?", actor), ("resource_id = ?", resource_id),
                              ("outcome = ?", outcome)):
            if value is not None:
                sql += f" AND {clause}"
                params.append(value)
        if since is not None:
            sql += " AND at >= ?"
            params.append(since)
        if until is not None:
            sql += " AND at < ?"
            params.append(until)
        sql += " ORDER BY entry_id LIMIT ?"
        params.append(limit)
        return [self._row_entry(r) for r in self.warehouse.query(sql, params)]

    def count(self, **filters) -> int:
        return len(self.query(limit=10_000_000, **filters))
