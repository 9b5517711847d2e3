"""Users, projects, and IRB protocols: the governance tables.

Every project belongs to exactly one protocol; users hold roles plus a set of
protocol memberships. Access control reduces to protocol intersection and
role checks (see api.authorize).
"""

from __future__ import annotations

import json
import secrets
from typing import Optional

from .errors import NotFound
from .model import Project, Protocol, User
from .stores import Warehouse

ROLES = ("admin", "researcher", "qa", "worker")


def create_protocol(warehouse: Warehouse, protocol_id: str, title: str,
                    active: bool = True) -> Protocol:
    with warehouse.transaction() as conn:
        conn.execute("INSERT OR REPLACE INTO protocols (protocol_id, title, active)"
                     " VALUES (?,?,?)", (protocol_id, title, int(active)))
    return Protocol(protocol_id, title, active)


def create_project(warehouse: Warehouse, project_id: str, protocol_id: str,
                   name: str) -> Project:
    if warehouse.one("SELECT 1 FROM protocols WHERE protocol_id = ?", (protocol_id,)) is None:
        raise NotFound(f"protocol {protocol_id}")
    with warehouse.transaction() as conn:
        conn.execute("INSERT OR REPLACE INTO projects (project_id, protocol_id, name)"
                     " VALUES (?,?,?)", (project_id, protocol_id, name))
    return Project(project_id, protocol_id, name)


def create_user(warehouse: Warehouse, user_id: str, display_name: str,
                roles: set[str], protocol_ids: set[str],
                token: Optional[str] = None) -> tuple[User, str]:
    """Returns the user and their bearer token (generated unless supplied)."""
    token = token or secrets.token_urlsafe(24)
    with warehouse.transaction() as conn:
        conn.execute(
            "INSERT OR REPLACE INTO users (user_id, display_name, roles, protocol_ids, token)"
            " VALUES (?,?,?,?,?)",
            (user_id, display_name, json.dumps(sorted(roles)),
             json.dumps(sorted(protocol_ids)), token))
    return User(user_id, display_name, frozenset(roles), frozenset(protocol_ids)), token


def _row_user(row) -> User:
    return User(row["user_id"], row["display_name"],
                frozenset(json.loads(row["roles"])),
                frozenset(json.loads(row["protocol_ids"])))


def user_by_token(warehouse: Warehouse, token: str) -> Optional[User]:
    row = warehouse.one("SELECT * FROM users WHERE token = ?", (token,))
    return _row_user(row) if row else None


def get_user(warehouse: Warehouse, user_id: str) -> User:
    row = warehouse.one("SELECT * FROM users WHERE user_id = ?", (user_id,))
    if row is None:
        raise NotFound(f"user {user_id}")
    return _row_user(row)


def list_users(warehouse: Warehouse) -> list[User]:
    return [_row_user(r) for r in warehouse.query("SELECT * FROM users ORDER BY user_id")]


def list_protocols(warehouse: Warehouse) -> list[Protocol]:
    return [Protocol(r["protocol_id"], r["title"], bool(r["active"]))
            for r in warehouse.query("SELECT * FROM protocols ORDER BY protocol_id")]


def list_projects(warehouse: Warehouse) -> list[Project]:
    return [Project(r["project_id"], r["protocol_id"], r["name"])
            for r in warehouse.query("SELECT * FROM projects ORDER BY project_id")]


def protocol_of_project(warehouse: Warehouse, project_id: Optional[str]) -> Optional[str]:
    if project_id is None:
        return None
    row = warehouse.one("SELECT protocol_id FROM projects WHERE project_id = ?", (project_id,))
    return row[0] if row else None
