"""Role-based access control for the central service.

Four roles.  Every endpoint declares a route key; a route key absent from
the permission matrix is unreachable by anyone (deny by default).  Teachers
are additionally scope-bound to assigned grade/sections and students to
their own history; those checks live in the service handlers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import Forbidden


class Role(str, Enum):
    ADMIN = "admin"
    AUXILIARY = "auxiliary"
    TEACHER = "teacher"
    STUDENT = "student"


@dataclass(frozen=True)
class Principal:
    kind: str                      # "user" | "node"
    name: str
    role: Role | None = None
    student_code: str | None = None
    scopes: tuple = ()             # teacher (grade, section) assignments


# route key -> roles allowed; everything else is denied
PERMISSIONS: dict[str, frozenset[Role]] = {
    "students.list":      frozenset({Role.ADMIN, Role.AUXILIARY, Role.TEACHER}),
    "students.create":    frozenset({Role.ADMIN}),
    "students.update":    frozenset({Role.ADMIN}),
    "cards.list":         frozenset({Role.ADMIN, Role.AUXILIARY}),
    "cards.enroll":       frozenset({Role.ADMIN, Role.AUXILIARY}),
    "cards.set_state":    frozenset({Role.ADMIN, Role.AUXILIARY}),
    "attendance.query":   frozenset({Role.ADMIN, Role.AUXILIARY, Role.TEACHER, Role.STUDENT}),
    "attendance.mark":    frozenset({Role.ADMIN, Role.AUXILIARY}),
    "attendance.justify": frozenset({Role.ADMIN, Role.AUXILIARY}),
    "attendance.live":    frozenset({Role.ADMIN, Role.AUXILIARY, Role.TEACHER}),
    "reports.summary":    frozenset({Role.ADMIN, Role.AUXILIARY, Role.TEACHER}),
    "reports.export":     frozenset({Role.ADMIN, Role.AUXILIARY, Role.TEACHER}),
    "actors.create":      frozenset({Role.ADMIN}),
    "audit.list":         frozenset({Role.ADMIN}),
}

# sync endpoints are reachable only with a node token
NODE_ROUTES = frozenset({"sync.push", "sync.roster"})

# no principal required
PUBLIC_ROUTES = frozenset({"auth.login", "auth.token"})

ALL_ROUTE_KEYS = frozenset(PERMISSIONS) | NODE_ROUTES | PUBLIC_ROUTES


def check_route(route_key: str, principal: Principal | None) -> None:
    """Raise Forbidden unless the principal may reach the route."""
    if route_key in PUBLIC_ROUTES:
        return
    if route_key in NODE_ROUTES:
        if principal is None or principal.kind != "node":
            raise Forbidden(f"route {route_key} requires a node token")
        return
    allowed = PERMISSIONS.get(route_key)
    if allowed is None:
        # deny-by-default: unlisted routes are unreachable for every role
        raise Forbidden(f"route {route_key} is not in the permission matrix")
    if principal is None or principal.kind != "user" or principal.role not in allowed:
        raise Forbidden(f"role cannot access {route_key}")
