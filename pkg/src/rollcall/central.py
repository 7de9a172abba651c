"""Central HTTP API: auth, roster management, attendance queries, live feed,
reports, and the sync endpoints the edge pushes into.

Every route declares a key in the RBAC permission matrix; requests outside
the matrix are denied and the denial audited.  Teachers additionally get
scope-filtered access to their assigned grade/sections, students to their
own history only.
"""

from __future__ import annotations

import logging
import threading
from datetime import date

from .centralstore import CentralStore
from .clock import Clock
from .domain import AuditAction, CardState, Status
from .engine import TimeWindowPolicy
from .errors import (
    AuthExpired,
    CapacityExhausted,
    ChecksumMismatch,
    CursorExpired,
    DuplicateUid,
    Forbidden,
    FutureDate,
    InvalidGradeOrSection,
    InvalidRange,
    MalformedUid,
    NotAbsent,
    RateLimited,
    RollcallError,
    SequenceGap,
    UnknownCard,
    UnknownStudent,
    WindowTooShort,
)
from .httpd import ApiError, JsonApiServer, Request, Router
from .rbac import Principal, Role, check_route
from . import reports as reportsmod
from .syncproto import SyncBatch, card_to_wire, event_to_wire, student_to_wire

log = logging.getLogger(__name__)

MAX_LIVE_POLL_S = 25.0
MAX_PAGE_SIZE = 1000

_ERROR_MAP = [
    (RateLimited, 429, "rate_limited"),
    (AuthExpired, 401, "auth_expired"),
    (Forbidden, 403, "forbidden"),
    (UnknownStudent, 404, "unknown_student"),
    (UnknownCard, 404, "unknown_card"),
    (DuplicateUid, 409, "duplicate_uid"),
    (MalformedUid, 400, "malformed_uid"),
    (InvalidGradeOrSection, 400, "invalid_grade_or_section"),
    (CapacityExhausted, 409, "capacity_exhausted"),
    (FutureDate, 400, "future_date"),
    (NotAbsent, 409, "not_absent"),
    (InvalidRange, 400, "invalid_range"),
    (WindowTooShort, 400, "window_too_short"),
    (CursorExpired, 410, "cursor_expired"),
    (ChecksumMismatch, 409, "checksum_mismatch"),
]


def _to_api_error(exc: RollcallError) -> ApiError:
    if isinstance(exc, SequenceGap):
        return ApiError(409, "sequence_gap", str(exc),
                        extra={"central_high_water": exc.central_high_water})
    for etype, status, code in _ERROR_MAP:
        if isinstance(exc, etype):
            return ApiError(status, code, str(exc))
    return ApiError(500, "internal", str(exc))


def _date_param(raw: str | None, name: str, default: date | None = None) -> date:
    if raw is None:
        if default is not None:
            return default
        raise ApiError(400, "missing_parameter", f"{name} is required")
    try:
        return date.fromisoformat(raw)
    except ValueError:
        raise ApiError(400, "bad_date", f"{name} must be YYYY-MM-DD") from None


def _int_param(raw: str | None, name: str, default: int) -> int:
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ApiError(400, "bad_parameter", f"{name} must be an integer") from None


def _body(request: Request) -> dict:
    if request.body is None:
        raise ApiError(400, "missing_body")
    return request.body


class CentralService:
    def __init__(self, store: CentralStore, policy: TimeWindowPolicy, clock: Clock,
                 host: str = "127.0.0.1", port: int = 0, cors_origin: str = "*",
                 user_token_ttl_s: float = 86400.0, node_token_ttl_s: float = 86400.0):
        self.store = store
        self.policy = policy
        self.clock = clock
        self.user_token_ttl_s = user_token_ttl_s
        self.node_token_ttl_s = node_token_ttl_s
        self._stop_event = threading.Event()
        router = Router()
        add = router.add
        add("POST", "/api/v1/auth/login", "auth.login", self._login)
        add("POST", "/api/v1/auth/token", "auth.token", self._node_token)
        add("GET", "/api/v1/students", "students.list", self._students_list)
        add("POST", "/api/v1/students", "students.create", self._students_create)
        add("PATCH", "/api/v1/students/{code}", "students.update", self._students_update)
        add("GET", "/api/v1/cards", "cards.list", self._cards_list)
        add("POST", "/api/v1/cards", "cards.enroll", self._cards_enroll)
        add("POST", "/api/v1/cards/{uid}/state", "cards.set_state", self._cards_set_state)
        add("GET", "/api/v1/attendance", "attendance.query", self._attendance_query)
        add("POST", "/api/v1/attendance/mark", "attendance.mark", self._attendance_mark)
        add("POST", "/api/v1/attendance/justify", "attendance.justify", self._attendance_justify)
        add("GET", "/api/v1/attendance/live", "attendance.live", self._attendance_live)
        add("GET", "/api/v1/reports/summary", "reports.summary", self._reports_summary)
        add("GET", "/api/v1/reports/export.csv", "reports.export", self._reports_export)
        add("POST", "/api/v1/actors", "actors.create", self._actors_create)
        add("GET", "/api/v1/audit", "audit.list", self._audit_list)
        add("POST", "/api/v1/sync/events", "sync.push", self._sync_push)
        add("GET", "/api/v1/sync/roster", "sync.roster", self._sync_roster)
        self.router = router
        self.server = JsonApiServer(host, port, router, self._authenticate, cors_origin)

    # -- lifecycle --------------------------------------------------------------

    @property
    def port(self) -> int:
        return self.server.port

    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> None:
        self.server.start()

    def stop(self) -> None:
        self._stop_event.set()
        with self.store.feed_changed:
            self.store.feed_changed.notify_all()
        self.server.stop()

    # -- authentication -----------------------------------------------------------

    def _authenticate(self, route_key: str, request: Request) -> Principal | None:
        principal = None
        header = request.headers.get("Authorization", "")
        if header.startswith("Bearer "):
            try:
                principal = self.store.resolve_token(header[len("Bearer "):])
            except AuthExpired as exc:
                raise _to_api_error(exc) from None
        try:
            check_route(route_key, principal)
        except Forbidden as exc:
            who = principal.name if principal else "anonymous"
            self.store.audit(who, AuditAction.DENY, route_key, str(exc))
            if principal is None:
                raise ApiError(401, "auth_required", str(exc)) from None
            raise _to_api_error(exc) from None
        return principal

    # -- auth endpoints ---------------------------------------------------------------

    def _login(self, request: Request):
        body = _body(request)
        try:
            principal = self.store.verify_login(body.get("username", ""),
                                                body.get("password", ""))
        except RollcallError as exc:
            raise _to_api_error(exc) from None
        token, expires = self.store.issue_token("user", principal.name,
                                                self.user_token_ttl_s)
        return {"token": token, "expires_at": expires.isoformat(),
                "role": principal.role.value}

    def _node_token(self, request: Request):
        body = _body(request)
        node_id = body.get("node_id", "")
        if not self.store.verify_node_key(node_id, body.get("node_key", "")):
            self.store.audit("node-auth", AuditAction.LOGIN_FAIL, node_id, "bad node key")
            raise ApiError(401, "auth_expired", "bad node credentials")
        token, expires = self.store.issue_token("node", node_id, self.node_token_ttl_s)
        return {"token": token, "expires_at": expires.isoformat()}

    # -- roster endpoints -----------------------------------------------------------------

    def _students_list(self, request: Request):
        principal = request.principal
        grade = _int_param(request.q("grade"), "grade", 0) or None
        section = request.q("section")
        if principal.role is Role.TEACHER:
            self._check_teacher_scope(principal, grade, section)
            if grade is None and section is None:
                students = []
                for g, s in principal.scopes:
                    students.extend(self.store.students(grade=g, section=s))
            else:
                students = self.store.students(grade=grade, section=section)
        else:
            students = self.store.students(grade=grade, section=section)
        return {"students": [student_to_wire(s) for s in students]}

    def _students_create(self, request: Request):
        body = _body(request)
        try:
            student = self.store.create_student(
                given_names=body["given_names"],
                family_names=body["family_names"],
                enrollment_year=int(body["enrollment_year"]),
                grade=int(body["grade"]),
                section=body["section"],
                emergency_contact=body.get("emergency_contact", ""),
                actor=request.principal.name,
            )
        except KeyError as exc:
            raise ApiError(400, "missing_field", str(exc)) from None
        except RollcallError as exc:
            raise _to_api_error(exc) from None
        return {"student": student_to_wire(student)}

    def _students_update(self, request: Request):
        body = _body(request)
        if "active" not in body:
            raise ApiError(400, "missing_field", "active")
        try:
            student = self.store.set_student_active(
                request.params["code"], bool(body["active"]), request.principal.name)
        except RollcallError as exc:
            raise _to_api_error(exc) from None
        return {"student": student_to_wire(student)}

    def _cards_list(self, request: Request):
        return {"cards": [card_to_wire(c) for c in self.store.cards()]}

    def _cards_enroll(self, request: Request):
        body = _body(request)
        try:
            card = self.store.enroll_card(body.get("uid", ""), body.get("student_code", ""),
                                          request.principal.name)
        except RollcallError as exc:
            raise _to_api_error(exc) from None
        return {"card": card_to_wire(card)}

    def _cards_set_state(self, request: Request):
        body = _body(request)
        raw = body.get("state", "")
        try:
            state = CardState(raw)
        except ValueError:
            raise ApiError(400, "bad_state", f"state {raw!r}") from None
        try:
            card = self.store.set_card_state(request.params["uid"], state,
                                             request.principal.name)
        except RollcallError as exc:
            raise _to_api_error(exc) from None
        return {"card": card_to_wire(card)}

    # -- attendance endpoints -----------------------------------------------------------------

    def _scope_filters(self, request: Request):
        """Role scoping for query-like endpoints; returns (grade, section, student, scope_pairs)."""
        principal = request.principal
        grade = _int_param(request.q("grade"), "grade", 0) or None
        section = request.q("section")
        student = request.q("student")
        scope_pairs = None
        if principal.role is Role.TEACHER:
            self._check_teacher_scope(principal, grade, section)
            scope_pairs = list(principal.scopes)
        elif principal.role is Role.STUDENT:
            own = principal.student_code
            if student is not None and student != own:
                raise ApiError(403, "forbidden", "students may query their own history only")
            if grade is not None or section is not None:
                raise ApiError(403, "forbidden", "students may query their own history only")
            student = own
        return grade, section, student, scope_pairs

    def _check_teacher_scope(self, principal: Principal, grade, section) -> None:
        if grade is None and section is None:
            return
        for g, s in principal.scopes:
            if (grade is None or grade == g) and (section is None or section == s):
                return
        raise ApiError(403, "forbidden", "outside assigned grade/section scope")

    def _query_window(self, request: Request):
        today = self.policy.school_day_of(self.clock.now())
        date_from = _date_param(request.q("from"), "from", default=today)
        date_to = _date_param(request.q("to"), "to", default=date_from)
        if date_from > date_to:
            raise _to_api_error(InvalidRange(f"{date_from} after {date_to}"))
        return date_from, date_to

    def _attendance_query(self, request: Request):
        date_from, date_to = self._query_window(request)
        grade, section, student, scope_pairs = self._scope_filters(request)
        status = None
        if request.q("status"):
            try:
                status = Status(request.q("status"))
            except ValueError:
                raise ApiError(400, "bad_status", request.q("status")) from None
        page = max(1, _int_param(request.q("page"), "page", 1))
        page_size = min(MAX_PAGE_SIZE, max(1, _int_param(request.q("page_size"), "page_size", 100)))
        events, total, aggregates = self.store.query_events(
            date_from, date_to, grade=grade, section=section, student=student,
            status=status, scope_pairs=scope_pairs, page=page, page_size=page_size)
        return {
            "events": [event_to_wire(e) for e in events],
            "total": total,
            "page": page,
            "page_size": page_size,
            "aggregates": aggregates,
        }

    def _attendance_mark(self, request: Request):
        body = _body(request)
        day = _date_param(body.get("day"), "day")
        try:
            status = Status(body.get("status", ""))
        except ValueError:
            raise ApiError(400, "bad_status", body.get("status", "")) from None
        today = self.policy.school_day_of(self.clock.now())
        try:
            ev = self.store.manual_mark(request.principal.name, body.get("student_code", ""),
                                        day, status, body.get("note", ""), today)
        except (RollcallError, ValueError) as exc:
            if isinstance(exc, RollcallError):
                raise _to_api_error(exc) from None
            raise ApiError(400, "bad_request", str(exc)) from None
        return {"event": event_to_wire(ev)}

    def _attendance_justify(self, request: Request):
        body = _body(request)
        day = _date_param(body.get("day"), "day")
        try:
            ev = self.store.justify(request.principal.name, body.get("student_code", ""),
                                    day, body.get("note", ""))
        except RollcallError as exc:
            raise _to_api_error(exc) from None
        return {"event": event_to_wire(ev)}

    def _attendance_live(self, request: Request):
        principal = request.principal
        today = self.policy.school_day_of(self.clock.now())
        day = _date_param(request.q("day"), "day", default=today)
        cursor = _int_param(request.q("cursor"), "cursor", 0)
        timeout = min(MAX_LIVE_POLL_S, max(0.0, float(request.q("timeout", "20"))))
        try:
            events, new_cursor = self.store.wait_for_feed(day, cursor, timeout,
                                                          self._stop_event)
        except CursorExpired as exc:
            raise _to_api_error(exc) from None
        if principal.role is Role.TEACHER:
            pairs = set(principal.scopes)
            kept = []
            for ev in events:
                student = self.store.get_student(ev.student_code)
                if student and (student.grade, student.section) in pairs:
                    kept.append(ev)
            events = kept
        return {
            "events": [event_to_wire(e) for e in events],
            "cursor": new_cursor,
            "heartbeat": not events,
            "day": day.isoformat(),
        }

    # -- reports ------------------------------------------------------------------------------------

    def _closed_days(self, days: list[date]) -> set[date]:
        roster = self.store.active_student_count()
        closed = set()
        for d in days:
            if len(self.store.events_for_day(d)) >= roster:
                closed.add(d)
        return closed

    def _reports_summary(self, request: Request):
        scope_kind = request.q("scope", "institution")
        grade, section, student, scope_pairs = self._scope_filters(request)
        period_kind = request.q("period", "range")
        anchor = request.q("anchor")
        try:
            start, end = reportsmod.resolve_period(
                period_kind,
                anchor=_date_param(anchor, "anchor") if anchor else None,
                start=_date_param(request.q("from"), "from") if request.q("from") else None,
                end=_date_param(request.q("to"), "to") if request.q("to") else None,
            )
            days = reportsmod.school_days_between(self.policy, start, end)
        except RollcallError as exc:
            raise _to_api_error(exc) from None

        if scope_kind == "grade" and grade is None:
            raise ApiError(400, "missing_parameter", "grade")
        if scope_kind == "section" and (grade is None or section is None):
            raise ApiError(400, "missing_parameter", "grade and section")
        if scope_kind == "student":
            if student is None:
                raise ApiError(400, "missing_parameter", "student")
            roster_size = 1 if self.store.get_student(student) else 0
            scope_label = f"student:{student}"
        else:
            # denominator matches exactly the population the filters select
            # (for teachers that is their assigned sections)
            members = [s for s in self.store.students() if s.active
                       and (grade is None or s.grade == grade)
                       and (section is None or s.section == section)
                       and (scope_pairs is None or (s.grade, s.section) in set(scope_pairs))]
            roster_size = len(members)
            if scope_kind == "section":
                scope_label = f"section:{grade}{section}"
            elif scope_kind == "grade":
                scope_label = f"grade:{grade}"
            else:
                scope_label = "institution"

        events, _, _ = self.store.query_events(
            start, end, grade=grade, section=section, student=student,
            scope_pairs=scope_pairs, page=1, page_size=10 ** 9)
        closed = self._closed_days(days)
        summary = reportsmod.summarize(scope_label, events, roster_size, days, closed)
        out = summary.to_wire()

        if request.q("chronic") and scope_kind == "student":
            threshold = float(request.q("threshold", str(reportsmod.DEFAULT_CHRONIC_THRESHOLD)))
            statuses = {e.school_day: e.status for e in events}
            closed_sorted = sorted(d for d in days if d in closed)
            try:
                flagged, evidence = reportsmod.flag_chronic_absenteeism(
                    statuses, closed_sorted, threshold)
            except WindowTooShort as exc:
                raise _to_api_error(exc) from None
            out["chronic"] = {
                "flagged": flagged,
                "threshold": threshold,
                "evidence_days": [d.isoformat() for d in evidence],
            }
        return out

    def _reports_export(self, request: Request):
        date_from, date_to = self._query_window(request)
        grade, section, student, scope_pairs = self._scope_filters(request)
        events, _, _ = self.store.query_events(
            date_from, date_to, grade=grade, section=section, student=student,
            scope_pairs=scope_pairs, page=1, page_size=10 ** 9)
        csv_text = reportsmod.events_to_csv(events)
        return csv_text.encode("utf-8"), "text/csv; charset=utf-8"

    # -- administration ------------------------------------------------------------------------------

    def _actors_create(self, request: Request):
        body = _body(request)
        try:
            role = Role(body.get("role", ""))
        except ValueError:
            raise ApiError(400, "bad_role", body.get("role", "")) from None
        scopes = [(int(s["grade"]), s["section"]) for s in body.get("scopes", [])]
        self.store.create_actor(
            username=body["username"], password=body["password"], role=role,
            actor=request.principal.name, student_code=body.get("student_code"),
            scopes=scopes)
        return {"username": body["username"], "role": role.value}

    def _audit_list(self, request: Request):
        action = None
        if request.q("action"):
            try:
                action = AuditAction(request.q("action"))
            except ValueError:
                raise ApiError(400, "bad_action", request.q("action")) from None
        entries = self.store.audit_entries(action)
        return {"entries": [
            {"at": e.at.isoformat(), "actor": e.actor, "action": e.action.value,
             "subject": e.subject, "detail": e.detail}
            for e in entries
        ]}

    # -- sync ----------------------------------------------------------------------------------------

    def _sync_push(self, request: Request):
        body = _body(request)
        try:
            batch = SyncBatch.from_wire(body)
        except (KeyError, ValueError) as exc:
            raise ApiError(400, "bad_batch", str(exc)) from None
        if batch.edge_node_id != request.principal.name:
            raise ApiError(403, "forbidden", "token bound to a different node")
        if not batch.verify_checksum():
            raise _to_api_error(ChecksumMismatch("batch checksum does not verify"))
        try:
            hw, duplicates = self.store.ingest_batch(batch)
        except SequenceGap as exc:
            raise _to_api_error(exc) from None
        return {"accepted_high_water": hw, "duplicates": duplicates}

    def _sync_roster(self, request: Request):
        since = _int_param(request.q("since"), "since", 0)
        version, students, cards, events = self.store.roster_delta(since)
        return {
            "version": version,
            "students": [student_to_wire(s) for s in students],
            "cards": [card_to_wire(c) for c in cards],
            "events": [event_to_wire(e) for e in events],
            "policy": self.policy.to_wire(),
        }
