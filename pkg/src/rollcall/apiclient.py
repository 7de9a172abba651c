"""Typed client for the central HTTP API (used by the CLI, the simulator,
and integration tests)."""

from __future__ import annotations

from datetime import date

import requests


class ApiRequestError(Exception):
    def __init__(self, status: int, code: str, message: str = "", extra: dict | None = None):
        super().__init__(f"{status} {code}: {message}")
        self.status = status
        self.code = code
        self.extra = extra or {}


class CentralClient:
    def __init__(self, base_url: str, token: str | None = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout
        self.session = requests.Session()

    # -- plumbing -----------------------------------------------------------------

    def _headers(self) -> dict:
        return {"Authorization": f"Bearer {self.token}"} if self.token else {}

    def request(self, method: str, path: str, *, json=None, params=None,
                timeout: float | None = None):
        resp = self.session.request(
            method, f"{self.base_url}{path}", json=json, params=params,
            headers=self._headers(), timeout=timeout or self.timeout)
        if resp.status_code >= 400:
            try:
                body = resp.json()
            except ValueError:
                body = {}
            raise ApiRequestError(resp.status_code, body.get("error", "unknown"),
                                  body.get("message", ""),
                                  {k: v for k, v in body.items()
                                   if k not in ("error", "message")})
        return resp

    def get(self, path: str, **kwargs) -> dict:
        return self.request("GET", path, **kwargs).json()

    def post(self, path: str, **kwargs) -> dict:
        return self.request("POST", path, **kwargs).json()

    def patch(self, path: str, **kwargs) -> dict:
        return self.request("PATCH", path, **kwargs).json()

    # -- auth ---------------------------------------------------------------------

    def login(self, username: str, password: str) -> dict:
        body = self.post("/api/v1/auth/login",
                         json={"username": username, "password": password})
        self.token = body["token"]
        return body

    # -- roster ---------------------------------------------------------------------

    def create_student(self, given_names: str, family_names: str, enrollment_year: int,
                       grade: int, section: str, emergency_contact: str = "") -> dict:
        return self.post("/api/v1/students", json={
            "given_names": given_names, "family_names": family_names,
            "enrollment_year": enrollment_year, "grade": grade, "section": section,
            "emergency_contact": emergency_contact,
        })["student"]

    def list_students(self, grade: int | None = None, section: str | None = None) -> list:
        params = {}
        if grade is not None:
            params["grade"] = grade
        if section is not None:
            params["section"] = section
        return self.get("/api/v1/students", params=params)["students"]

    def set_student_active(self, student_code: str, active: bool) -> dict:
        return self.patch(f"/api/v1/students/{student_code}",
                          json={"active": active})["student"]

    def enroll_card(self, uid: str, student_code: str) -> dict:
        return self.post("/api/v1/cards",
                         json={"uid": uid, "student_code": student_code})["card"]

    def set_card_state(self, uid: str, state: str) -> dict:
        return self.post(f"/api/v1/cards/{uid}/state", json={"state": state})["card"]

    def list_cards(self) -> list:
        return self.get("/api/v1/cards")["cards"]

    # -- attendance --------------------------------------------------------------------

    def query_attendance(self, date_from: date | None = None, date_to: date | None = None,
                         grade: int | None = None, section: str | None = None,
                         student: str | None = None, status: str | None = None,
                         page: int = 1, page_size: int = 100) -> dict:
        params: dict = {"page": page, "page_size": page_size}
        if date_from:
            params["from"] = date_from.isoformat()
        if date_to:
            params["to"] = date_to.isoformat()
        if grade is not None:
            params["grade"] = grade
        if section is not None:
            params["section"] = section
        if student is not None:
            params["student"] = student
        if status is not None:
            params["status"] = status
        return self.get("/api/v1/attendance", params=params)

    def manual_mark(self, student_code: str, day: date, status: str, note: str = "") -> dict:
        return self.post("/api/v1/attendance/mark", json={
            "student_code": student_code, "day": day.isoformat(),
            "status": status, "note": note})["event"]

    def justify(self, student_code: str, day: date, note: str = "") -> dict:
        return self.post("/api/v1/attendance/justify", json={
            "student_code": student_code, "day": day.isoformat(), "note": note})["event"]

    def live_poll(self, day: date | None = None, cursor: int = 0,
                  timeout_s: float = 20.0) -> dict:
        params: dict = {"cursor": cursor, "timeout": timeout_s}
        if day is not None:
            params["day"] = day.isoformat()
        return self.get("/api/v1/attendance/live", params=params,
                        timeout=timeout_s + 10.0)

    # -- reports ----------------------------------------------------------------------

    def report_summary(self, **params) -> dict:
        return self.get("/api/v1/reports/summary", params=params)

    def export_csv(self, **params) -> bytes:
        return self.request("GET", "/api/v1/reports/export.csv", params=params).content

    # -- administration ------------------------------------------------------------------

    def create_actor(self, username: str, password: str, role: str,
                     student_code: str | None = None,
                     scopes: list[dict] | None = None) -> dict:
        body: dict = {"username": username, "password": password, "role": role}
        if student_code:
            body["student_code"] = student_code
        if scopes:
            body["scopes"] = scopes
        return self.post("/api/v1/actors", json=body)

    def audit_entries(self, action: str | None = None) -> list:
        params = {"action": action} if action else None
        return self.get("/api/v1/audit", params=params)["entries"]
