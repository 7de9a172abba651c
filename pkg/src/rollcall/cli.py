"""Operator command line: run nodes, drive the simulator, administer the roster,
and emit reports.

Exit codes: 0 success, 1 oracle mismatch or connectivity failure, 2 usage or
config errors.
"""

from __future__ import annotations

import argparse
import os
import signal
import statistics
import sys
import threading
from datetime import date

import requests

from . import config as cfgmod
from .apiclient import ApiRequestError, CentralClient
from .central import CentralService
from .centralstore import CentralStore
from .clock import SystemClock
from .edge import EdgeNode
from .edgestore import EdgeStore
from .engine import TimeWindowPolicy
from .errors import ConfigError, RollcallError
from .rbac import Role
from .simulate import MorningSimulation, SimulationSpec, parse_partition


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (requests.ConnectionError, requests.Timeout) as exc:
        url = getattr(args, "url", "<unknown endpoint>")
        print(f"cannot reach {url}: {exc}", file=sys.stderr)
        return 1
    except ApiRequestError as exc:
        print(f"request failed: {exc}", file=sys.stderr)
        return 1
    except RollcallError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rollcall",
        description="Offline-first school attendance platform")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("edge", help="run the edge node (reader listener, engine, "
                                    "closure scheduler, sync loop)")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_edge)

    p = sub.add_parser("central", help="run the central API service")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_central)

    p = sub.add_parser("simulate", help="run an accelerated virtual-clock school "
                                        "morning end to end and check it against "
                                        "the brute-force oracle")
    p.add_argument("--students", type=int, required=True)
    p.add_argument("--readers", type=int, default=1)
    p.add_argument("--day", type=date.fromisoformat, default=date(2025, 8, 4))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speed", type=float, default=60.0,
                   help="virtual seconds per wall second; 0 = no pacing")
    p.add_argument("--partition", type=parse_partition, default=None,
                   metavar="HH:MM..HH:MM",
                   help="sever the sync link between these local times")
    p.add_argument("--profile", choices=("full", "compressed"), default="full",
                   help="arrival spread: full morning or squeezed into one hour")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("export-log", help="dump the raw edge event log as "
                                          "line-delimited JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_log)

    admin = sub.add_parser("admin", help="management operations against the central API")
    admin_sub = admin.add_subparsers(dest="entity", required=True)

    student = admin_sub.add_parser("student")
    student_sub = student.add_subparsers(dest="action", required=True)
    q = student_sub.add_parser("add")
    _conn_args(q)
    q.add_argument("--given", required=True)
    q.add_argument("--family", required=True)
    q.add_argument("--year", type=int, required=True)
    q.add_argument("--grade", type=int, required=True)
    q.add_argument("--section", required=True)
    q.add_argument("--contact", default="")
    q.set_defaults(func=cmd_student_add)
    q = student_sub.add_parser("list")
    _conn_args(q)
    q.add_argument("--grade", type=int)
    q.add_argument("--section")
    q.set_defaults(func=cmd_student_list)
    q = student_sub.add_parser("set-active")
    _conn_args(q)
    q.add_argument("--code", required=True)
    q.add_argument("--active", choices=("true", "false"), required=True)
    q.set_defaults(func=cmd_student_set_active)

    card = admin_sub.add_parser("card")
    card_sub = card.add_subparsers(dest="action", required=True)
    q = card_sub.add_parser("enroll")
    _conn_args(q)
    q.add_argument("--uid", required=True)
    q.add_argument("--student", required=True)
    q.set_defaults(func=cmd_card_enroll)
    for action, state in (("block", "blocked"), ("unblock", "active")):
        q = card_sub.add_parser(action)
        _conn_args(q)
        q.add_argument("--uid", required=True)
        q.set_defaults(func=cmd_card_set_state, state=state)
    q = card_sub.add_parser("list")
    _conn_args(q)
    q.set_defaults(func=cmd_card_list)

    user = admin_sub.add_parser("user")
    user_sub = user.add_subparsers(dest="action", required=True)
    q = user_sub.add_parser("add")
    _conn_args(q)
    q.add_argument("--new-username", required=True)
    q.add_argument("--new-password", required=True)
    q.add_argument("--role", choices=[r.value for r in Role], required=True)
    q.add_argument("--student-code")
    q.add_argument("--scope", action="append", default=[],
                   help="teacher scope as <grade><section>, e.g. 3B (repeatable)")
    q.set_defaults(func=cmd_user_add)

    report = sub.add_parser("report", help="attendance statistics and CSV export")
    report_sub = report.add_subparsers(dest="action", required=True)
    q = report_sub.add_parser("summary")
    _conn_args(q)
    q.add_argument("--scope", choices=("institution", "grade", "section", "student"),
                   default="institution")
    q.add_argument("--period", choices=("day", "week", "month", "range"), default="day")
    q.add_argument("--anchor")
    q.add_argument("--from", dest="date_from")
    q.add_argument("--to", dest="date_to")
    q.add_argument("--grade", type=int)
    q.add_argument("--section")
    q.add_argument("--student")
    q.add_argument("--chronic", action="store_true")
    q.add_argument("--threshold", type=float)
    q.set_defaults(func=cmd_report_summary)
    q = report_sub.add_parser("export")
    _conn_args(q)
    q.add_argument("--from", dest="date_from")
    q.add_argument("--to", dest="date_to")
    q.add_argument("--grade", type=int)
    q.add_argument("--section")
    q.add_argument("--student")
    q.add_argument("--out", default="-", help="file path or - for stdout")
    q.set_defaults(func=cmd_report_export)

    return parser


def _conn_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--url", default=os.environ.get("ROLLCALL_URL", "http://127.0.0.1:8430"))
    p.add_argument("--username", default=os.environ.get("ROLLCALL_USERNAME"))
    p.add_argument("--password", default=os.environ.get("ROLLCALL_PASSWORD"))


def _client(args) -> CentralClient:
    client = CentralClient(args.url)
    if not args.username or not args.password:
        raise RollcallError("credentials required: --username/--password "
                            "or ROLLCALL_USERNAME/ROLLCALL_PASSWORD")
    client.login(args.username, args.password)
    return client


def _run_until_interrupt(stop) -> None:
    done = threading.Event()

    def handler(signum, frame):
        done.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    done.wait()
    stop()


# -- node commands ----------------------------------------------------------------

def cmd_edge(args) -> int:
    node = EdgeNode.from_config_file(args.config)
    node.start()
    print(f"edge node {node.node_id}: readers on port {node.reader_port}", flush=True)
    _run_until_interrupt(node.stop)
    return 0


def cmd_central(args) -> int:
    cfg = cfgmod.load_config(args.config)
    clock = SystemClock()
    store = CentralStore(cfgmod.get_str(cfg, "central.store"), clock)
    admin_user = cfg.get("central.admin_user")
    if admin_user:
        store.create_actor(admin_user, cfgmod.get_str(cfg, "central.admin_password"),
                           Role.ADMIN, actor="bootstrap")
    for entry in cfg.get("central.nodes", "").split(","):
        entry = entry.strip()
        if entry:
            node_id, _, key = entry.partition(":")
            if not key:
                raise ConfigError(f"central.nodes entry {entry!r} must be node_id:key")
            store.register_node(node_id, key)
    host, port = cfgmod.get_hostport(cfg, "central.listen", "127.0.0.1:8430")
    service = CentralService(
        store, TimeWindowPolicy.from_config(cfg), clock, host=host, port=port,
        cors_origin=cfg.get("central.cors_origin", "*"),
        user_token_ttl_s=cfgmod.get_float(cfg, "central.user_token_ttl_s", 86400.0),
        node_token_ttl_s=cfgmod.get_float(cfg, "central.node_token_ttl_s", 86400.0))
    service.start()
    print(f"central service on port {service.port}", flush=True)
    _run_until_interrupt(service.stop)
    store.close()
    return 0


def cmd_simulate(args) -> int:
    spec = SimulationSpec(students=args.students, readers=max(1, args.readers),
                          day=args.day, seed=args.seed, speed=args.speed,
                          partition=args.partition, arrival_profile=args.profile)
    result = MorningSimulation(spec).run()
    sys.stdout.write(result.report)
    if result.latencies_ms:
        lat = result.latencies_ms
        print(f"scan round-trips: n={len(lat)} p50={statistics.median(lat):.2f}ms "
              f"p99={lat[int(len(lat) * 0.99) - 1 if len(lat) > 1 else 0]:.2f}ms "
              f"max={lat[-1]:.2f}ms", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_export_log(args) -> int:
    cfg = cfgmod.load_config(args.config)
    store = EdgeStore(cfgmod.get_str(cfg, "edge.store"),
                      node_id=cfgmod.get_str(cfg, "edge.node_id"))
    try:
        count = store.export_log(args.out)
    finally:
        store.close()
    print(f"exported {count} events to {args.out}")
    return 0


# -- admin commands -----------------------------------------------------------------

def cmd_student_add(args) -> int:
    student = _client(args).create_student(args.given, args.family, args.year,
                                           args.grade, args.section, args.contact)
    print(student["student_code"])
    return 0


def cmd_student_list(args) -> int:
    for s in _client(args).list_students(grade=args.grade, section=args.section):
        marker = "" if s["active"] else " (inactive)"
        print(f"{s['student_code']}  {s['family_names']}, {s['given_names']}{marker}")
    return 0


def cmd_student_set_active(args) -> int:
    _client(args).set_student_active(args.code, args.active == "true")
    print("ok")
    return 0


def cmd_card_enroll(args) -> int:
    card = _client(args).enroll_card(args.uid, args.student)
    print(f"{card['uid']} -> {card['linked_student']} ({card['state']})")
    return 0


def cmd_card_set_state(args) -> int:
    card = _client(args).set_card_state(args.uid, args.state)
    print(f"{card['uid']} {card['state']}")
    return 0


def cmd_card_list(args) -> int:
    for c in _client(args).list_cards():
        print(f"{c['uid']}  {c['state']:8} {c['linked_student'] or '-'}")
    return 0


def cmd_user_add(args) -> int:
    scopes = []
    for raw in args.scope:
        scopes.append({"grade": int(raw[0]), "section": raw[1:]})
    _client(args).create_actor(args.new_username, args.new_password, args.role,
                               student_code=args.student_code, scopes=scopes)
    print(args.new_username)
    return 0


# -- report commands -----------------------------------------------------------------

def cmd_report_summary(args) -> int:
    params: dict = {"scope": args.scope, "period": args.period}
    for key, value in (("anchor", args.anchor), ("from", args.date_from),
                       ("to", args.date_to), ("grade", args.grade),
                       ("section", args.section), ("student", args.student)):
        if value is not None:
            params[key] = value
    if args.chronic:
        params["chronic"] = "1"
        if args.threshold is not None:
            params["threshold"] = args.threshold
    summary = _client(args).report_summary(**params)
    counts = summary["counts"]
    print(f"scope={summary['scope']} {summary['period_start']}..{summary['period_end']} "
          f"school-days={summary['school_days']} roster={summary['roster_size']}"
          + (" (provisional)" if summary["provisional"] else ""))
    print(f"present={counts['present']} late={counts['late']} "
          f"absent={counts['absent']} justified={counts['justified']}")
    print(f"attendance-rate={summary['attendance_rate']:.4f} "
          f"tardiness-rate={summary['tardiness_rate']:.4f}")
    if "chronic" in summary:
        c = summary["chronic"]
        days = ",".join(c["evidence_days"]) or "-"
        print(f"chronic={'yes' if c['flagged'] else 'no'} "
              f"threshold={c['threshold']} evidence={days}")
    return 0


def cmd_report_export(args) -> int:
    params = {}
    for key, value in (("from", args.date_from), ("to", args.date_to),
                       ("grade", args.grade), ("section", args.section),
                       ("student", args.student)):
        if value is not None:
            params[key] = value
    data = _client(args).export_csv(**params)
    if args.out == "-":
        sys.stdout.buffer.write(data)
    else:
        with open(args.out, "wb") as fh:
            fh.write(data)
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
