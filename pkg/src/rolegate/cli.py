"""Admin command line: thin wrappers over the engine, file-based like sqlite.

One-shot subcommands load the live state file under --data-dir, apply the
operation and write it back.  Do not point the CLI at a data directory a
running service is using; drive the HTTP API instead.

Exit codes: 0 success (and permits), 1 domain error or deny, 2 usage error.
"""

from __future__ import annotations

import argparse
import signal
import sys
import threading
from pathlib import Path
from typing import Optional

from .config import ConfigError, ServiceConfig, load_config, parse_listen
from .decision import AccessRequest
from .directory import Action, Permission, RbacError, RestrictionPolicy
from .engine import Engine
from .migration import ValidationReport
from .restriction import iso8601
from .service import Service, build_engine

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


def _load(args) -> ServiceConfig:
    overrides = {
        "data_dir": Path(args.data_dir) if args.data_dir else None,
        "plain_rbac": True if args.plain_rbac else None,
    }
    return load_config(Path(args.config) if args.config else None, **overrides)


def _engine(args) -> Engine:
    return build_engine(_load(args))


def _print_report(report: ValidationReport, stream) -> None:
    print(f"ok={'true' if report.ok else 'false'}", file=stream)
    for issue in report.issues:
        print(f"{issue.severity}\t{issue.locator}\t{issue.message}", file=stream)


def _context_pairs(raw: list[str]) -> dict[str, str]:
    context = {}
    for item in raw:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise RbacError(f"context must be key=value, got {item!r}")
        context[key] = value
    return context


def cmd_serve(args) -> int:
    import logging

    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s %(message)s"
    )
    config = _load(args)
    if args.listen:
        config.host, config.port = parse_listen(args.listen)
    if args.api_token is not None:
        config.api_token = args.api_token
    if args.snapshot_interval is not None:
        config.snapshot_interval_seconds = args.snapshot_interval
    service = Service(config)
    service.start()
    stop = threading.Event()

    def handle_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, handle_signal)
    signal.signal(signal.SIGINT, handle_signal)
    worker = threading.Thread(target=service.serve_forever, daemon=True)
    worker.start()
    print(f"serving on {config.host}:{service.port}", flush=True)
    stop.wait()
    service.shutdown()
    return EXIT_OK


def cmd_check(args, explain: bool = False) -> int:
    engine = _engine(args)
    request = AccessRequest(
        subject=args.user,
        resource=args.resource,
        action=Action(args.action),
        context=_context_pairs(args.context or []),
    )
    if explain:
        decision, trace = engine.explain(request)
        for step in trace:
            print(f"{step.phase}\t{step.item}\t{step.outcome}")
    else:
        decision = engine.check_access(request)
        engine.flush()  # decisions move counters and audit; persist them
    for ob in decision.obligations:
        print(f"obligation {ob.policy_id} {ob.modality} {ob.action_token}")
    if decision.effect.value == "permit":
        print(f"PERMIT role={decision.matched_role}")
        return EXIT_OK
    print(f"DENY reason={decision.reason.value}")
    return EXIT_DOMAIN


def cmd_user_add(args) -> int:
    engine = _engine(args)
    engine.create_user(args.name)
    print(f"created user {args.name}")
    return EXIT_OK


def cmd_role_add(args) -> int:
    engine = _engine(args)
    engine.create_role(args.name, args.inherits or [])
    print(f"created role {args.name}")
    return EXIT_OK


def cmd_grant(args) -> int:
    engine = _engine(args)
    engine.grant_permission(args.role, Permission(args.resource, Action(args.action)))
    print(f"granted ({args.resource}, {args.action}) to {args.role}")
    return EXIT_OK


def cmd_assign(args) -> int:
    engine = _engine(args)
    assignment = engine.assign_role(args.user, args.role)
    print(f"assigned {args.user} to {args.role} at {assignment.assigned_at}")
    return EXIT_OK


def cmd_revoke(args) -> int:
    engine = _engine(args)
    engine.revoke_role(args.user, args.role)
    print(f"revoked {args.role} from {args.user}")
    return EXIT_OK


def cmd_sod_add(args) -> int:
    engine = _engine(args)
    engine.add_sod_constraint(args.role_a, args.role_b)
    print(f"added exclusive pair ({args.role_a}, {args.role_b})")
    return EXIT_OK


def cmd_restrict_add(args) -> int:
    engine = _engine(args)
    policy = RestrictionPolicy(
        id=args.id,
        scope=args.scope,
        max_transactions=args.max_transactions,
        window_seconds=args.window_seconds,
        target=args.target,
        max_users=args.max_users,
    )
    engine.add_restriction(policy)
    print(f"added restriction {args.id}")
    return EXIT_OK


def cmd_export(args) -> int:
    engine = _engine(args)
    xml = engine.export_xml()
    if args.file:
        Path(args.file).write_bytes(xml)
        print(f"exported to {args.file}")
    else:
        sys.stdout.buffer.write(xml)
    return EXIT_OK


def cmd_import(args) -> int:
    engine = _engine(args)
    engine.import_xml(Path(args.file).read_bytes())
    print(f"imported {args.file}")
    return EXIT_OK


def cmd_validate(args) -> int:
    engine = _engine(args)
    report = engine.validate_xml(Path(args.file).read_bytes())
    _print_report(report, sys.stdout)
    return EXIT_OK if report.ok else EXIT_DOMAIN


def cmd_snapshot_create(args) -> int:
    engine = _engine(args)
    meta = engine.create_snapshot(reason=args.reason or "manual")
    print(f"snapshot {meta.id} created at {iso8601(meta.created_at)} checksum {meta.checksum}")
    return EXIT_OK


def cmd_snapshot_list(args) -> int:
    engine = _engine(args)
    verify = bool(args.verify or getattr(args, "verify_global", False))
    for e in engine.list_snapshots(verify=verify):
        status = "-" if e.verified is None else ("ok" if e.verified else "corrupt")
        print(f"{e.id}\t{iso8601(e.created_at)}\t{e.checksum}\t{e.size_bytes}\t{status}")
    return EXIT_OK


def cmd_snapshot_restore(args) -> int:
    engine = _engine(args)
    if args.id == "latest":
        latest = engine.snapshot_store.latest_id() if engine.snapshot_store else None
        if latest is None:
            raise RbacError("no snapshots in catalog")
        snapshot_id = latest
    else:
        snapshot_id = int(args.id)
    meta = engine.restore_snapshot(snapshot_id)
    print(f"restored snapshot {meta.id}")
    return EXIT_OK


def cmd_audit(args) -> int:
    engine = _engine(args)
    records = engine.query_audit(
        subject=args.subject,
        effect=args.effect,
        since=args.since,
        until=args.until,
        limit=args.limit,
    )
    for r in records:
        print(
            "\t".join(
                (
                    iso8601(r.at),
                    r.request_id,
                    r.subject,
                    r.resource,
                    r.action,
                    r.effect,
                    r.reason,
                    r.matched_role or "-",
                )
            )
        )
    return EXIT_OK


def cmd_anomalies(args) -> int:
    engine = _engine(args)
    events = engine.drain_anomalies()
    engine.flush()  # the drain is consumed state; persist it
    for e in events:
        print(
            "\t".join(
                (iso8601(e.at), e.policy, e.principal, str(e.observed), str(e.limit), e.request_id)
            )
        )
    return EXIT_OK


def cmd_metrics(args) -> int:
    engine = _engine(args)
    m = engine.metrics()
    print(f"num-users={m.num_users}")
    print(f"num-roles={m.num_roles}")
    print(f"num-permissions={m.num_permissions}")
    print(f"num-assignments={m.num_assignments}")
    ratio = m.ratio_decimal()
    exact = str(m.role_user_ratio) if m.role_user_ratio is not None else "undefined"
    print(f"role-user-ratio={ratio if ratio is not None else 'undefined'}")
    print(f"role-user-ratio-exact={exact}")
    return EXIT_OK


def cmd_capabilities(args) -> int:
    engine = _engine(args)
    caps = engine.capabilities()
    rows = [
        ("xml-based-migration", caps.xml_based_migration),
        ("restricting-user-role", caps.restricting_user_role),
        ("backup-restoration", caps.backup_restoration),
        ("transaction-limit", caps.transaction_limit),
    ]
    for name, enabled in rows:
        print(f"{name:<24}{'yes' if enabled else 'no'}")
    print(f"{'security-level':<24}{caps.security_level}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rolegate",
        description="Role-based access control engine with policy extensions",
    )
    parser.add_argument("--data-dir", help="engine data directory")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--plain-rbac",
        action="store_true",
        help="compatibility mode: disable migration, restrictions, obligations and backup",
    )
    parser.add_argument(
        "--verify", action="store_true", dest="verify_global",
        help="re-verify snapshot checksums where applicable",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--listen", help="host:port (default 127.0.0.1:8640)")
    p.add_argument("--api-token", help="shared secret for admin endpoints")
    p.add_argument("--snapshot-interval", type=int, help="seconds between scheduled snapshots")
    p.set_defaults(func=cmd_serve)

    for name, is_explain in (("check", False), ("explain", True)):
        p = sub.add_parser(name, help="evaluate an access request")
        p.add_argument("--user", required=True)
        p.add_argument("--resource", required=True)
        p.add_argument("--action", required=True, choices=[a.value for a in Action])
        p.add_argument("--context", action="append", metavar="KEY=VALUE")
        p.set_defaults(func=lambda a, e=is_explain: cmd_check(a, explain=e))

    p = sub.add_parser("user", help="user administration")
    usub = p.add_subparsers(dest="subcommand", required=True)
    pa = usub.add_parser("add")
    pa.add_argument("name")
    pa.set_defaults(func=cmd_user_add)

    p = sub.add_parser("role", help="role administration")
    rsub = p.add_subparsers(dest="subcommand", required=True)
    pa = rsub.add_parser("add")
    pa.add_argument("name")
    pa.add_argument("--inherits", action="append", metavar="ROLE")
    pa.set_defaults(func=cmd_role_add)

    p = sub.add_parser("grant", help="grant a permission to a role")
    p.add_argument("--role", required=True)
    p.add_argument("--action", required=True, choices=[a.value for a in Action])
    p.add_argument("--resource", required=True)
    p.set_defaults(func=cmd_grant)

    p = sub.add_parser("assign", help="assign a role to a user")
    p.add_argument("--user", required=True)
    p.add_argument("--role", required=True)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("revoke", help="revoke a role from a user")
    p.add_argument("--user", required=True)
    p.add_argument("--role", required=True)
    p.set_defaults(func=cmd_revoke)

    p = sub.add_parser("sod", help="separation-of-duty constraints")
    ssub = p.add_subparsers(dest="subcommand", required=True)
    pa = ssub.add_parser("add")
    pa.add_argument("role_a")
    pa.add_argument("role_b")
    pa.set_defaults(func=cmd_sod_add)

    p = sub.add_parser("restrict", help="restriction policies")
    rsub = p.add_subparsers(dest="subcommand", required=True)
    pa = rsub.add_parser("add")
    pa.add_argument("--id", required=True)
    pa.add_argument("--scope", required=True, choices=["per-user", "per-role"])
    pa.add_argument("--target")
    pa.add_argument("--max-transactions", required=True, type=int)
    pa.add_argument("--window-seconds", required=True, type=int)
    pa.add_argument("--max-users", type=int)
    pa.set_defaults(func=cmd_restrict_add)

    p = sub.add_parser("export", help="write the migration bundle XML")
    p.add_argument("file", nargs="?")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="replace state from a migration bundle")
    p.add_argument("file")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("validate", help="validate a migration bundle")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("snapshot", help="backup and restore")
    snsub = p.add_subparsers(dest="subcommand", required=True)
    pa = snsub.add_parser("create")
    pa.add_argument("--reason")
    pa.set_defaults(func=cmd_snapshot_create)
    pa = snsub.add_parser("list")
    pa.add_argument("--verify", action="store_true")
    pa.set_defaults(func=cmd_snapshot_list)
    pa = snsub.add_parser("restore")
    pa.add_argument("id", help="snapshot id or 'latest'")
    pa.set_defaults(func=cmd_snapshot_restore)

    p = sub.add_parser("audit", help="query the audit log")
    p.add_argument("--subject")
    p.add_argument("--effect", choices=["permit", "deny"])
    p.add_argument("--since", type=int)
    p.add_argument("--until", type=int)
    p.add_argument("--limit", type=int, default=1000)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("anomalies", help="drain pending anomaly events")
    p.set_defaults(func=cmd_anomalies)

    p = sub.add_parser("metrics", help="directory counts and role/user ratio")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("capabilities", help="feature matrix of this engine")
    p.set_defaults(func=cmd_capabilities)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RbacError as exc:
        from .migration import ValidationFailed

        if isinstance(exc, ValidationFailed):
            _print_report(exc.report, sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
