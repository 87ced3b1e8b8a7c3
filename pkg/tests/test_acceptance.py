"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  Criterion 8 starts real server subprocesses and SIGKILLs them, so the
whole suite takes around a minute; everything else is seconds.
"""

import http.client
import random
import socket
import subprocess
import sys
import threading
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import pytest

from rolegate import (
    AccessRequest,
    Action,
    ChecksumMismatch,
    Engine,
    Permission,
)
from rolegate import directory as d
from rolegate.cli import main as cli_main
from rolegate.decision import Effect
from rolegate.migration import export_bundle, import_bundle, validate_bundle
from rolegate.restriction import RestrictionMonitor
from rolegate.snapshots import SnapshotStore, payload_span

from oracles import (
    FakeClock,
    decision_oracle,
    random_directory,
    random_request,
    user_closure_oracle,
    permission_closure_oracle,
)
from test_migration import same_directory, three_role_state

DATA = Path(__file__).parent / "data"


@contextmanager
def criterion(number, description):
    try:
        yield
    except BaseException:
        print(f"\nFAIL criterion {number}: {description}")
        raise
    print(f"\nPASS criterion {number}: {description}")


# -- criterion 1 -------------------------------------------------------------


def test_criterion_1_table_reproduction(tmp_path, capsys):
    with criterion(1, "capabilities match the feature matrix in both modes"):
        started = time.monotonic()
        policy = Engine().capabilities()
        plain = Engine(plain_rbac=True).capabilities()
        assert (
            policy.xml_based_migration
            and policy.restricting_user_role
            and policy.backup_restoration
            and policy.transaction_limit
        )
        assert policy.security_level == "MORE"
        assert not (
            plain.xml_based_migration
            or plain.restricting_user_role
            or plain.backup_restoration
            or plain.transaction_limit
        )
        assert plain.security_level == "LESS"

        # same answer through the CLI surface
        assert cli_main(["--data-dir", str(tmp_path / "c1"), "capabilities"]) == 0
        out = capsys.readouterr().out
        assert out.count("yes") == 4 and "MORE" in out
        assert cli_main(["--data-dir", str(tmp_path / "c1"), "--plain-rbac", "capabilities"]) == 0
        out = capsys.readouterr().out
        assert out.count("no") == 4 and "LESS" in out
        assert time.monotonic() - started < 1.0


# -- criteria 2 + 3 ----------------------------------------------------------


@pytest.fixture(scope="module")
def oracle_suite():
    """1000 random directories x 20 requests through the full engine path."""
    rng = random.Random(0xC0FFEE)
    mismatches = []
    permits = []
    checks = 0
    started = time.monotonic()
    for _ in range(1000):
        state = random_directory(rng, max_users=10, max_roles=8, max_perms=20)
        engine = Engine(state, monitor=RestrictionMonitor(), clock=lambda: 1000.0)
        for _ in range(20):
            subject, resource, action = random_request(rng, state)
            decision = engine.check_access(
                AccessRequest(subject, resource, Action(action))
            )
            expected_effect, granting = decision_oracle(state, subject, resource, action)
            checks += 1
            if decision.effect.value != expected_effect:
                mismatches.append((state, subject, resource, action, decision))
            if decision.effect is Effect.PERMIT:
                permits.append((state, subject, resource, action, decision, granting))
    return {
        "checks": checks,
        "mismatches": mismatches,
        "permits": permits,
        "elapsed": time.monotonic() - started,
    }


def test_criterion_2_decision_oracle_equivalence(oracle_suite):
    with criterion(2, "check_access matches brute-force closure enumeration"):
        assert oracle_suite["checks"] >= 20_000
        assert oracle_suite["mismatches"] == []
        assert oracle_suite["elapsed"] < 30.0, f"took {oracle_suite['elapsed']:.1f}s"


def test_criterion_3_two_phase_structural_check(oracle_suite):
    with criterion(3, "every permit re-verifies via closures computed separately"):
        assert len(oracle_suite["permits"]) > 0
        failures = 0
        for state, subject, resource, action, decision, granting in oracle_suite["permits"]:
            role = decision.matched_role
            if role not in user_closure_oracle(state, subject):
                failures += 1
                continue
            perms = permission_closure_oracle(state, role)
            if not any(
                p.resource == resource and p.action.value == action for p in perms
            ):
                failures += 1
            if role != min(granting):
                failures += 1
        assert failures == 0


# -- criterion 4 -------------------------------------------------------------


def _hammer(engine, attempts, threads=64):
    permits = []
    barrier = threading.Barrier(threads)
    per_thread = [attempts // threads] * threads
    for i in range(attempts % threads):
        per_thread[i] += 1

    def worker(count, idx):
        barrier.wait()
        for j in range(count):
            decision = engine.check_access(
                AccessRequest("alice", "docs", Action.READ, {}, f"h{idx}-{j}")
            )
            if decision.effect is Effect.PERMIT:
                permits.append(1)

    pool = [
        threading.Thread(target=worker, args=(per_thread[i], i)) for i in range(threads)
    ]
    for t in pool:
        t.start()
    for t in pool:
        t.join()
    return len(permits)


def test_criterion_4_restriction_enforcement():
    with criterion(4, "exactly L admits per window under 64-way contention"):
        for scope in ("per-user", "per-role"):
            for limit in (1, 3, 10):
                for window in (1, 60):
                    clock = FakeClock(50_000)
                    engine = Engine(clock=clock)
                    engine.create_user("alice")
                    engine.create_role("worker")
                    engine.grant_permission("worker", Permission("docs", Action.READ))
                    engine.assign_role("alice", "worker")
                    engine.add_restriction(
                        d.RestrictionPolicy(
                            id="lim",
                            scope=scope,
                            max_transactions=limit,
                            window_seconds=window,
                        )
                    )
                    attempts = 100 * limit
                    admitted = _hammer(engine, attempts)
                    assert admitted == limit, f"{scope} L={limit} W={window}: {admitted}"
                    events = engine.drain_anomalies()
                    assert len(events) == attempts - limit  # every rejection accounted
                    assert all(e.observed == limit + 1 and e.limit == limit for e in events)

                    clock.advance(window)  # next fixed window: exactly L again
                    admitted = _hammer(engine, attempts)
                    assert admitted == limit
                    assert len(engine.drain_anomalies()) == attempts - limit


# -- criterion 5 -------------------------------------------------------------


def test_criterion_5_admin_knows(tmp_path):
    with criterion(5, "every quota rejection correlates in queue and log file"):
        log = tmp_path / "anomalies.log"
        clock = FakeClock(60_000)
        engine = Engine(
            clock=clock, monitor=RestrictionMonitor(anomaly_log_path=str(log))
        )
        engine.create_user("alice")
        engine.create_role("worker")
        engine.grant_permission("worker", Permission("docs", Action.READ))
        engine.assign_role("alice", "worker")
        engine.add_restriction(
            d.RestrictionPolicy(
                id="lim", scope="per-user", max_transactions=2, window_seconds=3600
            )
        )
        rejected_ids = []
        for i in range(10):
            rid = f"corr-{i}"
            decision = engine.check_access(
                AccessRequest("alice", "docs", Action.READ, {}, rid)
            )
            if decision.effect is Effect.DENY:
                rejected_ids.append(rid)
        assert len(rejected_ids) == 8

        drained = {e.request_id for e in engine.drain_anomalies()}
        logged = {line.split("\t")[-1] for line in log.read_text().splitlines()}
        for rid in rejected_ids:  # 100% correlation, both channels
            assert rid in drained and rid in logged


# -- criterion 6 -------------------------------------------------------------


def test_criterion_6_migration_round_trip():
    with criterion(6, "500 randomized states round-trip; goldens match"):
        rng = random.Random(0xB00C)
        for _ in range(500):
            state = random_directory(
                rng, max_users=6, max_roles=6, with_sod=True, with_extras=True
            )
            xml = export_bundle(state)
            rebuilt = import_bundle(xml, now=0)
            assert same_directory(state, rebuilt)
            assert export_bundle(rebuilt) == xml
        assert export_bundle(d.DirectoryState.empty()) == (
            DATA / "empty.rbac.xml"
        ).read_bytes()
        assert export_bundle(three_role_state()) == (
            DATA / "three_roles.rbac.xml"
        ).read_bytes()


# -- criterion 7 -------------------------------------------------------------


def _request_suite(rng, count=200):
    subjects = ["alice", "bob", "ghost"]
    resources = ["docs", "ledger", "void"]
    actions = [Action.READ, Action.WRITE, Action.DELETE]
    return [
        (
            rng.choice(subjects),
            rng.choice(resources),
            rng.choice(actions),
            rng.randint(0, 1),  # seconds to advance before the request
        )
        for _ in range(count)
    ]


def _run_suite(engine, clock, suite):
    verdicts = []
    for i, (subject, resource, action, delta) in enumerate(suite):
        clock.advance(delta)
        decision = engine.check_access(
            AccessRequest(subject, resource, action, {}, f"s{i}")
        )
        verdicts.append((decision.effect.value, decision.reason.value))
    return verdicts


def test_criterion_7_backup_restore_fidelity(tmp_path):
    with criterion(7, "restore reproduces exports, verdicts and counters"):
        clock = FakeClock(70_000)
        engine = Engine(clock=clock, snapshot_store=SnapshotStore(tmp_path / "snaps"))
        for user in ("alice", "bob"):
            engine.create_user(user)
        engine.create_role("employee")
        engine.create_role("admin", ["employee"])
        engine.grant_permission("employee", Permission("docs", Action.READ))
        engine.grant_permission("admin", Permission("ledger", Action.WRITE))
        engine.assign_role("alice", "admin")
        engine.assign_role("bob", "employee")
        engine.add_restriction(
            d.RestrictionPolicy(
                id="lim", scope="per-user", max_transactions=3, window_seconds=60
            )
        )

        export_pre = engine.export_xml()
        meta = engine.create_snapshot(reason="fidelity")
        capture_time = clock.t

        suite = _request_suite(random.Random(0xFEED))
        capture_verdicts = _run_suite(engine, clock, suite)
        assert {"permit", "deny"} <= {v[0] for v in capture_verdicts}
        assert any(v[1] == "quota-exceeded" for v in capture_verdicts)

        mutation_rng = random.Random(0xDEAD)
        for i in range(50):
            kind = mutation_rng.randrange(4)
            try:
                if kind == 0:
                    engine.create_user(f"mut-user-{i}")
                elif kind == 1:
                    engine.create_role(f"mut-role-{i}")
                elif kind == 2:
                    engine.grant_permission(
                        "employee", Permission(f"mut-res-{i}", Action.DELETE)
                    )
                else:
                    engine.assign_role(f"mut-user-{i - 1}", "employee")
            except d.RbacError:
                pass
        assert engine.export_xml() != export_pre

        engine.restore_snapshot(meta.id)
        assert engine.export_xml() == export_pre  # byte-for-byte

        clock.set(capture_time)
        replay_verdicts = _run_suite(engine, clock, suite)
        assert replay_verdicts == capture_verdicts  # includes counter state

        # corruption: flipping any payload byte is detected, state untouched
        store = SnapshotStore(tmp_path / "corrupt")
        small = Engine(clock=clock, snapshot_store=store)
        small.create_user("solo")
        small_meta = small.create_snapshot()
        state_before = small.state
        path = store.path_for(small_meta.id)
        blob = path.read_bytes()
        start, end = payload_span(blob)
        for i in range(start, end):
            corrupted = bytearray(blob)
            corrupted[i] ^= 0x01
            path.write_bytes(bytes(corrupted))
            with pytest.raises(ChecksumMismatch):
                small.restore_snapshot(small_meta.id)
            assert small.state is state_before
        path.write_bytes(blob)
        small.restore_snapshot(small_meta.id)  # pristine file still restores


# -- criterion 8 -------------------------------------------------------------


def _free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _http(port, method, path, body=None, timeout=5):
    conn = http.client.HTTPConnection("127.0.0.1", port, timeout=timeout)
    try:
        conn.request(method, path, body=body.encode() if isinstance(body, str) else body)
        resp = conn.getresponse()
        return resp.status, resp.read()
    finally:
        conn.close()


def _wait_health(port, deadline=10.0):
    end = time.monotonic() + deadline
    while time.monotonic() < end:
        try:
            status, _ = _http(port, "GET", "/v1/health", timeout=1)
            if status == 200:
                return
        except OSError:
            time.sleep(0.05)
    raise AssertionError("server did not become healthy")


def _spawn_server(data_dir, port):
    return subprocess.Popen(
        [
            sys.executable,
            "-m",
            "rolegate.cli",
            "--data-dir",
            str(data_dir),
            "serve",
            "--listen",
            f"127.0.0.1:{port}",
            "--snapshot-interval",
            "1",
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )


def test_criterion_8_crash_availability(tmp_path):
    with criterion(8, "kill/restart/restore always recovers the last snapshot"):
        rng = random.Random(0xC4A5)
        data_dir = tmp_path / "crash-data"
        snap_dir = data_dir / "snapshots"
        for iteration in range(10):
            port = _free_port()
            proc = _spawn_server(data_dir, port)
            try:
                _wait_health(port)
                status, _ = _http(port, "POST", "/v1/snapshots", "reason=initial\n")
                assert status == 201
                deadline = time.monotonic() + rng.uniform(0.2, 1.5)
                i = 0
                while time.monotonic() < deadline:
                    try:
                        _http(
                            port,
                            "POST",
                            "/v1/users",
                            f"name=crash-{iteration}-{i}\n",
                            timeout=1,
                        )
                    except OSError:
                        break
                    i += 1
                    time.sleep(0.02)
            finally:
                proc.kill()  # SIGKILL: no cleanup, no flush
                proc.wait(timeout=10)

            store = SnapshotStore(snap_dir)
            entries = store.list_entries(verify=True)
            assert entries, "at least one durable snapshot"
            assert all(e.verified for e in entries), "no partial catalog entries"
            latest = entries[-1].id

            code = cli_main(
                ["--data-dir", str(data_dir), "snapshot", "restore", str(latest)]
            )
            assert code == 0

            port = _free_port()
            proc = _spawn_server(data_dir, port)
            try:
                _wait_health(port)
                status, served_xml = _http(port, "GET", "/v1/export")
                assert status == 200
                expected = export_bundle(store.load(latest).state)
                assert served_xml == expected, "serving state equals latest snapshot"
            finally:
                proc.terminate()
                proc.wait(timeout=10)


# -- criterion 9 -------------------------------------------------------------


def test_criterion_9_metrics_fixture():
    with criterion(9, "role/user ratio is exactly 5.0 on the 10/5/50 fixture"):
        engine = Engine()
        for i in range(10):
            engine.create_user(f"user{i}")
        for j in range(5):
            engine.create_role(f"role{j}")
        granted = 0
        for j in range(5):
            for k in range(4):
                engine.grant_permission(f"role{j}", Permission(f"res{k}", Action.READ))
                granted += 1
        assert granted == 20
        for i in range(10):
            for j in range(5):
                engine.assign_role(f"user{i}", f"role{j}")
        m = engine.metrics()
        assert m.num_users == 10
        assert m.num_roles == 5
        assert m.num_permissions == 20
        assert m.num_assignments == 50
        assert m.role_user_ratio == Fraction(5, 1)
        assert m.ratio_decimal() == "5.0"


# -- criterion 10 ------------------------------------------------------------


def test_criterion_10_no_user_permission_channel():
    with criterion(10, "no user-to-permission association exists anywhere"):
        import dataclasses

        # persisted format: a user element may only contain memberships
        crafted = (
            b'<migration format-version="1.0">'
            b'<users><user name="eve">'
            b'<permission action="read" resource="docs"/>'
            b"</user></users></migration>"
        )
        report = validate_bundle(crafted)
        assert not report.ok
        assert any("<permission> inside <user>" in i.message for i in report.issues)

        # exported format: permissions appear under roles only
        xml = export_bundle(three_role_state())
        import xml.etree.ElementTree as ET

        root = ET.fromstring(xml)
        for user in root.find("users"):
            assert {child.tag for child in user} <= {"member-of"}
        assert all(
            perm.tag == "permission"
            for role in root.find("roles")
            for perm in role
            if perm.tag not in ("inherits",)
        )

        # state schema: users carry no permissions; only Role does
        field_types = {
            f.name: str(f.type) for f in dataclasses.fields(d.DirectoryState)
        }
        assert field_types["users"] == "frozenset[str]"
        assert "Permission" not in field_types["users"]
        assert field_types["assignments"] == "dict[tuple[str, str], int]"

        # API surface: the only grant operation targets roles, and a user
        # name is not accepted in the role namespace
        engine = Engine()
        engine.create_user("eve")
        with pytest.raises(d.UnknownRole):
            engine.grant_permission("eve", Permission("docs", Action.READ))
        grant_ops = [
            n
            for n in dir(engine)
            if "grant" in n.lower() and not n.startswith("_")
        ]
        assert grant_ops == ["grant_permission"]
        assert not any(
            "user" in n.lower() and "grant" in n.lower() for n in dir(d)
        )
