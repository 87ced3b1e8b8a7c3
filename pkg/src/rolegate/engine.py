"""Engine facade: single-writer directory, concurrent decisions, quiesce.

Decision checks share the read side of a writer-preferring RW lock and never
block each other.  Administrative mutations, bundle import and snapshot
restore take the write side: in-flight decisions finish, new ones queue, then
the immutable state reference (and, for import/restore, the monitor state)
swaps atomically.  No decision can ever observe a half-applied change.

With ``plain_rbac=True`` the engine reproduces a bare two-phase RBAC system:
migration, snapshots, restriction enforcement and obligation policies are all
disabled, which is exactly the feature matrix the capabilities report calls
security level LESS.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

from . import directory as d
from .decision import (
    AccessRequest,
    Decision,
    Effect,
    Evaluation,
    ObligationPolicy,
    Reason,
    TraceStep,
    evaluate,
    finish_trace,
    new_request_id,
)
from .directory import (
    Assignment,
    DirectoryMetrics,
    DirectoryState,
    Permission,
    RbacError,
    RestrictionPolicy,
    UnknownRole,
)
from .migration import ValidationReport, export_bundle, import_bundle, validate_bundle
from .restriction import AuditRecord, AnomalyEvent, RestrictionMonitor, check_user_cap
from .snapshots import (
    EngineCut,
    SnapshotEntry,
    SnapshotMeta,
    SnapshotStore,
    read_state_file,
    write_state_file,
)

SECURITY_MORE = "MORE"
SECURITY_LESS = "LESS"


class FeatureDisabled(RbacError):
    code = "feature-disabled"


@dataclass(frozen=True)
class CapabilitiesReport:
    """Feature matrix of the running engine (policy mode vs. plain RBAC)."""

    xml_based_migration: bool
    restricting_user_role: bool
    backup_restoration: bool
    transaction_limit: bool
    security_level: str


class RWLock:
    """Writer-preferring readers-writer lock.

    A waiting writer blocks new readers, so a quiesce (import/restore) drains
    in-flight decisions and is never starved by a stream of checks.
    """

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._writers_waiting = 0

    @contextmanager
    def read(self) -> Iterator[None]:
        with self._cond:
            while self._writer or self._writers_waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self) -> Iterator[None]:
        with self._cond:
            self._writers_waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._writers_waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class Engine:
    """The authorization engine: directory + decisions + monitor + snapshots."""

    def __init__(
        self,
        state: Optional[DirectoryState] = None,
        *,
        monitor: Optional[RestrictionMonitor] = None,
        obligations: Sequence[ObligationPolicy] = (),
        clock: Callable[[], float] = time.time,
        plain_rbac: bool = False,
        snapshot_store: Optional[SnapshotStore] = None,
        live_path: Optional[Path] = None,
    ) -> None:
        self._state = state if state is not None else DirectoryState.empty()
        self._monitor = monitor if monitor is not None else RestrictionMonitor()
        self._obligations: tuple[ObligationPolicy, ...] = tuple(obligations)
        self._clock = clock
        self.plain_rbac = plain_rbac
        self.snapshot_store = snapshot_store
        self.live_path = Path(live_path) if live_path else None
        self._rw = RWLock()

    @classmethod
    def open(
        cls,
        live_path: Path,
        *,
        monitor: Optional[RestrictionMonitor] = None,
        obligations: Sequence[ObligationPolicy] = (),
        clock: Callable[[], float] = time.time,
        plain_rbac: bool = False,
        snapshot_store: Optional[SnapshotStore] = None,
    ) -> "Engine":
        """Load the engine from a live state file, or start empty if absent."""
        live_path = Path(live_path)
        engine = cls(
            monitor=monitor,
            obligations=obligations,
            clock=clock,
            plain_rbac=plain_rbac,
            snapshot_store=snapshot_store,
            live_path=live_path,
        )
        if live_path.is_file():
            cut = read_state_file(live_path)
            engine._state = cut.state
            engine._monitor.load(list(cut.counters), list(cut.audit), list(cut.anomalies))
        return engine

    # -- introspection -------------------------------------------------------

    @property
    def state(self) -> DirectoryState:
        """Immutable view of the current directory; safe to hold across calls."""
        return self._state

    @property
    def monitor(self) -> RestrictionMonitor:
        return self._monitor

    @property
    def obligations(self) -> tuple[ObligationPolicy, ...]:
        return self._obligations

    def now(self) -> int:
        return int(self._clock())

    def capabilities(self) -> CapabilitiesReport:
        enabled = not self.plain_rbac
        return CapabilitiesReport(
            xml_based_migration=enabled,
            restricting_user_role=enabled,
            backup_restoration=enabled,
            transaction_limit=enabled,
            security_level=SECURITY_MORE if enabled else SECURITY_LESS,
        )

    def metrics(self) -> DirectoryMetrics:
        with self._rw.read():
            return d.metrics(self._state)

    # -- administrative mutations ---------------------------------------------

    def create_user(self, name: str) -> str:
        with self._rw.write():
            self._state = d.create_user(self._state, name)
            self._flush_locked()
        return name

    def create_role(self, name: str, parents: Sequence[str] = ()) -> str:
        with self._rw.write():
            self._state = d.create_role(self._state, name, parents)
            self._flush_locked()
        return name

    def grant_permission(self, role: str, perm: Permission) -> None:
        with self._rw.write():
            self._state = d.grant_permission(self._state, role, perm)
            self._flush_locked()

    def assign_role(self, user: str, role: str) -> Assignment:
        with self._rw.write():
            if not self.plain_rbac and role in self._state.roles:
                saturated = check_user_cap(self._state, role)
                if saturated is not None:
                    raise d.RoleCapacityExceeded(
                        f"role {role!r} is at capacity under policy {saturated!r}"
                    )
            now = self.now()
            self._state = d.assign_role(self._state, user, role, now)
            self._flush_locked()
            return Assignment(user, role, now)

    def revoke_role(self, user: str, role: str) -> None:
        with self._rw.write():
            self._state = d.revoke_role(self._state, user, role)
            self._flush_locked()

    def add_sod_constraint(self, role_a: str, role_b: str) -> None:
        with self._rw.write():
            self._state = d.add_sod_constraint(self._state, role_a, role_b)
            self._flush_locked()

    def add_restriction(self, policy: RestrictionPolicy) -> None:
        with self._rw.write():
            self._state = d.add_restriction(self._state, policy)
            self._flush_locked()

    def set_obligations(
        self, policies: Sequence[ObligationPolicy], require_known_roles: bool = True
    ) -> None:
        """Install the obligation policy set (replaces the previous set)."""
        with self._rw.write():
            if require_known_roles:
                for policy in policies:
                    for role in sorted(policy.applies_to):
                        if role not in self._state.roles:
                            raise UnknownRole(
                                f"obligation {policy.id!r} applies to unknown role {role!r}"
                            )
            self._obligations = tuple(policies)

    # -- decisions ----------------------------------------------------------

    def check_access(self, request: AccessRequest) -> Decision:
        """Two-phase check; consumes quota on would-be permits; always audited."""
        with self._rw.read():
            now = self.now()
            state = self._state
            ev = self._evaluate(state, request)
            decision = ev.decision()
            if (
                decision.effect is Effect.PERMIT
                and not self.plain_rbac
                and state.restrictions
            ):
                result = self._monitor.consume(
                    state, request.subject, ev.matched_role, now, request.request_id
                )
                if not result.admitted:
                    decision = Decision(Effect.DENY, Reason.QUOTA_EXCEEDED)
            self._monitor.record_audit(
                AuditRecord(
                    at=now,
                    request_id=request.request_id,
                    subject=request.subject,
                    resource=request.resource,
                    action=request.action.value,
                    effect=decision.effect.value,
                    reason=decision.reason.value,
                    matched_role=decision.matched_role,
                )
            )
            return decision

    def explain(self, request: AccessRequest) -> tuple[Decision, tuple[TraceStep, ...]]:
        """Same decision as check_access, plus the evaluation trace.

        Dry run: no quota is consumed, no audit record or anomaly is written,
        so explaining twice is always idempotent.
        """
        with self._rw.read():
            now = self.now()
            state = self._state
            ev = self._evaluate(state, request)
            decision = ev.decision()
            quota_step: Optional[TraceStep] = None
            if (
                decision.effect is Effect.PERMIT
                and not self.plain_rbac
                and state.restrictions
            ):
                result = self._monitor.peek(state, request.subject, ev.matched_role, now)
                if result.admitted:
                    quota_step = TraceStep("quota", result.rejected_by or "", "admit")
                else:
                    quota_step = TraceStep("quota", result.rejected_by or "", "exhausted")
                    decision = Decision(Effect.DENY, Reason.QUOTA_EXCEEDED)
            return decision, finish_trace(ev, decision, quota_step)

    def _evaluate(self, state: DirectoryState, request: AccessRequest) -> Evaluation:
        policies = () if self.plain_rbac else self._obligations
        return evaluate(state, request, policies)

    # -- monitoring ------------------------------------------------------------

    def query_audit(self, **kwargs) -> list[AuditRecord]:
        with self._rw.read():
            return self._monitor.query_audit(**kwargs)

    def drain_anomalies(self) -> list[AnomalyEvent]:
        with self._rw.read():
            return self._monitor.drain_anomalies()

    # -- migration ---------------------------------------------------------------

    def export_xml(self) -> bytes:
        self._require_policy_mode("xml-based migration")
        with self._rw.read():
            return export_bundle(self._state)

    def import_xml(self, xml: bytes) -> None:
        """Whole-state replace from a validated bundle.

        Quiesces decisions, swaps the directory and resets quota counters (a
        migrated tenant starts with clean windows).  The audit log and pending
        anomalies are operational history of this engine and survive.
        """
        self._require_policy_mode("xml-based migration")
        with self._rw.write():
            new_state = import_bundle(xml, now=self.now())
            _, audit, anomalies = self._monitor.cut()
            self._state = new_state
            self._monitor.load([], audit, anomalies)
            self._flush_locked()

    def validate_xml(self, xml: bytes) -> ValidationReport:
        return validate_bundle(xml)

    # -- backup / restore -----------------------------------------------------

    def cut(self, reason: str = "") -> EngineCut:
        """Consistent capture of directory + counters + audit + anomalies."""
        with self._rw.read():
            return self._cut_locked(reason)

    def _cut_locked(self, reason: str = "") -> EngineCut:
        state = self._state
        counters, audit, anomalies = self._monitor.cut()
        return EngineCut(
            state=state,
            counters=tuple(counters),
            audit=tuple(audit),
            anomalies=tuple(anomalies),
            captured_at=self.now(),
            reason=reason,
        )

    def create_snapshot(self, reason: str = "") -> SnapshotMeta:
        self._require_policy_mode("backup and restoration")
        store = self._require_store()
        with self._rw.read():
            cut = self._cut_locked(reason)
        return store.save(cut)

    def restore_snapshot(self, snapshot_id: int) -> SnapshotMeta:
        """Swap in a snapshot's cut; refuses (state untouched) on bad checksum."""
        self._require_policy_mode("backup and restoration")
        store = self._require_store()
        cut = store.load(snapshot_id)  # checksum verified before any mutation
        with self._rw.write():
            self._state = cut.state
            self._monitor.load(list(cut.counters), list(cut.audit), list(cut.anomalies))
            self._monitor.record_audit(
                AuditRecord(
                    at=self.now(),
                    request_id=new_request_id(),
                    subject="system",
                    resource=f"snapshot:{snapshot_id}",
                    action="restore",
                    effect="permit",
                    reason="restore-performed",
                )
            )
            self._flush_locked()
        entry = next(e for e in store.list_entries() if e.id == snapshot_id)
        return SnapshotMeta(entry.id, entry.created_at, entry.checksum, entry.size_bytes)

    def list_snapshots(self, verify: bool = False) -> list[SnapshotEntry]:
        self._require_policy_mode("backup and restoration")
        return self._require_store().list_entries(verify=verify)

    # -- persistence --------------------------------------------------------------

    def flush(self) -> None:
        """Write the live state file, if one is configured."""
        with self._rw.read():
            self._flush_locked()

    def _flush_locked(self) -> None:
        if self.live_path is not None:
            write_state_file(self.live_path, self._cut_locked("live"))

    # -- helpers -----------------------------------------------------------------

    def _require_policy_mode(self, feature: str) -> None:
        if self.plain_rbac:
            raise FeatureDisabled(f"{feature} is disabled in plain RBAC mode")

    def _require_store(self) -> SnapshotStore:
        if self.snapshot_store is None:
            raise FeatureDisabled("no snapshot directory configured")
        return self.snapshot_store
