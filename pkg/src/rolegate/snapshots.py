"""Point-in-time snapshots of the full engine state, with integrity checking.

Snapshot file layout (also used for the live state file):

    magic "RBAK" | format version byte (1) | four length-prefixed sections
    | 32-byte SHA-256 digest

Sections, in order: directory bundle XML, runtime JSON (capture metadata,
assignment timestamps, transaction counters), audit JSON, anomaly JSON.
Lengths are big-endian u64.  The digest covers the payload bytes exactly
(everything between the version byte and the digest), so any single flipped
payload bit is detected.

Writes go to a temp file in the same directory which is fsynced and renamed
into place; a crash at any point leaves either the old file or the new one,
never a partial.  The catalog is the directory listing itself: one
``snap-<id>.rbak`` file per snapshot, ids strictly increasing.
"""

from __future__ import annotations

import errno
import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .directory import DirectoryState, RbacError
from .migration import export_bundle, import_bundle
from .restriction import AnomalyEvent, AuditRecord, TransactionCounter

MAGIC = b"RBAK"
FILE_VERSION = 1
_SNAP_RE = re.compile(r"^snap-(\d+)\.rbak$")


class UnknownSnapshot(RbacError):
    code = "unknown-snapshot"


class ChecksumMismatch(RbacError):
    code = "checksum-mismatch"


class IoFailure(RbacError):
    code = "io-failure"


class StorageFull(RbacError):
    code = "storage-full"


@dataclass(frozen=True)
class EngineCut:
    """A consistent point-in-time capture of everything the engine holds."""

    state: DirectoryState
    counters: tuple[TransactionCounter, ...]
    audit: tuple[AuditRecord, ...]
    anomalies: tuple[AnomalyEvent, ...]
    captured_at: int
    reason: str = ""


@dataclass(frozen=True)
class SnapshotMeta:
    id: int
    created_at: int
    checksum: str
    size_bytes: int


@dataclass(frozen=True)
class SnapshotEntry:
    id: int
    created_at: int
    checksum: str
    size_bytes: int
    verified: Optional[bool] = None  # None when verification was not requested


def _wrap_os_error(exc: OSError) -> RbacError:
    if exc.errno == errno.ENOSPC:
        return StorageFull(str(exc))
    return IoFailure(str(exc))


def encode_cut(cut: EngineCut) -> bytes:
    """Serialize a cut to snapshot bytes (deterministic for equal cuts)."""
    xml = export_bundle(cut.state)
    runtime = json.dumps(
        {
            "captured-at": cut.captured_at,
            "reason": cut.reason,
            "assignment-times": sorted(
                [u, r, t] for (u, r), t in cut.state.assignments.items()
            ),
            "counters": sorted(
                (
                    {
                        "policy": c.policy_id,
                        "principal": c.principal,
                        "window-start": c.window_start,
                        "count": c.count,
                    }
                    for c in cut.counters
                ),
                key=lambda c: (c["policy"], c["principal"]),
            ),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    audit = json.dumps(
        [
            {
                "at": r.at,
                "request-id": r.request_id,
                "subject": r.subject,
                "resource": r.resource,
                "action": r.action,
                "effect": r.effect,
                "reason": r.reason,
                "matched-role": r.matched_role,
            }
            for r in cut.audit
        ],
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    anomalies = json.dumps(
        [
            {
                "at": e.at,
                "policy": e.policy,
                "principal": e.principal,
                "observed": e.observed,
                "limit": e.limit,
                "request-id": e.request_id,
            }
            for e in cut.anomalies
        ],
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    payload = b"".join(
        len(section).to_bytes(8, "big") + section
        for section in (xml, runtime, audit, anomalies)
    )
    digest = hashlib.sha256(payload).digest()
    return MAGIC + bytes([FILE_VERSION]) + payload + digest


def payload_span(blob: bytes) -> tuple[int, int]:
    """Byte range [start, end) of the checksummed payload within a snapshot."""
    return len(MAGIC) + 1, len(blob) - hashlib.sha256().digest_size


def decode_cut(blob: bytes) -> EngineCut:
    """Parse and integrity-check snapshot bytes back into a cut."""
    digest_size = hashlib.sha256().digest_size
    header = len(MAGIC) + 1
    if len(blob) < header + 32 or blob[: len(MAGIC)] != MAGIC:
        raise ChecksumMismatch("not a snapshot file or truncated header")
    if blob[len(MAGIC)] != FILE_VERSION:
        raise ChecksumMismatch(f"unsupported snapshot file version {blob[len(MAGIC)]}")
    payload, stored = blob[header:-digest_size], blob[-digest_size:]
    if hashlib.sha256(payload).digest() != stored:
        raise ChecksumMismatch("payload digest does not match stored digest")

    sections: list[bytes] = []
    offset = 0
    for _ in range(4):
        if offset + 8 > len(payload):
            raise ChecksumMismatch("truncated section table")
        length = int.from_bytes(payload[offset : offset + 8], "big")
        offset += 8
        if offset + length > len(payload):
            raise ChecksumMismatch("section extends past payload")
        sections.append(payload[offset : offset + length])
        offset += length
    if offset != len(payload):
        raise ChecksumMismatch("trailing bytes after sections")

    xml, runtime_raw, audit_raw, anomalies_raw = sections
    runtime = json.loads(runtime_raw)
    state = import_bundle(xml, now=0)
    times = {(u, r): int(t) for u, r, t in runtime.get("assignment-times", [])}
    if set(times) != set(state.assignments):
        raise ChecksumMismatch("assignment times do not cover bundle memberships")
    state = DirectoryState(
        users=state.users,
        roles=state.roles,
        assignments=times,
        sod=state.sod,
        restrictions=state.restrictions,
        tables=state.tables,
    )
    counters = tuple(
        TransactionCounter(
            policy_id=c["policy"],
            principal=c["principal"],
            window_start=int(c["window-start"]),
            count=int(c["count"]),
        )
        for c in runtime.get("counters", [])
    )
    audit = tuple(
        AuditRecord(
            at=int(r["at"]),
            request_id=r["request-id"],
            subject=r["subject"],
            resource=r["resource"],
            action=r["action"],
            effect=r["effect"],
            reason=r["reason"],
            matched_role=r["matched-role"],
        )
        for r in json.loads(audit_raw)
    )
    anomalies = tuple(
        AnomalyEvent(
            at=int(e["at"]),
            policy=e["policy"],
            principal=e["principal"],
            observed=int(e["observed"]),
            limit=int(e["limit"]),
            request_id=e["request-id"],
        )
        for e in json.loads(anomalies_raw)
    )
    return EngineCut(
        state=state,
        counters=counters,
        audit=audit,
        anomalies=anomalies,
        captured_at=int(runtime.get("captured-at", 0)),
        reason=runtime.get("reason", ""),
    )


def write_state_file(path: Path, cut: EngineCut) -> SnapshotMeta:
    """Atomically write a cut to ``path`` (temp file + fsync + rename)."""
    blob = encode_cut(cut)
    path = Path(path)
    tmp = path.with_name("." + path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        dir_fd = os.open(path.parent, os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)
    except OSError as exc:
        try:
            tmp.unlink(missing_ok=True)
        except OSError:
            pass
        raise _wrap_os_error(exc) from exc
    start, end = payload_span(blob)
    checksum = hashlib.sha256(blob[start:end]).hexdigest()
    return SnapshotMeta(
        id=0, created_at=cut.captured_at, checksum=checksum, size_bytes=len(blob)
    )


def read_state_file(path: Path) -> EngineCut:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise _wrap_os_error(exc) from exc
    return decode_cut(blob)


class SnapshotStore:
    """Catalog of snapshot files in one directory.

    There is no separate index: the set of ``snap-<id>.rbak`` files is the
    catalog, so there is nothing extra to corrupt.  Partial writes are
    invisible (they live under a temp name until the atomic rename).
    """

    def __init__(self, directory: Path, keep_last: int = 10) -> None:
        self.directory = Path(directory)
        self.keep_last = keep_last
        self._lock = threading.Lock()

    def path_for(self, snapshot_id: int) -> Path:
        return self.directory / f"snap-{snapshot_id}.rbak"

    def ids(self) -> list[int]:
        if not self.directory.is_dir():
            return []
        found = []
        for name in os.listdir(self.directory):
            m = _SNAP_RE.match(name)
            if m:
                found.append(int(m.group(1)))
        return sorted(found)

    def latest_id(self) -> Optional[int]:
        ids = self.ids()
        return ids[-1] if ids else None

    def save(self, cut: EngineCut) -> SnapshotMeta:
        """Durably write a new snapshot; prune old ones after success."""
        with self._lock:
            try:
                self.directory.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise _wrap_os_error(exc) from exc
            existing = self.ids()
            snapshot_id = (existing[-1] + 1) if existing else 1
            meta = write_state_file(self.path_for(snapshot_id), cut)
            meta = SnapshotMeta(
                id=snapshot_id,
                created_at=meta.created_at,
                checksum=meta.checksum,
                size_bytes=meta.size_bytes,
            )
            if self.keep_last:
                for old_id in self.ids()[: -self.keep_last] or []:
                    try:
                        self.path_for(old_id).unlink(missing_ok=True)
                    except OSError:
                        pass  # retention is best-effort, never blocks the new snapshot
            return meta

    def load(self, snapshot_id: int) -> EngineCut:
        path = self.path_for(snapshot_id)
        if not path.is_file():
            raise UnknownSnapshot(str(snapshot_id))
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise _wrap_os_error(exc) from exc
        return decode_cut(blob)

    def list_entries(self, verify: bool = False) -> list[SnapshotEntry]:
        """Catalog entries in id order; checksums re-verified only on request."""
        entries = []
        for snapshot_id in self.ids():
            path = self.path_for(snapshot_id)
            try:
                blob = path.read_bytes()
            except OSError as exc:
                raise _wrap_os_error(exc) from exc
            created_at, checksum = _peek_meta(blob)
            verified: Optional[bool] = None
            if verify:
                try:
                    decode_cut(blob)
                    verified = True
                except RbacError:
                    verified = False
            entries.append(
                SnapshotEntry(
                    id=snapshot_id,
                    created_at=created_at,
                    checksum=checksum,
                    size_bytes=len(blob),
                    verified=verified,
                )
            )
        return entries


def _peek_meta(blob: bytes) -> tuple[int, str]:
    """Best-effort (created_at, stored checksum hex) without digest verification."""
    digest_size = hashlib.sha256().digest_size
    header = len(MAGIC) + 1
    if len(blob) < header + digest_size:
        return 0, ""
    checksum = blob[-digest_size:].hex()
    payload = blob[header:-digest_size]
    try:
        xml_len = int.from_bytes(payload[0:8], "big")
        runtime_start = 8 + xml_len + 8
        runtime_len = int.from_bytes(payload[8 + xml_len : runtime_start], "big")
        runtime = json.loads(payload[runtime_start : runtime_start + runtime_len])
        return int(runtime.get("captured-at", 0)), checksum
    except (ValueError, KeyError, IndexError):
        return 0, checksum
