import pytest

from rolegate import Action, Engine, Permission
from rolegate.restriction import RestrictionMonitor

from oracles import FakeClock


@pytest.fixture
def clock():
    return FakeClock(1_000_000)


@pytest.fixture
def engine(clock, tmp_path):
    """Engine over a two-role hierarchy: admin inherits employee."""
    from rolegate.snapshots import SnapshotStore

    eng = Engine(
        clock=clock,
        monitor=RestrictionMonitor(anomaly_log_path=str(tmp_path / "anomalies.log")),
        snapshot_store=SnapshotStore(tmp_path / "snapshots"),
    )
    eng.create_user("alice")
    eng.create_user("bob")
    eng.create_role("employee")
    eng.create_role("admin", ["employee"])
    eng.grant_permission("employee", Permission("docs", Action.READ))
    eng.grant_permission("admin", Permission("docs", Action.WRITE))
    eng.assign_role("alice", "admin")
    eng.assign_role("bob", "employee")
    return eng
