"""RBAC directory: users, roles, hierarchy, permissions, assignments, constraints.

The directory is held in an immutable ``DirectoryState``.  Every mutating
operation is a pure function taking a state and returning a new one; on any
error the input state is untouched, so failed operations are atomic by
construction.  Callers that need single-writer semantics (the engine) hold a
reference to the current state and swap it after a successful transition.

Hierarchy direction: ``Role.parents`` names the roles a role inherits FROM.
A senior role points at the junior roles whose permissions it acquires, so
"admin inherits employee" is written ``Role("admin", parents={"employee"})``.
RBAC literature uses both conventions; this module uses only this one.

Permissions attach to roles, never to users.  There is deliberately no
operation and no state field associating a user with a permission directly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Iterator, Optional

_TOKEN_RE = re.compile(r"^[A-Za-z0-9_.-]{1,64}$")
_RESOURCE_RE = re.compile(r"^[^\s\x00-\x1f\x7f]{1,256}$")


class RbacError(Exception):
    """Base class for all domain errors raised by this package."""

    code = "rbac-error"


class InvalidName(RbacError):
    code = "invalid-name"


class DuplicateUser(RbacError):
    code = "duplicate-user"


class DuplicateRole(RbacError):
    code = "duplicate-role"


class UnknownUser(RbacError):
    code = "unknown-user"


class UnknownRole(RbacError):
    code = "unknown-role"


class HierarchyCycle(RbacError):
    code = "hierarchy-cycle"


class SoDViolation(RbacError):
    code = "sod-violation"


class DuplicateAssignment(RbacError):
    code = "duplicate-assignment"


class UnknownAssignment(RbacError):
    code = "unknown-assignment"


class SelfPair(RbacError):
    code = "self-pair"


class ExistingConflict(RbacError):
    code = "existing-conflict"


class RoleCapacityExceeded(RbacError):
    code = "role-capacity-exceeded"


class DuplicateRestriction(RbacError):
    code = "duplicate-restriction"


class InvalidRestriction(RbacError):
    code = "invalid-restriction"


def is_token(value: str) -> bool:
    return isinstance(value, str) and bool(_TOKEN_RE.match(value))


def is_resource(value: str) -> bool:
    return isinstance(value, str) and bool(_RESOURCE_RE.match(value))


def ensure_token(name: str, what: str = "name") -> str:
    """Validate an identifier token: 1-64 chars of ``[A-Za-z0-9_.-]``."""
    if not is_token(name):
        raise InvalidName(f"invalid {what}: {name!r}")
    return name


def ensure_resource(resource: str) -> str:
    """Resources are free-form identifiers: non-empty, no whitespace or control chars."""
    if not is_resource(resource):
        raise InvalidName(f"invalid resource: {resource!r}")
    return resource


class Action(str, Enum):
    """The three access verbs a permission can grant."""

    READ = "read"
    WRITE = "write"
    DELETE = "delete"


@dataclass(frozen=True)
class Permission:
    """Unit of grant: the (resource, action) pair."""

    resource: str
    action: Action

    def __post_init__(self) -> None:
        ensure_resource(self.resource)
        if not isinstance(self.action, Action):
            object.__setattr__(self, "action", Action(self.action))

    def sort_key(self) -> tuple[str, str]:
        return (self.action.value, self.resource)


@dataclass(frozen=True)
class Role:
    """A named bundle of permissions, optionally inheriting from other roles.

    ``parents`` are the roles this role inherits from (see module docstring).
    """

    name: str
    parents: frozenset[str] = frozenset()
    permissions: frozenset[Permission] = frozenset()


@dataclass(frozen=True)
class Assignment:
    """Membership of a user in a role, stamped at assignment time (UTC seconds)."""

    user: str
    role: str
    assigned_at: int


# Restriction policies are configuration owned by the directory state; the
# running counters that enforce them live in the restriction monitor.
SCOPE_PER_USER = "per-user"
SCOPE_PER_ROLE = "per-role"


@dataclass(frozen=True)
class RestrictionPolicy:
    """Cap on windowed transactions, and optionally on members per role.

    ``target`` is a user name (per-user scope) or role name (per-role scope);
    ``None`` applies the policy to every principal of that scope.
    ``max_users`` is meaningful only with per-role scope.
    """

    id: str
    scope: str
    max_transactions: int
    window_seconds: int
    target: Optional[str] = None
    max_users: Optional[int] = None

    def __post_init__(self) -> None:
        ensure_token(self.id, "restriction id")
        if self.scope not in (SCOPE_PER_USER, SCOPE_PER_ROLE):
            raise InvalidRestriction(f"unknown scope: {self.scope!r}")
        if not isinstance(self.max_transactions, int) or self.max_transactions < 1:
            raise InvalidRestriction("max-transactions must be a positive integer")
        if not isinstance(self.window_seconds, int) or self.window_seconds < 1:
            raise InvalidRestriction("window-seconds must be a positive integer")
        if self.max_users is not None:
            if self.scope != SCOPE_PER_ROLE:
                raise InvalidRestriction("max-users only applies to per-role policies")
            if not isinstance(self.max_users, int) or self.max_users < 1:
                raise InvalidRestriction("max-users must be a positive integer")
        if self.target is not None:
            ensure_token(self.target, "restriction target")


@dataclass(frozen=True)
class ColumnDef:
    """Column of a migrated table schema.  Type is a closed enum."""

    name: str
    type: str
    nullable: bool

    TYPES = ("string", "integer", "decimal", "boolean", "datetime")

    def __post_init__(self) -> None:
        ensure_token(self.name, "column name")
        if self.type not in self.TYPES:
            raise InvalidName(f"unknown column type: {self.type!r}")


@dataclass(frozen=True)
class TableSchema:
    """Table carried through migration verbatim; never interpreted here.

    Column order is semantic and preserved exactly.
    """

    name: str
    columns: tuple[ColumnDef, ...]

    def __post_init__(self) -> None:
        ensure_token(self.name, "table name")
        seen = set()
        for col in self.columns:
            if col.name in seen:
                raise InvalidName(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(col.name)


@dataclass(frozen=True)
class DirectoryState:
    """The authoritative RBAC database.

    Containers are never mutated in place; use the module-level transition
    functions, each of which returns a fresh state.
    """

    users: frozenset[str] = frozenset()
    roles: dict[str, Role] = field(default_factory=dict)
    assignments: dict[tuple[str, str], int] = field(default_factory=dict)
    sod: frozenset[tuple[str, str]] = frozenset()
    restrictions: dict[str, RestrictionPolicy] = field(default_factory=dict)
    tables: tuple[TableSchema, ...] = ()

    @staticmethod
    def empty() -> "DirectoryState":
        return DirectoryState()

    def direct_roles(self, user: str) -> frozenset[str]:
        return frozenset(r for (u, r) in self.assignments if u == user)

    def members_of(self, role: str) -> frozenset[str]:
        return frozenset(u for (u, r) in self.assignments if r == role)

    def iter_assignments(self) -> Iterator[Assignment]:
        for (user, role), at in sorted(self.assignments.items()):
            yield Assignment(user, role, at)


@dataclass(frozen=True)
class DirectoryMetrics:
    """Directory size counters plus the role/user ratio scalability indicator.

    ``role_user_ratio`` is assignments over users, kept exact as a Fraction;
    it is None when the directory has no users.
    """

    num_users: int
    num_roles: int
    num_permissions: int
    num_assignments: int
    role_user_ratio: Optional[Fraction]

    def ratio_decimal(self) -> Optional[str]:
        if self.role_user_ratio is None:
            return None
        return str(float(self.role_user_ratio))


def sod_pair(a: str, b: str) -> tuple[str, str]:
    """Normalize an exclusive-roles pair to lexicographic order."""
    return (a, b) if a < b else (b, a)


def create_user(state: DirectoryState, name: str) -> DirectoryState:
    ensure_token(name, "user name")
    if name in state.users:
        raise DuplicateUser(name)
    return _replace(state, users=state.users | {name})


def create_role(
    state: DirectoryState, name: str, parents: Iterable[str] = ()
) -> DirectoryState:
    ensure_token(name, "role name")
    parent_set = frozenset(parents)
    if name in state.roles:
        raise DuplicateRole(name)
    if name in parent_set:
        raise HierarchyCycle(f"role {name!r} cannot inherit from itself")
    for p in parent_set:
        if p not in state.roles:
            raise UnknownRole(p)
    roles = dict(state.roles)
    roles[name] = Role(name=name, parents=parent_set)
    _ensure_acyclic(roles, start=name)
    return _replace(state, roles=roles)


def grant_permission(state: DirectoryState, role: str, perm: Permission) -> DirectoryState:
    if role not in state.roles:
        raise UnknownRole(role)
    existing = state.roles[role]
    if perm in existing.permissions:
        return state  # re-grant is a no-op
    roles = dict(state.roles)
    roles[role] = Role(existing.name, existing.parents, existing.permissions | {perm})
    return _replace(state, roles=roles)


def assign_role(state: DirectoryState, user: str, role: str, now: int) -> DirectoryState:
    """Record a user-role membership.

    Enforces existence, uniqueness and separation of duties.  The per-role
    member cap is a restriction policy and is enforced by the caller through
    the restriction monitor before this transition is applied.
    """
    if user not in state.users:
        raise UnknownUser(user)
    if role not in state.roles:
        raise UnknownRole(role)
    if (user, role) in state.assignments:
        raise DuplicateAssignment(f"{user} already holds {role}")
    held = state.direct_roles(user)
    for other in held:
        if sod_pair(role, other) in state.sod:
            raise SoDViolation(f"{role} conflicts with {other} held by {user}")
    assignments = dict(state.assignments)
    assignments[(user, role)] = int(now)
    return _replace(state, assignments=assignments)


def revoke_role(state: DirectoryState, user: str, role: str) -> DirectoryState:
    if (user, role) not in state.assignments:
        raise UnknownAssignment(f"{user} does not hold {role}")
    assignments = dict(state.assignments)
    del assignments[(user, role)]
    return _replace(state, assignments=assignments)


def add_sod_constraint(state: DirectoryState, a: str, b: str) -> DirectoryState:
    if a == b:
        raise SelfPair(a)
    for r in (a, b):
        if r not in state.roles:
            raise UnknownRole(r)
    pair = sod_pair(a, b)
    holders = state.members_of(a) & state.members_of(b)
    if holders:
        raise ExistingConflict(
            f"users already hold both {a} and {b}: {', '.join(sorted(holders))}"
        )
    return _replace(state, sod=state.sod | {pair})


def add_restriction(state: DirectoryState, policy: RestrictionPolicy) -> DirectoryState:
    if policy.id in state.restrictions:
        raise DuplicateRestriction(policy.id)
    if policy.target is not None:
        if policy.scope == SCOPE_PER_USER and policy.target not in state.users:
            raise UnknownUser(policy.target)
        if policy.scope == SCOPE_PER_ROLE and policy.target not in state.roles:
            raise UnknownRole(policy.target)
    restrictions = dict(state.restrictions)
    restrictions[policy.id] = policy
    return _replace(state, restrictions=restrictions)


def role_closure(state: DirectoryState, role: str) -> frozenset[str]:
    """The role plus everything it inherits from, transitively."""
    if role not in state.roles:
        raise UnknownRole(role)
    seen: set[str] = set()
    stack = [role]
    while stack:
        current = stack.pop()
        if current in seen:
            continue
        seen.add(current)
        stack.extend(state.roles[current].parents)
    return frozenset(seen)


def effective_roles(state: DirectoryState, user: str) -> frozenset[str]:
    """Transitive closure over the hierarchy of the user's direct roles."""
    if user not in state.users:
        raise UnknownUser(user)
    out: set[str] = set()
    for role in state.direct_roles(user):
        out |= role_closure(state, role)
    return frozenset(out)


def effective_permissions(state: DirectoryState, role: str) -> frozenset[Permission]:
    """Union of the role's own permissions and all inherited ones."""
    out: set[Permission] = set()
    for r in role_closure(state, role):
        out |= state.roles[r].permissions
    return frozenset(out)


def metrics(state: DirectoryState) -> DirectoryMetrics:
    num_users = len(state.users)
    num_assignments = len(state.assignments)
    num_permissions = sum(len(r.permissions) for r in state.roles.values())
    ratio = Fraction(num_assignments, num_users) if num_users else None
    return DirectoryMetrics(
        num_users=num_users,
        num_roles=len(state.roles),
        num_permissions=num_permissions,
        num_assignments=num_assignments,
        role_user_ratio=ratio,
    )


def topological_order(roles: dict[str, Role]) -> list[str]:
    """Topologically sort roles along inheritance edges; raises HierarchyCycle."""
    order: list[str] = []
    marks: dict[str, int] = {}  # 1 = visiting, 2 = done

    def visit(name: str, trail: tuple[str, ...]) -> None:
        mark = marks.get(name)
        if mark == 2:
            return
        if mark == 1:
            raise HierarchyCycle(" -> ".join(trail + (name,)))
        marks[name] = 1
        for parent in sorted(roles[name].parents):
            visit(parent, trail + (name,))
        marks[name] = 2
        order.append(name)

    for name in sorted(roles):
        visit(name, ())
    return order


def _ensure_acyclic(roles: dict[str, Role], start: str) -> None:
    # Creation order makes cycles unreachable through the public API (parents
    # must already exist), but the guard stays as a checked invariant.
    seen: set[str] = set()
    stack: list[str] = list(roles[start].parents)
    while stack:
        current = stack.pop()
        if current == start:
            raise HierarchyCycle(f"cycle through role {start!r}")
        if current in seen:
            continue
        seen.add(current)
        stack.extend(roles[current].parents)


def _replace(state: DirectoryState, **changes) -> DirectoryState:
    fields = {
        "users": state.users,
        "roles": state.roles,
        "assignments": state.assignments,
        "sod": state.sod,
        "restrictions": state.restrictions,
        "tables": state.tables,
    }
    fields.update(changes)
    return DirectoryState(**fields)
