"""Two-phase access decisions with obligation evaluation.

Phase one of the model is role assignment (owned by the directory).  Phase two
happens here: a request's (resource, action) is checked against the effective
permissions of the subject's effective roles.  Evaluation order is fixed:

    1. subject existence            -> deny unknown-subject
    2. role/permission closure      -> deny no-matching-permission
    3. blocking (must-not) policies -> deny obligation-blocked
    4. restriction quota            -> deny quota-exceeded (engine layer)

The quota step is applied by the engine only to would-be permits, so denied
requests can never drain a victim's quota.  Everything in this module is pure;
the engine supplies state, obligations and the quota hook.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from .directory import (
    Action,
    DirectoryState,
    effective_permissions,
    effective_roles,
    ensure_token,
)


class Effect(str, Enum):
    PERMIT = "permit"
    DENY = "deny"


class Reason(str, Enum):
    GRANTED = "granted"
    NO_MATCHING_PERMISSION = "no-matching-permission"
    UNKNOWN_SUBJECT = "unknown-subject"
    QUOTA_EXCEEDED = "quota-exceeded"
    OBLIGATION_BLOCKED = "obligation-blocked"


MODALITY_MUST = "must"
MODALITY_MUST_NOT = "must-not"


def new_request_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class AccessRequest:
    """A single authorization question from an untrusted caller."""

    subject: str
    resource: str
    action: Action
    context: Mapping[str, str] = field(default_factory=dict)
    request_id: str = field(default_factory=new_request_id)

    def __post_init__(self) -> None:
        if not isinstance(self.action, Action):
            object.__setattr__(self, "action", Action(self.action))


@dataclass(frozen=True)
class ObligationPolicy:
    """An activity a subject must or must not perform when a condition holds.

    The condition is a conjunction of equality tests over the request context;
    an empty condition is always true, a missing context key makes it false.
    """

    id: str
    modality: str
    action_token: str
    applies_to: frozenset[str]
    condition: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ensure_token(self.id, "obligation id")
        if self.modality not in (MODALITY_MUST, MODALITY_MUST_NOT):
            raise ValueError(f"unknown modality: {self.modality!r}")
        if not self.action_token or any(ord(c) < 0x20 for c in self.action_token):
            raise ValueError(f"invalid action token: {self.action_token!r}")
        for key in self.condition:
            ensure_token(key, "condition key")

    def condition_holds(self, context: Mapping[str, str]) -> bool:
        return all(context.get(k) == v for k, v in self.condition.items())


@dataclass(frozen=True)
class ObligationRef:
    """Reference to a triggered obligation, carried on the decision."""

    policy_id: str
    modality: str
    action_token: str


@dataclass(frozen=True)
class Decision:
    effect: Effect
    reason: Reason
    obligations: tuple[ObligationRef, ...] = ()
    matched_role: Optional[str] = None


@dataclass(frozen=True)
class TraceStep:
    """One line of the explain trace: what was examined and how it went."""

    phase: str
    item: str
    outcome: str


def evaluate_obligations(
    policies: Iterable[ObligationPolicy],
    subject_roles: frozenset[str],
    context: Mapping[str, str],
) -> tuple[list[ObligationPolicy], list[ObligationPolicy]]:
    """Split applicable policies into (blocking must-nots, attached musts).

    A policy is applicable iff its applies-to set intersects the subject's
    roles and every equality test in its condition holds against the context.
    Output is ordered by policy id for reproducible decisions.
    """
    blocking: list[ObligationPolicy] = []
    attached: list[ObligationPolicy] = []
    for policy in sorted(policies, key=lambda p: p.id):
        if not (policy.applies_to & subject_roles):
            continue
        if not policy.condition_holds(context):
            continue
        if policy.modality == MODALITY_MUST_NOT:
            blocking.append(policy)
        else:
            attached.append(policy)
    return blocking, attached


@dataclass
class Evaluation:
    """Outcome of the pure part of a check, before any quota is consumed."""

    effect: Effect
    reason: Reason
    matched_role: Optional[str]
    granting_roles: tuple[str, ...]
    subject_roles: frozenset[str]
    blocking: list[ObligationPolicy]
    attached: list[ObligationPolicy]
    trace: list[TraceStep]

    def decision(self) -> Decision:
        if self.effect is Effect.PERMIT:
            obligations = tuple(
                ObligationRef(p.id, p.modality, p.action_token) for p in self.attached
            )
            return Decision(Effect.PERMIT, Reason.GRANTED, obligations, self.matched_role)
        if self.reason is Reason.OBLIGATION_BLOCKED:
            obligations = tuple(
                ObligationRef(p.id, p.modality, p.action_token) for p in self.blocking
            )
            return Decision(Effect.DENY, self.reason, obligations, None)
        return Decision(Effect.DENY, self.reason)


def evaluate(
    state: DirectoryState,
    request: AccessRequest,
    policies: Sequence[ObligationPolicy] = (),
) -> Evaluation:
    """Run the quota-free part of the two-phase check and build the trace.

    The trace covers subject lookup, every examined role and every applicable
    obligation.  The engine finishes it with the quota consultation and the
    final decision step (see ``finish_trace``), since only the engine knows
    whether a quota is in play.
    """
    trace: list[TraceStep] = []

    if request.subject not in state.users:
        trace.append(TraceStep("subject", request.subject, "unknown"))
        return Evaluation(
            Effect.DENY,
            Reason.UNKNOWN_SUBJECT,
            None,
            (),
            frozenset(),
            [],
            [],
            trace,
        )
    trace.append(TraceStep("subject", request.subject, "found"))

    subject_roles = effective_roles(state, request.subject)
    granting: list[str] = []
    for role in sorted(subject_roles):
        # match on raw fields: the request is untrusted, and a resource no
        # permission could ever name must deny, not raise
        if any(
            p.resource == request.resource and p.action is request.action
            for p in effective_permissions(state, role)
        ):
            granting.append(role)
            trace.append(TraceStep("role", role, "grants"))
        else:
            trace.append(TraceStep("role", role, "no-grant"))

    if not granting:
        return Evaluation(
            Effect.DENY,
            Reason.NO_MATCHING_PERMISSION,
            None,
            (),
            subject_roles,
            [],
            [],
            trace,
        )

    matched = granting[0]  # lexicographic minimum: sorted iteration above
    blocking, attached = evaluate_obligations(policies, subject_roles, request.context)
    for policy in blocking:
        trace.append(TraceStep("obligation", policy.id, "blocks"))
    for policy in attached:
        trace.append(TraceStep("obligation", policy.id, "attaches"))

    if blocking:
        return Evaluation(
            Effect.DENY,
            Reason.OBLIGATION_BLOCKED,
            None,
            tuple(granting),
            subject_roles,
            blocking,
            attached,
            trace,
        )

    return Evaluation(
        Effect.PERMIT,
        Reason.GRANTED,
        matched,
        tuple(granting),
        subject_roles,
        blocking,
        attached,
        trace,
    )


def finish_trace(
    evaluation: Evaluation,
    decision: Decision,
    quota_step: Optional[TraceStep] = None,
) -> tuple[TraceStep, ...]:
    """Complete an evaluation trace with the quota step and the verdict."""
    trace = list(evaluation.trace)
    if quota_step is not None:
        trace.append(quota_step)
    trace.append(
        TraceStep("decision", decision.matched_role or "", decision.effect.value)
    )
    return tuple(trace)
