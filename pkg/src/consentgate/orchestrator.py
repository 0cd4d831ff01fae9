"""Consent orchestration: drives every access request end to end.

Pipeline per request: authenticate the ticket, check the role ACL, take
the usual-provider shortcut if it applies, otherwise notify the patient
(or nominee/delegate) and wait for a verified decision, falling back
across channels until the overall deadline.  Emergency break-glass cuts
across the wait with a five-day grant and a mandatory patient email.

All mutations on one case are serialized through a per-case lock; audit
append precedes state commit so the log remains the source of truth.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum

from .audit import AuditKind, AuditLog, EmailQueue, StorageFailure
from .channels import (
    ChannelManager,
    ConsentPrompt,
    ResponseProof,
    TransportUnavailable,
)
from .clock import Clock, FIVE_DAYS_MS
from .domain import (
    AccessPurpose,
    AccessRequest,
    Action,
    ConsentCase,
    ConsentEvent,
    ConsentState,
    Delegation,
    Device,
    DomainError,
    Grant,
    GrantKind,
    Patient,
    PrincipalRole,
    RecordSection,
    RequestCategory,
    UnknownPatient,
    classify,
    is_usual_provider,
)
from .ids import IdSource
from .policy import AclTable, ExpiredTicket, Registry, TicketStore, UnknownTicket, acl_check

AWAITING_STATES = frozenset({ConsentState.AwaitingPatient, ConsentState.AwaitingDelegate})
BREAK_GLASS_STATES = frozenset(
    {ConsentState.AclPassed, ConsentState.AwaitingPatient, ConsentState.AwaitingDelegate}
)


class OrchestratorError(DomainError):
    pass


class UnknownRequest(OrchestratorError):
    pass


class UnauthorizedResponder(OrchestratorError):
    pass


class BadProof(OrchestratorError):
    pass


class EmptyJustification(OrchestratorError):
    pass


class InvalidWindow(OrchestratorError):
    pass


class DelegateWithoutDevice(OrchestratorError):
    pass


class UnknownDelegation(OrchestratorError):
    pass


class NoChannelAvailable(OrchestratorError):
    pass


class BreakGlassRejected(OrchestratorError):
    """Break-glass refused at authentication or ACL; carries the case state."""

    def __init__(self, state: ConsentState, request_id: str | None = None) -> None:
        super().__init__(f"break-glass rejected: {state.value}")
        self.state = state
        self.request_id = request_id


DEFAULT_CHANNEL_TIMEOUTS_MS = {
    "smartphone_push": 120_000,
    "sms": 120_000,
    "voice_call": 60_000,
    "landline_voice": 60_000,
    "hardware_token": 120_000,
}


@dataclass
class OrchestratorConfig:
    channel_timeout_ms: dict[str, int] = field(
        default_factory=lambda: dict(DEFAULT_CHANNEL_TIMEOUTS_MS)
    )
    overall_deadline_ms: int = 900_000
    consented_grant_ttl_ms: int = 3_600_000
    max_channel_attempts: int = 5

    # Fixed by policy, deliberately not a constructor argument.
    @property
    def emergency_grant_ttl_ms(self) -> int:
        return FIVE_DAYS_MS

    def __post_init__(self) -> None:
        if self.overall_deadline_ms <= 0 or self.consented_grant_ttl_ms <= 0:
            raise ValueError("deadlines and TTLs must be positive")
        if self.max_channel_attempts <= 0:
            raise ValueError("max_channel_attempts must be positive")
        for kind, ms in self.channel_timeout_ms.items():
            if ms <= 0:
                raise ValueError(f"channel timeout for {kind} must be positive")


class ResponderKind(str, Enum):
    patient = "patient"
    delegate = "delegate"


@dataclass(frozen=True)
class DecisionRecord:
    request_id: str
    responder_id: str
    responder_kind: ResponderKind
    decision: str  # approve | deny
    channel: str
    decided_at: int


class Orchestrator:
    def __init__(
        self,
        registry: Registry,
        acl_table: AclTable,
        tickets: TicketStore,
        channels: ChannelManager,
        audit_log: AuditLog,
        email_queue: EmailQueue,
        clock: Clock,
        ids: IdSource,
        config: OrchestratorConfig | None = None,
    ) -> None:
        self.registry = registry
        self.acl_table = acl_table
        self.tickets = tickets
        self.channels = channels
        self.audit_log = audit_log
        self.email_queue = email_queue
        self.clock = clock
        self.ids = ids
        self.config = config or OrchestratorConfig()
        self.cases: dict[str, ConsentCase] = {}
        self.grants: dict[str, Grant] = {}
        self.decisions: dict[str, DecisionRecord] = {}
        self._case_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._audit_retry: list[dict] = []
        self._pending_grant: Grant | None = None

    # ------------------------------------------------------------------
    # helpers

    def _lock_for(self, request_id: str) -> threading.Lock:
        with self._locks_guard:
            lock = self._case_locks.get(request_id)
            if lock is None:
                lock = threading.Lock()
                self._case_locks[request_id] = lock
            return lock

    def _audit(self, **kw) -> None:
        self.audit_log.append(**kw)

    def _role_of(self, principal_id: str) -> str:
        principal = self.registry.get_principal(principal_id)
        return principal.role.value if principal else "unknown"

    def _effective_role(self, requester: str, patient_id: str) -> PrincipalRole:
        """Role used for ACL: usual_gp only with the standing link."""
        principal = self.registry.get_principal(requester)
        if principal.role is PrincipalRole.usual_gp:
            if is_usual_provider(requester, patient_id, self.registry):
                return PrincipalRole.usual_gp
            return PrincipalRole.gp
        return principal.role

    # ------------------------------------------------------------------
    # submission

    def submit_access_request(
        self,
        ticket_id: str,
        patient_id: str,
        sections: set[RecordSection] | frozenset[RecordSection],
        action: Action,
        purpose: AccessPurpose,
        declared_emergency: bool = False,
        justification: str | None = None,
    ) -> ConsentCase:
        patient = self.registry.get_patient(patient_id)
        if patient is None:
            raise UnknownPatient(patient_id)
        category = classify(purpose, declared_emergency, justification)
        now = self.clock.now_ms()

        requester = "unknown"
        auth_ok = True
        try:
            requester = self.tickets.verify_ticket(ticket_id, now)
        except (UnknownTicket, ExpiredTicket):
            auth_ok = False
            peeked = self.tickets.peek(ticket_id)
            if peeked:
                requester = peeked

        request = AccessRequest(
            request_id=self.ids.next_id("req"),
            requester=requester,
            patient=patient_id,
            sections=frozenset(sections),
            action=action,
            purpose=purpose,
            category=category,
            justification=justification,
            submitted_at=now,
        )
        case = ConsentCase(request=request)
        case.overall_deadline = now + self.config.overall_deadline_ms
        self.cases[request.request_id] = case

        with self._lock_for(request.request_id):
            self._run_auth_acl(case, auth_ok, now)
            if case.terminal:
                return case
            if case.request.category is RequestCategory.special:
                # Emergency submissions stop here and wait for an explicit
                # break-glass invocation; the patient is never prompted.
                return case
            if is_usual_provider(request.requester, patient_id, self.registry):
                self._audit_case(case, AuditKind.grant_issued, now, self._grant_detail_for(case, GrantKind.auto_usual_provider, now))
                case.apply(ConsentEvent.UsualProviderDetected, now)
                self._register_grant_from_last_audit(case)
                return case
            self._dispatch_cycle(case, now, first=True)
            return case

    def _run_auth_acl(self, case: ConsentCase, auth_ok: bool, now: int) -> None:
        request = case.request
        req_detail = {
            "purpose": request.purpose.value,
            "sections": sorted(s.value for s in request.sections),
            "action": request.action.value,
            "category": request.category.value,
            "justification": request.justification or "",
            "submitted_at": request.submitted_at,
            "overall_deadline": case.overall_deadline,
        }
        if not auth_ok:
            self._audit_case(case, AuditKind.auth_fail, now, dict(req_detail, outcome="rejected"))
            case.apply(ConsentEvent.AuthFail, now)
            return
        self._audit_case(case, AuditKind.auth_ok, now, dict(req_detail, outcome="ok"))
        case.apply(ConsentEvent.AuthOk, now)

        role = self._effective_role(request.requester, request.patient)
        verdict = acl_check(role, request.sections, request.action, self.acl_table)
        if verdict.permitted:
            self._audit_case(
                case, AuditKind.acl_pass, now, {"role": role.value, "outcome": "permit"}
            )
            case.apply(ConsentEvent.AclOk, now)
        else:
            self._audit_case(
                case,
                AuditKind.acl_fail,
                now,
                {
                    "role": role.value,
                    "outcome": "deny",
                    "violating_section": verdict.violating_section.value,
                },
            )
            case.apply(ConsentEvent.AclFail, now)

    def _audit_case(self, case: ConsentCase, kind: AuditKind, at: int, detail: dict) -> None:
        self._flush_audit_retry()
        self._audit(
            at=at,
            patient_id=case.request.patient,
            actor_id=case.request.requester,
            actor_role=self._role_of(case.request.requester),
            event_kind=kind,
            request_id=case.request.request_id,
            detail=detail,
        )

    # ------------------------------------------------------------------
    # channel selection & dispatch

    def select_channel(self, patient: Patient, attempt_no: int, now_ms: int) -> tuple[str, Device]:
        if attempt_no < 1:
            raise ValueError("attempt_no must be >= 1")
        entries = self._effective_channels(patient, now_ms)
        if attempt_no > len(entries):
            raise NoChannelAvailable(f"attempt {attempt_no} of {len(entries)}")
        target, device, _ = entries[attempt_no - 1]
        return target, device

    def _effective_channels(
        self, patient: Patient, now_ms: int
    ) -> list[tuple[str, Device, str | None]]:
        """(target_id, device, delegation_id) in dispatch order."""
        entries: list[tuple[str, Device, str | None]] = []
        if patient.devices:
            entries.extend((patient.patient_id, d, None) for d in patient.ordered_devices())
        elif patient.nominee:
            nominee = self.registry.get_patient(patient.nominee)
            if nominee is not None:
                entries.extend(
                    (nominee.patient_id, d, None) for d in nominee.ordered_devices()
                )
        for delegation in self.registry.active_delegations_for(patient.patient_id, now_ms):
            delegate = self.registry.get_patient(delegation.delegate)
            if delegate is not None:
                entries.extend(
                    (delegate.patient_id, d, delegation.delegation_id)
                    for d in delegate.ordered_devices()
                )
        return entries

    def _dispatch_cycle(self, case: ConsentCase, now: int, first: bool) -> None:
        """Try channels from the next attempt until one delivers.

        If nothing delivers the case keeps waiting until its overall
        deadline; the deadline handler then times it out (fail closed).
        """
        patient = self.registry.get_patient(case.request.patient)
        entries = self._effective_channels(patient, now)
        base_owner = entries[0][0] if entries else patient.patient_id
        prompt = ConsentPrompt(
            request_id=case.request.request_id,
            patient_display=patient.display_name,
            requester_display=case.request.requester,
            purpose=case.request.purpose,
            sections=case.request.sections,
            action=case.request.action,
            expires_at=case.overall_deadline,
        )

        if first and not entries:
            self._audit_case(
                case,
                AuditKind.dispatched,
                now,
                {
                    "attempt": 0,
                    "outcome": "no_channel",
                    "deadline": case.overall_deadline,
                },
            )
            case.apply(ConsentEvent.DispatchedToPatient, now)
            case.deadline = case.overall_deadline
            case.active_channel = None
            case.active_target = None
            return

        attempt = case.attempts
        while attempt < min(len(entries), self.config.max_channel_attempts):
            attempt += 1
            target, device, delegation_id = entries[attempt - 1]
            escalated = (
                case.state is ConsentState.AwaitingPatient
                and not first
                and target != base_owner
            )
            timeout = self.config.channel_timeout_ms.get(device.kind.value, 120_000)
            deadline = min(now + timeout, case.overall_deadline)
            try:
                self.channels.dispatch(prompt, device, attempt=attempt)
                delivered = True
            except TransportUnavailable:
                delivered = False
            self._audit_case(
                case,
                AuditKind.dispatched,
                now,
                {
                    "attempt": attempt,
                    "device_id": device.device_id,
                    "kind": device.kind.value,
                    "target": target,
                    "delegation_id": delegation_id,
                    "outcome": "delivered" if delivered else "failed",
                    "escalated": escalated,
                    "deadline": deadline,
                },
            )
            if case.state is ConsentState.AclPassed:
                case.apply(ConsentEvent.DispatchedToPatient, now)
            elif escalated:
                case.apply(ConsentEvent.DelegateEscalation, now)
            case.attempts = attempt
            if delivered:
                case.active_channel = device.device_id
                case.active_target = target
                case.active_delegation_id = delegation_id
                case.deadline = deadline
                return
        # Exhausted without a delivery: wait out the overall deadline.
        if case.state is ConsentState.AclPassed:
            # every transport failed on the very first cycle
            case.apply(ConsentEvent.DispatchedToPatient, now)
        case.active_channel = None
        case.deadline = case.overall_deadline

    # ------------------------------------------------------------------
    # decisions

    def record_decision(
        self,
        request_id: str,
        responder_id: str,
        decision: str,
        proof: ResponseProof,
    ) -> ConsentCase:
        case = self.cases.get(request_id)
        if case is None:
            raise UnknownRequest(request_id)
        if decision not in ("approve", "deny"):
            raise ValueError("decision must be approve or deny")
        with self._lock_for(request_id):
            now = self.clock.now_ms()
            if case.state not in AWAITING_STATES:
                self._audit_case(
                    case,
                    AuditKind.duplicate_decision,
                    now,
                    {"responder": responder_id, "decision": decision, "state": case.state.value},
                )
                return case
            if responder_id != case.active_target:
                raise UnauthorizedResponder(responder_id)
            if case.active_delegation_id is not None:
                delegation = self.registry.delegations.get(case.active_delegation_id)
                if delegation is None or not delegation.active_at(now):
                    raise UnauthorizedResponder(f"delegation window closed for {responder_id}")
            if proof.device_id != case.active_channel:
                raise BadProof("proof not bound to the prompted device")
            stated = self.channels.proof_decision(proof)
            if stated is not None and stated != decision:
                raise BadProof("proof signed over a different decision")
            if not self.channels.verify_proof(proof, request_id, now):
                raise BadProof("proof verification failed")

            responder_kind = (
                ResponderKind.patient
                if responder_id == case.request.patient
                else ResponderKind.delegate
            )
            device_kind = self._device_kind_of(case.active_target, case.active_channel)
            self._audit(
                at=now,
                patient_id=case.request.patient,
                actor_id=responder_id,
                actor_role=responder_kind.value,
                event_kind=AuditKind.decision,
                request_id=request_id,
                detail={
                    "decision": decision,
                    "responder": responder_id,
                    "responder_kind": responder_kind.value,
                    "channel": device_kind,
                },
            )
            if case.state is ConsentState.AwaitingPatient:
                event = (
                    ConsentEvent.PatientApproved
                    if decision == "approve"
                    else ConsentEvent.PatientDenied
                )
            else:
                event = (
                    ConsentEvent.DelegateApproved
                    if decision == "approve"
                    else ConsentEvent.DelegateDenied
                )
            self.decisions[request_id] = DecisionRecord(
                request_id=request_id,
                responder_id=responder_id,
                responder_kind=responder_kind,
                decision=decision,
                channel=device_kind,
                decided_at=now,
            )
            if decision == "approve":
                self._audit_case(
                    case,
                    AuditKind.grant_issued,
                    now,
                    self._grant_detail_for(case, GrantKind.consented, now),
                )
                case.apply(event, now)
                self._register_grant_from_last_audit(case)
            else:
                case.apply(event, now)
            return case

    def _device_kind_of(self, target_id: str | None, device_id: str | None) -> str:
        if target_id and device_id:
            holder = self.registry.get_patient(target_id)
            if holder:
                for d in holder.devices:
                    if d.device_id == device_id:
                        return d.kind.value
        return "none"

    # ------------------------------------------------------------------
    # deadlines

    def handle_deadline(self, request_id: str, now_ms: int | None = None) -> ConsentCase:
        case = self.cases.get(request_id)
        if case is None:
            raise UnknownRequest(request_id)
        with self._lock_for(request_id):
            now = now_ms if now_ms is not None else self.clock.now_ms()
            if case.state not in AWAITING_STATES:
                return case
            if case.deadline is None or now < case.deadline:
                return case
            patient = self.registry.get_patient(case.request.patient)
            entries = self._effective_channels(patient, now)
            exhausted = (
                case.attempts >= self.config.max_channel_attempts
                or case.attempts >= len(entries)
            )
            if now >= case.overall_deadline or exhausted:
                self._audit_case(
                    case,
                    AuditKind.timeout,
                    now,
                    {
                        "reason": "overall_deadline"
                        if now >= case.overall_deadline
                        else "channels_exhausted"
                    },
                )
                case.apply(ConsentEvent.Timeout, now)
                case.active_channel = None
                return case
            self._dispatch_cycle(case, now, first=False)
            return case

    def sweep_deadlines(self, now_ms: int | None = None) -> list[str]:
        """Fire every due deadline; returns the request ids touched."""
        now = now_ms if now_ms is not None else self.clock.now_ms()
        touched = []
        for request_id, case in sorted(self.cases.items()):
            if case.state in AWAITING_STATES and case.deadline is not None and now >= case.deadline:
                self.handle_deadline(request_id, now)
                touched.append(request_id)
        return touched

    # ------------------------------------------------------------------
    # break-glass

    def break_glass(
        self,
        ticket_id: str,
        justification: str,
        request_id: str | None = None,
        patient_id: str | None = None,
        sections: set[RecordSection] | None = None,
        action: Action = Action.read,
    ) -> Grant:
        if not justification or not justification.strip():
            raise EmptyJustification("break-glass requires a justification")
        now = self.clock.now_ms()

        if request_id is None:
            case = self.submit_access_request(
                ticket_id=ticket_id,
                patient_id=patient_id,
                sections=sections or set(),
                action=action,
                purpose=AccessPurpose.emergency_treatment,
                declared_emergency=True,
                justification=justification,
            )
            request_id = case.request.request_id
            if case.state in (ConsentState.RejectedAuth, ConsentState.RejectedAcl):
                raise BreakGlassRejected(case.state, request_id)
        else:
            case = self.cases.get(request_id)
            if case is None:
                raise UnknownRequest(request_id)

        with self._lock_for(request_id):
            now = self.clock.now_ms()
            if case.state in (ConsentState.RejectedAuth, ConsentState.RejectedAcl):
                raise BreakGlassRejected(case.state, request_id)
            if case.state not in BREAK_GLASS_STATES:
                raise BreakGlassRejected(case.state, request_id)
            requester = self.tickets.verify_ticket(ticket_id, now)
            if requester != case.request.requester:
                raise UnauthorizedResponder(
                    "break-glass must come from the original requester"
                )
            # Grant first, audit immediately after with mandatory retry:
            # emergency access must not block on the audit store.
            grant = self._build_grant(case, GrantKind.emergency, now)
            self.grants[grant.grant_id] = grant
            patient = self.registry.get_patient(case.request.patient)
            notice = self.email_queue.queue_breakglass_notice(
                self.ids.next_id("notice"), grant, case.request, patient, now
            )
            case.apply(ConsentEvent.BreakGlassInvoked, now)
            case.active_channel = None
            self._audit_breakglass(case, grant, notice, now)
            return grant

    def _audit_breakglass(self, case, grant, notice, now: int) -> None:
        pending = [
            dict(
                at=now,
                patient_id=case.request.patient,
                actor_id=case.request.requester,
                actor_role=self._role_of(case.request.requester),
                event_kind=AuditKind.break_glass,
                request_id=case.request.request_id,
                detail={"justification": case.request.justification or ""},
            ),
            dict(
                at=now,
                patient_id=case.request.patient,
                actor_id=case.request.requester,
                actor_role=self._role_of(case.request.requester),
                event_kind=AuditKind.grant_issued,
                request_id=case.request.request_id,
                detail=self._grant_dict(grant),
            ),
            dict(
                at=now,
                patient_id=case.request.patient,
                actor_id=case.request.requester,
                actor_role=self._role_of(case.request.requester),
                event_kind=AuditKind.email_queued,
                request_id=case.request.request_id,
                detail={
                    "notice_id": notice.notice_id,
                    "patient_email": notice.patient_email,
                    "subject": notice.subject,
                    "body": notice.body,
                },
            ),
        ]
        for i, record in enumerate(pending):
            try:
                self._audit(**record)
            except StorageFailure:
                self._audit_retry.extend(pending[i:])
                return

    def _flush_audit_retry(self) -> None:
        while self._audit_retry:
            record = self._audit_retry[0]
            try:
                self._audit(**record)
            except StorageFailure:
                return
            self._audit_retry.pop(0)

    # ------------------------------------------------------------------
    # grants

    def _build_grant(self, case: ConsentCase, kind: GrantKind, now: int) -> Grant:
        ttl = (
            self.config.emergency_grant_ttl_ms
            if kind is GrantKind.emergency
            else self.config.consented_grant_ttl_ms
        )
        return Grant(
            grant_id=self.ids.next_id("grant"),
            request_id=case.request.request_id,
            patient_id=case.request.patient,
            sections=case.request.sections,
            action=case.request.action,
            issued_at=now,
            expires_at=now + ttl,
            kind=kind,
        )

    def _grant_dict(self, grant: Grant) -> dict:
        return {
            "grant_id": grant.grant_id,
            "kind": grant.kind.value,
            "sections": sorted(s.value for s in grant.sections),
            "action": grant.action.value,
            "issued_at": grant.issued_at,
            "expires_at": grant.expires_at,
        }

    def _grant_detail_for(self, case: ConsentCase, kind: GrantKind, now: int) -> dict:
        grant = self._build_grant(case, kind, now)
        self._pending_grant = grant
        return self._grant_dict(grant)

    def _register_grant_from_last_audit(self, case: ConsentCase) -> None:
        grant = self._pending_grant
        self.grants[grant.grant_id] = grant
        self._pending_grant = None

    def check_grant(
        self,
        grant_id: str,
        patient_id: str,
        section: RecordSection,
        action: Action,
        now_ms: int,
        audit: bool = True,
    ) -> bool:
        grant = self.grants.get(grant_id)
        permit = (
            grant is not None
            and now_ms < grant.expires_at
            and grant.covers(patient_id, section, action)
        )
        if audit:
            self._audit(
                at=now_ms,
                patient_id=patient_id,
                actor_id=self.grant_actor(grant_id),
                actor_role="grant",
                event_kind=AuditKind.grant_checked,
                request_id=grant.request_id if grant else None,
                detail={
                    "grant_id": grant_id,
                    "section": section.value,
                    "action": action.value,
                    "outcome": "permit" if permit else "deny",
                },
            )
        return permit

    def grant_actor(self, grant_id: str) -> str:
        grant = self.grants.get(grant_id)
        if grant is None:
            return "unknown"
        case = self.cases.get(grant.request_id)
        return case.request.requester if case else "unknown"

    # ------------------------------------------------------------------
    # delegation

    def create_delegation(
        self,
        patient_id: str,
        delegate_ref: str,
        window_start: int,
        window_end: int,
    ) -> Delegation:
        patient = self.registry.get_patient(patient_id)
        if patient is None:
            raise UnknownPatient(patient_id)
        if window_start >= window_end:
            raise InvalidWindow(f"[{window_start}, {window_end})")
        delegate = self.registry.get_patient(delegate_ref)
        if delegate is None or not delegate.devices:
            raise DelegateWithoutDevice(delegate_ref)
        delegation = Delegation(
            delegation_id=self.ids.next_id("dlg"),
            delegator=patient_id,
            delegate=delegate_ref,
            window_start=window_start,
            window_end=window_end,
        )
        now = self.clock.now_ms()
        self._audit(
            at=now,
            patient_id=patient_id,
            actor_id=patient_id,
            actor_role="patient",
            event_kind=AuditKind.delegation_created,
            detail={
                "delegation_id": delegation.delegation_id,
                "delegate": delegate_ref,
                "window_start": window_start,
                "window_end": window_end,
            },
        )
        self.registry.add_delegation(delegation)
        return delegation

    def revoke_delegation(self, delegation_id: str) -> None:
        delegation = self.registry.delegations.get(delegation_id)
        if delegation is None:
            raise UnknownDelegation(delegation_id)
        now = self.clock.now_ms()
        self._audit(
            at=now,
            patient_id=delegation.delegator,
            actor_id=delegation.delegator,
            actor_role="patient",
            event_kind=AuditKind.delegation_revoked,
            detail={"delegation_id": delegation_id},
        )
        delegation.revoked = True
        self.registry.changed()

    # ------------------------------------------------------------------
    # email

    def pump_email_queue(self, now_ms: int | None = None) -> int:
        now = now_ms if now_ms is not None else self.clock.now_ms()
        self._flush_audit_retry()

        def on_sent(notice) -> None:
            self._audit(
                at=now,
                patient_id="",
                actor_id="mail",
                actor_role="system",
                event_kind=AuditKind.email_sent,
                detail={"notice_id": notice.notice_id, "attempts": notice.attempts},
            )

        return self.email_queue.pump(now, on_sent=on_sent)
