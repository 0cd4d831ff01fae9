"""File-backed persistence and crash recovery.

The audit log is the source of truth for cases, grants, decisions, and
queued break-glass notices: all of them are rebuilt by folding the log
through ``rebuild_from_events``.  A checkpoint is a pure optimization
(snapshot + seq watermark); a corrupt checkpoint falls back to full log
replay, a corrupt log refuses to start.

Registry, channel secrets, and record bodies are not derivable from the
patient-visible log (secrets must never appear in it), so those are
persisted eagerly as whole-file atomic writes on every mutation.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field

from .audit import AuditEvent, AuditKind, EmailNotice
from .domain import (
    AccessPurpose,
    AccessRequest,
    Action,
    ConsentCase,
    ConsentEvent,
    ConsentState,
    Delegation,
    Device,
    DeviceKind,
    DomainError,
    Grant,
    GrantKind,
    Patient,
    Principal,
    PrincipalRole,
    RecordSection,
    RequestCategory,
)
from .orchestrator import DecisionRecord, ResponderKind
from .policy import Registry, UserType

AUDIT_FILE = "audit.jsonl"
CHECKPOINT_FILE = "checkpoint.json"
REGISTRY_FILE = "registry_state.json"
CHANNEL_FILE = "channel_state.json"
RECORDS_FILE = "records.json"
OUTBOX_FILE = "outbox.jsonl"
MAIL_FILE = "mail_outbox.jsonl"


class CorruptCheckpoint(DomainError):
    pass


def atomic_write_json(path: str, doc: dict) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: str) -> dict | None:
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)


# ----------------------------------------------------------------------
# replay: audit events -> case/grant/decision/notice state


@dataclass
class ReplayState:
    cases: dict[str, ConsentCase] = field(default_factory=dict)
    grants: dict[str, Grant] = field(default_factory=dict)
    decisions: dict[str, DecisionRecord] = field(default_factory=dict)
    notices: dict[str, EmailNotice] = field(default_factory=dict)


def rebuild_from_events(events: list[AuditEvent], state: ReplayState | None = None) -> ReplayState:
    state = state or ReplayState()
    for event in events:
        _apply_event(state, event)
    return state


def _apply_event(state: ReplayState, event: AuditEvent) -> None:
    kind = event.event_kind
    if kind in (AuditKind.auth_ok, AuditKind.auth_fail):
        d = event.detail
        request = AccessRequest(
            request_id=event.request_id,
            requester=event.actor_id,
            patient=event.patient_id,
            sections=frozenset(RecordSection(s) for s in d["sections"]),
            action=Action(d["action"]),
            purpose=AccessPurpose(d["purpose"]),
            category=RequestCategory(d["category"]),
            justification=d["justification"] or None,
            submitted_at=d["submitted_at"],
        )
        case = ConsentCase(request=request)
        case.overall_deadline = d.get("overall_deadline")
        state.cases[request.request_id] = case
        case.apply(
            ConsentEvent.AuthOk if kind is AuditKind.auth_ok else ConsentEvent.AuthFail,
            event.at,
        )
        return

    case = state.cases.get(event.request_id) if event.request_id else None

    if kind is AuditKind.acl_pass:
        case.apply(ConsentEvent.AclOk, event.at)
    elif kind is AuditKind.acl_fail:
        case.apply(ConsentEvent.AclFail, event.at)
    elif kind is AuditKind.dispatched:
        d = event.detail
        if d.get("outcome") == "no_channel":
            case.apply(ConsentEvent.DispatchedToPatient, event.at)
            case.deadline = d["deadline"]
            case.active_channel = None
            case.active_target = None
            return
        if case.state is ConsentState.AclPassed:
            case.apply(ConsentEvent.DispatchedToPatient, event.at)
        elif d.get("escalated"):
            case.apply(ConsentEvent.DelegateEscalation, event.at)
        case.attempts = d["attempt"]
        if d["outcome"] == "delivered":
            case.active_channel = d["device_id"]
            case.active_target = d["target"]
            case.active_delegation_id = d.get("delegation_id")
            case.deadline = d["deadline"]
        else:
            case.active_channel = None
            case.deadline = case.overall_deadline
    elif kind is AuditKind.decision:
        d = event.detail
        if case.state is ConsentState.AwaitingPatient:
            consent_event = (
                ConsentEvent.PatientApproved
                if d["decision"] == "approve"
                else ConsentEvent.PatientDenied
            )
        else:
            consent_event = (
                ConsentEvent.DelegateApproved
                if d["decision"] == "approve"
                else ConsentEvent.DelegateDenied
            )
        state.decisions[event.request_id] = DecisionRecord(
            request_id=event.request_id,
            responder_id=d["responder"],
            responder_kind=ResponderKind(d["responder_kind"]),
            decision=d["decision"],
            channel=d["channel"],
            decided_at=event.at,
        )
        # on approval the grant_issued line precedes the state change in
        # the live path; replay applies the decision here either way
        case.apply(consent_event, event.at)
    elif kind is AuditKind.grant_issued:
        d = event.detail
        grant = Grant(
            grant_id=d["grant_id"],
            request_id=event.request_id,
            patient_id=event.patient_id,
            sections=frozenset(RecordSection(s) for s in d["sections"]),
            action=Action(d["action"]),
            issued_at=d["issued_at"],
            expires_at=d["expires_at"],
            kind=GrantKind(d["kind"]),
        )
        state.grants[grant.grant_id] = grant
        if grant.kind is GrantKind.auto_usual_provider and case.state is ConsentState.AclPassed:
            case.apply(ConsentEvent.UsualProviderDetected, event.at)
    elif kind is AuditKind.timeout:
        case.apply(ConsentEvent.Timeout, event.at)
        case.active_channel = None
    elif kind is AuditKind.break_glass:
        case.apply(ConsentEvent.BreakGlassInvoked, event.at)
        case.active_channel = None
    elif kind is AuditKind.email_queued:
        d = event.detail
        state.notices[d["notice_id"]] = EmailNotice(
            notice_id=d["notice_id"],
            patient_email=d["patient_email"],
            subject=d["subject"],
            body=d["body"],
            queued_at=event.at,
        )
    elif kind is AuditKind.email_sent:
        d = event.detail
        notice = state.notices.get(d["notice_id"])
        if notice is not None:
            notice.sent_at = event.at
            notice.attempts = d.get("attempts", notice.attempts + 1)
    # grant_checked, duplicate_decision, record_*, device_*, delegation_*
    # are informational: the underlying state is persisted eagerly.


# ----------------------------------------------------------------------
# case/grant (de)serialization for checkpoints


def case_to_dict(case: ConsentCase) -> dict:
    r = case.request
    return {
        "request": {
            "request_id": r.request_id,
            "requester": r.requester,
            "patient": r.patient,
            "sections": sorted(s.value for s in r.sections),
            "action": r.action.value,
            "purpose": r.purpose.value,
            "category": r.category.value,
            "justification": r.justification,
            "submitted_at": r.submitted_at,
        },
        "state": case.state.value,
        "history": [[e.value, at] for e, at in case.history],
        "active_channel": case.active_channel,
        "deadline": case.deadline,
        "attempts": case.attempts,
        "overall_deadline": case.overall_deadline,
        "active_target": case.active_target,
        "active_delegation_id": case.active_delegation_id,
    }


def case_from_dict(doc: dict) -> ConsentCase:
    r = doc["request"]
    request = AccessRequest(
        request_id=r["request_id"],
        requester=r["requester"],
        patient=r["patient"],
        sections=frozenset(RecordSection(s) for s in r["sections"]),
        action=Action(r["action"]),
        purpose=AccessPurpose(r["purpose"]),
        category=RequestCategory(r["category"]),
        justification=r["justification"],
        submitted_at=r["submitted_at"],
    )
    case = ConsentCase(request=request)
    case.state = ConsentState(doc["state"])
    case.history = [(ConsentEvent(e), at) for e, at in doc["history"]]
    case.active_channel = doc["active_channel"]
    case.deadline = doc["deadline"]
    case.attempts = doc["attempts"]
    case.overall_deadline = doc["overall_deadline"]
    case.active_target = doc["active_target"]
    case.active_delegation_id = doc["active_delegation_id"]
    return case


def grant_to_dict(grant: Grant) -> dict:
    return {
        "grant_id": grant.grant_id,
        "request_id": grant.request_id,
        "patient_id": grant.patient_id,
        "sections": sorted(s.value for s in grant.sections),
        "action": grant.action.value,
        "issued_at": grant.issued_at,
        "expires_at": grant.expires_at,
        "kind": grant.kind.value,
    }


def grant_from_dict(doc: dict) -> Grant:
    return Grant(
        grant_id=doc["grant_id"],
        request_id=doc["request_id"],
        patient_id=doc["patient_id"],
        sections=frozenset(RecordSection(s) for s in doc["sections"]),
        action=Action(doc["action"]),
        issued_at=doc["issued_at"],
        expires_at=doc["expires_at"],
        kind=GrantKind(doc["kind"]),
    )


def write_checkpoint(data_dir: str, seq: int, state: ReplayState) -> None:
    doc = {
        "v": 1,
        "seq": seq,
        "cases": {rid: case_to_dict(c) for rid, c in state.cases.items()},
        "grants": {gid: grant_to_dict(g) for gid, g in state.grants.items()},
        "decisions": {
            rid: {
                "responder_id": d.responder_id,
                "responder_kind": d.responder_kind.value,
                "decision": d.decision,
                "channel": d.channel,
                "decided_at": d.decided_at,
            }
            for rid, d in state.decisions.items()
        },
        "notices": {
            nid: {
                "patient_email": n.patient_email,
                "subject": n.subject,
                "body": n.body,
                "queued_at": n.queued_at,
                "sent_at": n.sent_at,
                "attempts": n.attempts,
            }
            for nid, n in state.notices.items()
        },
    }
    atomic_write_json(os.path.join(data_dir, CHECKPOINT_FILE), doc)


def read_checkpoint(data_dir: str) -> tuple[int, ReplayState] | None:
    """(watermark seq, state) or None; raises CorruptCheckpoint on damage."""
    path = os.path.join(data_dir, CHECKPOINT_FILE)
    if not os.path.exists(path):
        return None
    try:
        with open(path) as fh:
            doc = json.load(fh)
        state = ReplayState()
        for rid, c in doc["cases"].items():
            state.cases[rid] = case_from_dict(c)
        for gid, g in doc["grants"].items():
            state.grants[gid] = grant_from_dict(g)
        for rid, d in doc["decisions"].items():
            state.decisions[rid] = DecisionRecord(
                request_id=rid,
                responder_id=d["responder_id"],
                responder_kind=ResponderKind(d["responder_kind"]),
                decision=d["decision"],
                channel=d["channel"],
                decided_at=d["decided_at"],
            )
        for nid, n in doc["notices"].items():
            state.notices[nid] = EmailNotice(
                notice_id=nid,
                patient_email=n["patient_email"],
                subject=n["subject"],
                body=n["body"],
                queued_at=n["queued_at"],
                sent_at=n["sent_at"],
                attempts=n["attempts"],
            )
        return doc["seq"], state
    except (json.JSONDecodeError, KeyError, ValueError, TypeError, AttributeError) as exc:
        raise CorruptCheckpoint(str(exc)) from exc


# ----------------------------------------------------------------------
# registry (eager)


def registry_to_dict(registry: Registry) -> dict:
    return {
        "v": 1,
        "principals": {
            pid: {
                "display_name": p.display_name,
                "role": p.role.value,
                "credential_hash": p.credential_hash.hex(),
                "linked_patients": sorted(p.linked_patients),
                "usertype": registry.usertypes.get(pid, UserType.normal).value,
                "approver": registry.approver_links.get(pid),
            }
            for pid, p in registry.principals.items()
        },
        "patients": {
            pid: {
                "display_name": p.display_name,
                "devices": [
                    {
                        "device_id": d.device_id,
                        "kind": d.kind.value,
                        "address": d.address,
                        "priority": d.priority,
                    }
                    for d in p.devices
                ],
                "nominee": p.nominee,
                "email": p.email,
            }
            for pid, p in registry.patients.items()
        },
        "patient_credentials": {
            pid: h.hex() for pid, h in registry.patient_credentials.items()
        },
        "delegations": {
            did: {
                "delegator": d.delegator,
                "delegate": d.delegate,
                "window_start": d.window_start,
                "window_end": d.window_end,
                "revoked": d.revoked,
            }
            for did, d in registry.delegations.items()
        },
    }


def restore_registry(doc: dict, registry: Registry) -> None:
    for pid, p in doc.get("principals", {}).items():
        registry.principals[pid] = Principal(
            principal_id=pid,
            display_name=p["display_name"],
            role=PrincipalRole(p["role"]),
            credential_hash=bytes.fromhex(p["credential_hash"]),
            linked_patients=set(p["linked_patients"]),
        )
        registry.usertypes[pid] = UserType(p["usertype"])
        if p.get("approver"):
            registry.approver_links[pid] = p["approver"]
    for pid, p in doc.get("patients", {}).items():
        registry.patients[pid] = Patient(
            patient_id=pid,
            display_name=p["display_name"],
            devices=[
                Device(
                    device_id=d["device_id"],
                    kind=DeviceKind(d["kind"]),
                    address=d["address"],
                    priority=d["priority"],
                )
                for d in p["devices"]
            ],
            nominee=p.get("nominee"),
            email=p.get("email", ""),
        )
    for pid, h in doc.get("patient_credentials", {}).items():
        registry.patient_credentials[pid] = bytes.fromhex(h)
    for did, d in doc.get("delegations", {}).items():
        registry.delegations[did] = Delegation(
            delegation_id=did,
            delegator=d["delegator"],
            delegate=d["delegate"],
            window_start=d["window_start"],
            window_end=d["window_end"],
            revoked=d["revoked"],
        )


_ID_RE = re.compile(r"^([a-z]+)-(\d{6})$")


def infer_id_counters(state: ReplayState, registry: Registry) -> dict[str, int]:
    """Highest sequential id per prefix, recovered from persisted state."""
    counters: dict[str, int] = {}

    def see(value: str | None) -> None:
        if not value:
            return
        m = _ID_RE.match(value)
        if m:
            prefix, n = m.group(1), int(m.group(2))
            counters[prefix] = max(counters.get(prefix, 0), n)

    for rid in state.cases:
        see(rid)
    for gid in state.grants:
        see(gid)
    for nid in state.notices:
        see(nid)
    for did in registry.delegations:
        see(did)
    return counters
