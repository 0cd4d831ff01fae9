"""Deployable service: wires every module together behind HTTP + files.

The Service object owns the stores and persistence; ``build_app`` wraps
it in a FastAPI application with the frozen /v1 endpoint surface.
Harness mode adds a simulated clock, deterministic ids, and a few
/v1/harness endpoints for tests and the console's dev mode.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import persistence
from .audit import AuditKind, AuditLog, EmailQueue, SimulatedMailSink
from .channels import (
    ChannelManager,
    DuplicateDevice,
    DuplicatePriority,
    ProofKind,
    ResponseProof,
    TransportUnavailable,
    UnknownDevice,
)
from .clock import RealClock, SimulatedClock
from .domain import (
    AccessPurpose,
    Action,
    ConsentState,
    Device,
    DeviceKind,
    MalformedEmergency,
    Patient,
    Principal,
    PrincipalRole,
    RecordSection,
    UnknownPatient,
    UnknownPrincipal,
)
from .ids import IdSource, SequentialIdSource
from .orchestrator import (
    AWAITING_STATES,
    BadProof,
    BreakGlassRejected,
    DelegateWithoutDevice,
    EmptyJustification,
    InvalidWindow,
    Orchestrator,
    OrchestratorConfig,
    UnauthorizedResponder,
    UnknownDelegation,
    UnknownRequest,
)
from .policy import (
    AclTable,
    BadCredentials,
    DuplicateUser,
    EmptyCredential,
    ExpiredTicket,
    MissingApprover,
    Registry,
    RegistrationRecord,
    TicketStore,
    UnknownTicket,
    UserType,
    hash_credential,
)
from .records import GrantDenied, RecordStore, SectionEmpty


def iso_ms(ms: int | None) -> str | None:
    if ms is None:
        return None
    return datetime.fromtimestamp(ms / 1000, tz=timezone.utc).isoformat(
        timespec="milliseconds"
    )


@dataclass
class ServiceConfig:
    data_dir: str
    listen_address: str = "127.0.0.1:8000"
    policy_fixture_path: str | None = None
    clock_mode: str = "real"  # real | simulated
    harness: bool = False
    orchestrator: OrchestratorConfig = field(default_factory=OrchestratorConfig)
    ticket_ttl_ms: int = 3_600_000

    def __post_init__(self) -> None:
        if self.clock_mode not in ("real", "simulated"):
            raise ValueError("clock_mode must be real or simulated")
        if self.clock_mode == "simulated" and not self.harness:
            raise ValueError("simulated clock requires harness mode")

    @classmethod
    def from_file(cls, path: str) -> "ServiceConfig":
        with open(path) as fh:
            doc = json.load(fh)
        orch = doc.pop("orchestrator", None)
        cfg = cls(**doc)
        if orch:
            cfg.orchestrator = OrchestratorConfig(**orch)
        return cfg


CLOCK_FILE = "clock.json"


class Service:
    """The assembled system: load, serve, seed, checkpoint."""

    def __init__(self, config: ServiceConfig, rng_seed: int | None = None) -> None:
        self.config = config
        os.makedirs(config.data_dir, exist_ok=True)
        self._p = lambda name: os.path.join(config.data_dir, name)

        if config.clock_mode == "simulated":
            self.clock = SimulatedClock()
            saved = persistence.read_json(self._p(CLOCK_FILE))
            if saved:
                self.clock.set(saved["now_ms"])
        else:
            self.clock = RealClock()

        self.ids: IdSource
        if config.harness:
            self.ids = SequentialIdSource()
        else:
            self.ids = IdSource()

        self.registry = Registry(on_change=self._save_registry)
        reg_doc = persistence.read_json(self._p(persistence.REGISTRY_FILE))
        if reg_doc:
            persistence.restore_registry(reg_doc, self.registry)

        if config.policy_fixture_path:
            self.acl_table = AclTable.load_file(config.policy_fixture_path)
        else:
            self.acl_table = AclTable.load_default()

        # CorruptLog propagates: a damaged audit log refuses to start.
        self.audit_log = AuditLog.load(self._p(persistence.AUDIT_FILE))

        rng = None
        if config.harness and rng_seed is not None:
            from .ids import seeded_rng

            rng = seeded_rng(rng_seed)
        self.channels = ChannelManager(
            self.clock,
            outbox_path=self._p(persistence.OUTBOX_FILE),
            on_change=self._save_channels,
            rng=rng,
        )
        chan_doc = persistence.read_json(self._p(persistence.CHANNEL_FILE))
        if chan_doc:
            self.channels.restore(chan_doc)
            self.channels.reload_outbox()

        self.mail_sink = SimulatedMailSink(self._p(persistence.MAIL_FILE))
        self.email_queue = EmailQueue(self.mail_sink)

        self.tickets = TicketStore(
            self.registry,
            self.clock,
            ticket_ttl_ms=config.ticket_ttl_ms,
            on_change=self._save_tickets,
        )
        ticket_doc = persistence.read_json(self._p("tickets.json"))
        if ticket_doc:
            self.tickets.restore(ticket_doc)

        self.orchestrator = Orchestrator(
            registry=self.registry,
            acl_table=self.acl_table,
            tickets=self.tickets,
            channels=self.channels,
            audit_log=self.audit_log,
            email_queue=self.email_queue,
            clock=self.clock,
            ids=self.ids,
            config=config.orchestrator,
        )
        self._restore_from_log()

        self.records = RecordStore(
            check_grant=self.orchestrator.check_grant,
            on_access=self._audit_record_access,
            actor_for_grant=self.orchestrator.grant_actor,
            on_change=self._save_records,
        )
        rec_doc = persistence.read_json(self._p(persistence.RECORDS_FILE))
        if rec_doc:
            self.records.restore(rec_doc.get("docs", {}))

    # -- persistence hooks ----------------------------------------------

    def _save_registry(self) -> None:
        persistence.atomic_write_json(
            self._p(persistence.REGISTRY_FILE), persistence.registry_to_dict(self.registry)
        )

    def _save_channels(self) -> None:
        persistence.atomic_write_json(
            self._p(persistence.CHANNEL_FILE), self.channels.snapshot()
        )

    def _save_records(self) -> None:
        persistence.atomic_write_json(
            self._p(persistence.RECORDS_FILE), {"docs": self.records.snapshot()}
        )

    def _save_tickets(self) -> None:
        persistence.atomic_write_json(self._p("tickets.json"), self.tickets.snapshot())

    def _save_clock(self) -> None:
        if isinstance(self.clock, SimulatedClock):
            persistence.atomic_write_json(
                self._p(CLOCK_FILE), {"now_ms": self.clock.now_ms()}
            )

    def _restore_from_log(self) -> None:
        try:
            checkpoint = persistence.read_checkpoint(self.config.data_dir)
        except persistence.CorruptCheckpoint:
            checkpoint = None  # fall back to full replay
        if checkpoint is not None:
            watermark, state = checkpoint
        else:
            watermark, state = 0, persistence.ReplayState()
        tail = [e for e in self.audit_log.events() if e.seq > watermark]
        state = persistence.rebuild_from_events(tail, state)
        self.orchestrator.cases = state.cases
        self.orchestrator.grants = state.grants
        self.orchestrator.decisions = state.decisions
        self.email_queue.notices = state.notices
        if isinstance(self.ids, SequentialIdSource):
            self.ids.restore(persistence.infer_id_counters(state, self.registry))

    def checkpoint(self) -> int:
        state = persistence.ReplayState(
            cases=self.orchestrator.cases,
            grants=self.orchestrator.grants,
            decisions=self.orchestrator.decisions,
            notices=self.email_queue.notices,
        )
        seq = self.audit_log.last_seq()
        persistence.write_checkpoint(self.config.data_dir, seq, state)
        return seq

    def _audit_record_access(self, grant_id, patient_id, section, action, version, now):
        self.audit_log.append(
            at=now,
            patient_id=patient_id,
            actor_id=self.orchestrator.grant_actor(grant_id),
            actor_role="provider",
            event_kind=AuditKind.record_read if action is Action.read else AuditKind.record_written,
            request_id=self.orchestrator.grants[grant_id].request_id
            if grant_id in self.orchestrator.grants
            else None,
            detail={"grant_id": grant_id, "section": section.value, "version": version},
        )

    # -- clock / timers --------------------------------------------------

    def advance_clock(self, delta_ms: int) -> int:
        if not isinstance(self.clock, SimulatedClock):
            raise ValueError("clock advance only available with the simulated clock")
        now = self.clock.advance(delta_ms)
        self._save_clock()
        self.tick()
        return now

    def tick(self) -> None:
        """Fire due deadlines and drain the email queue."""
        self.orchestrator.sweep_deadlines()
        self.orchestrator.pump_email_queue()

    # -- seeding ---------------------------------------------------------

    def seed(self, doc: dict) -> None:
        for p in doc.get("principals", []):
            record = RegistrationRecord(
                principal=Principal(
                    principal_id=p["id"],
                    display_name=p.get("display_name", p["id"]),
                    role=PrincipalRole(p["role"]),
                    credential_hash=hash_credential(p["password"]),
                    linked_patients=set(p.get("linked_patients", [])),
                ),
                usertype=UserType(p.get("usertype", "manager")),
                linked_approver=p.get("approver"),
            )
            self.registry.register_user(record)
        for p in doc.get("patients", []):
            patient = Patient(
                patient_id=p["id"],
                display_name=p.get("display_name", p["id"]),
                nominee=p.get("nominee"),
                email=p.get("email", ""),
            )
            self.registry.add_patient(patient)
            if p.get("password"):
                self.registry.patient_credentials[p["id"]] = hash_credential(p["password"])
                self.registry.changed()
            for d in p.get("devices", []):
                self.channels.link_device(
                    patient,
                    Device(
                        device_id=d["device_id"],
                        kind=DeviceKind(d["kind"]),
                        address=d.get("address", ""),
                        priority=d["priority"],
                    ),
                )
            self.registry.changed()
        for r in doc.get("records", []):
            self.records.seed(
                r["patient"], RecordSection(r["section"]), r.get("text", "").encode()
            )

    def seed_file(self, path: str) -> None:
        with open(path) as fh:
            self.seed(json.load(fh))


# ----------------------------------------------------------------------
# HTTP surface


_ERROR_STATUS = {
    BadCredentials: 401,
    UnknownTicket: 401,
    ExpiredTicket: 401,
    EmptyCredential: 422,
    DuplicateUser: 409,
    MissingApprover: 422,
    UnknownPatient: 404,
    UnknownPrincipal: 404,
    UnknownRequest: 404,
    UnknownDelegation: 404,
    UnknownDevice: 404,
    SectionEmpty: 404,
    MalformedEmergency: 422,
    EmptyJustification: 422,
    InvalidWindow: 422,
    DelegateWithoutDevice: 422,
    DuplicatePriority: 422,
    DuplicateDevice: 422,
    UnauthorizedResponder: 403,
    BadProof: 403,
    GrantDenied: 403,
    TransportUnavailable: 503,
}


def _status_for(exc: Exception) -> int:
    for klass, status in _ERROR_STATUS.items():
        if isinstance(exc, klass):
            return status
    if isinstance(exc, BreakGlassRejected):
        return 401 if exc.state is ConsentState.RejectedAuth else 403
    if isinstance(exc, ValueError):
        return 422
    return 500


def case_view(case) -> dict:
    return {
        "request_id": case.request.request_id,
        "state": case.state.value,
        "requester": case.request.requester,
        "patient": case.request.patient,
        "sections": sorted(s.value for s in case.request.sections),
        "action": case.request.action.value,
        "purpose": case.request.purpose.value,
        "category": case.request.category.value,
        "deadline": iso_ms(case.deadline),
        "history": [
            {"event": e.value, "at": iso_ms(at)} for e, at in case.history
        ],
    }


def build_app(service: Service):
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="consentgate", version="1.0")
    app.state.service = service
    orch = service.orchestrator

    @app.exception_handler(Exception)
    async def domain_error_handler(request: Request, exc: Exception):
        status = _status_for(exc)
        if status == 500:
            raise exc
        return JSONResponse(
            status_code=status,
            content={"error": type(exc).__name__, "message": str(exc)},
        )

    def _grant_for_request(request_id: str):
        for g in orch.grants.values():
            if g.request_id == request_id:
                return g
        return None

    def _require_patient_ticket(patient_id: str, ticket: str | None) -> None:
        if service.config.harness and ticket is None:
            return
        principal = service.tickets.verify_ticket(
            ticket or "", service.clock.now_ms()
        )
        if principal != patient_id:
            raise UnauthorizedResponder(f"{principal} is not {patient_id}")

    @app.post("/v1/auth/login")
    async def login(body: dict):
        ticket = service.tickets.authenticate(body.get("user_id", ""), body.get("password", ""))
        return {
            "ticket_id": ticket.ticket_id,
            "principal_id": ticket.principal_id,
            "expires_at": iso_ms(ticket.expires_at),
        }

    @app.post("/v1/users", status_code=201)
    async def create_user(body: dict):
        record = RegistrationRecord(
            principal=Principal(
                principal_id=body["id"],
                display_name=body.get("display_name", body["id"]),
                role=PrincipalRole(body["role"]),
                credential_hash=hash_credential(body["password"]),
                linked_patients=set(body.get("linked_patients", [])),
            ),
            usertype=UserType(body.get("usertype", "normal")),
            linked_approver=body.get("approver"),
        )
        return {"principal_id": service.registry.register_user(record)}

    @app.post("/v1/requests")
    async def submit_request(body: dict):
        case = orch.submit_access_request(
            ticket_id=body.get("ticket_id", ""),
            patient_id=body["patient_id"],
            sections={RecordSection(s) for s in body["sections"]},
            action=Action(body["action"]),
            purpose=AccessPurpose(body["purpose"]),
            declared_emergency=body.get("declared_emergency", False),
            justification=body.get("justification"),
        )
        view = case_view(case)
        grant = _grant_for_request(case.request.request_id)
        if grant:
            view["grant_id"] = grant.grant_id
        status = 200
        if case.state is ConsentState.RejectedAuth:
            status = 401
        elif case.state is ConsentState.RejectedAcl:
            status = 403
        return JSONResponse(status_code=status, content=view)

    @app.get("/v1/requests/{request_id}")
    async def get_request(request_id: str):
        case = orch.cases.get(request_id)
        if case is None:
            raise UnknownRequest(request_id)
        view = case_view(case)
        grant = _grant_for_request(request_id)
        if grant:
            view["grant_id"] = grant.grant_id
        return view

    @app.post("/v1/requests/{request_id}/decision")
    async def decide(request_id: str, body: dict):
        proof = ResponseProof(
            kind=ProofKind(body["proof"]["kind"]),
            payload=body["proof"]["payload"],
            device_id=body["proof"]["device_id"],
        )
        case = orch.record_decision(
            request_id=request_id,
            responder_id=body["responder_id"],
            decision=body["decision"],
            proof=proof,
        )
        view = case_view(case)
        grant = _grant_for_request(request_id)
        if grant:
            view["grant_id"] = grant.grant_id
        return view

    @app.post("/v1/requests/{request_id}/break-glass")
    async def break_glass(request_id: str, body: dict):
        grant = orch.break_glass(
            ticket_id=body.get("ticket_id", ""),
            justification=body.get("justification", ""),
            request_id=request_id,
        )
        return {
            "grant_id": grant.grant_id,
            "kind": grant.kind.value,
            "issued_at": iso_ms(grant.issued_at),
            "expires_at": iso_ms(grant.expires_at),
        }

    @app.post("/v1/patients/{patient_id}/devices")
    async def link_device(patient_id: str, body: dict):
        patient = service.registry.get_patient(patient_id)
        if patient is None:
            raise UnknownPatient(patient_id)
        device = Device(
            device_id=body["device_id"],
            kind=DeviceKind(body["kind"]),
            address=body.get("address", ""),
            priority=body["priority"],
        )
        service.channels.link_device(patient, device)
        service.registry.changed()
        service.audit_log.append(
            at=service.clock.now_ms(),
            patient_id=patient_id,
            actor_id=patient_id,
            actor_role="patient",
            event_kind=AuditKind.device_linked,
            detail={"device_id": device.device_id, "kind": device.kind.value},
        )
        return {"devices": [d.device_id for d in patient.ordered_devices()]}

    @app.delete("/v1/patients/{patient_id}/devices/{device_id}")
    async def unlink_device(patient_id: str, device_id: str):
        patient = service.registry.get_patient(patient_id)
        if patient is None:
            raise UnknownPatient(patient_id)
        service.channels.unlink_device(patient, device_id)
        service.registry.changed()
        service.audit_log.append(
            at=service.clock.now_ms(),
            patient_id=patient_id,
            actor_id=patient_id,
            actor_role="patient",
            event_kind=AuditKind.device_unlinked,
            detail={"device_id": device_id},
        )
        return {"devices": [d.device_id for d in patient.ordered_devices()]}

    @app.post("/v1/patients/{patient_id}/delegations")
    async def create_delegation(patient_id: str, body: dict):
        delegation = orch.create_delegation(
            patient_id=patient_id,
            delegate_ref=body["delegate"],
            window_start=body["window_start"],
            window_end=body["window_end"],
        )
        return {"delegation_id": delegation.delegation_id}

    @app.delete("/v1/delegations/{delegation_id}")
    async def revoke_delegation(delegation_id: str):
        orch.revoke_delegation(delegation_id)
        return {"revoked": delegation_id}

    @app.get("/v1/patients/{patient_id}/audit")
    async def patient_audit(
        patient_id: str,
        kinds: str | None = None,
        limit: int = 500,
        offset: int = 0,
        ticket: str | None = None,
    ):
        _require_patient_ticket(patient_id, ticket)
        wanted = (
            [AuditKind(k) for k in kinds.split(",") if k]
            if kinds
            else None
        )
        events = service.audit_log.patient_view(patient_id, kinds=wanted)
        total = len(events)
        page = events[offset : offset + limit]
        return {
            "total": total,
            "events": [
                {
                    "seq": e.seq,
                    "at": iso_ms(e.at),
                    "actor_id": e.actor_id,
                    "actor_role": e.actor_role,
                    "event_kind": e.event_kind.value,
                    "request_id": e.request_id,
                    "detail": e.detail,
                }
                for e in page
            ],
        }

    @app.get("/v1/patients/{patient_id}/pending")
    async def pending(patient_id: str, ticket: str | None = None):
        _require_patient_ticket(patient_id, ticket)
        now = service.clock.now_ms()
        out = []
        for case in sorted(orch.cases.values(), key=lambda c: c.request.request_id):
            if case.state not in AWAITING_STATES:
                continue
            if case.active_target != patient_id:
                continue
            principal = service.registry.get_principal(case.request.requester)
            out.append(
                {
                    "request_id": case.request.request_id,
                    "requester": case.request.requester,
                    "requester_display": principal.display_name if principal else "unknown",
                    "requester_role": principal.role.value if principal else "unknown",
                    "purpose": case.request.purpose.value,
                    "sections": sorted(s.value for s in case.request.sections),
                    "action": case.request.action.value,
                    "patient": case.request.patient,
                    "device_id": case.active_channel,
                    "deadline": iso_ms(case.deadline),
                    "remaining_ms": max(0, (case.deadline or now) - now),
                }
            )
        return {"pending": out}

    @app.get("/v1/records/{patient_id}/{section}")
    async def read_record(patient_id: str, section: str, grant_id: str):
        doc = service.records.read_section(
            grant_id, patient_id, RecordSection(section), service.clock.now_ms()
        )
        return {
            "patient_id": doc.patient_id,
            "section": doc.section.value,
            "text": doc.body.decode(errors="replace"),
            "version": doc.version,
            "updated_at": iso_ms(doc.updated_at),
            "updated_by": doc.updated_by,
        }

    @app.put("/v1/records/{patient_id}/{section}")
    async def write_record(patient_id: str, section: str, body: dict):
        version = service.records.write_section(
            body["grant_id"],
            patient_id,
            RecordSection(section),
            body.get("text", "").encode(),
            service.clock.now_ms(),
        )
        return {"version": version}

    if service.config.harness:

        @app.post("/v1/harness/clock/advance")
        async def clock_advance(body: dict):
            now = service.advance_clock(body["delta_ms"])
            return {"now_ms": now, "now": iso_ms(now)}

        @app.get("/v1/harness/outbox")
        async def harness_outbox(request_id: str | None = None):
            entries = [
                dict(e.wire_dict(), payload=e.payload)
                for e in service.channels.outbox
                if request_id is None or e.request_id == request_id
            ]
            return {"outbox": entries}

        @app.post("/v1/harness/push-proof")
        async def harness_push_proof(body: dict):
            proof = service.channels.make_push_proof(
                body["request_id"], body["device_id"], body["decision"]
            )
            return {
                "kind": proof.kind.value,
                "payload": proof.payload,
                "device_id": proof.device_id,
            }

        @app.post("/v1/harness/checkpoint")
        async def harness_checkpoint():
            return {"seq": service.checkpoint()}

        @app.get("/v1/harness/mail")
        async def harness_mail():
            return {
                "sent": [
                    {"notice_id": n.notice_id, "patient_email": n.patient_email}
                    for n in service.mail_sink.sent
                ],
                "queued": [
                    {"notice_id": n.notice_id, "sent_at": iso_ms(n.sent_at)}
                    for n in service.email_queue.notices.values()
                ],
            }

    return app
