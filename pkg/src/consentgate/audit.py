"""Append-only, patient-visible audit trail and break-glass email notices.

The log is plain JSON-lines (`audit.jsonl`, schema field ``v: 1``), one
event per line, strictly increasing ``seq`` with no gaps.  The store
exposes append and read only; there is no update or delete.  Emergency
email notices go through a durable queue drained into a simulated mail
sink (`mail_outbox.jsonl`).
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .domain import DomainError, Grant, GrantKind


class StorageFailure(DomainError):
    pass


class CorruptLog(DomainError):
    pass


class NonEmergencyGrant(DomainError):
    pass


class AuditKind(str, Enum):
    auth_ok = "auth_ok"
    auth_fail = "auth_fail"
    acl_pass = "acl_pass"
    acl_fail = "acl_fail"
    dispatched = "dispatched"
    decision = "decision"
    duplicate_decision = "duplicate_decision"
    timeout = "timeout"
    grant_issued = "grant_issued"
    grant_checked = "grant_checked"
    break_glass = "break_glass"
    email_queued = "email_queued"
    email_sent = "email_sent"
    delegation_created = "delegation_created"
    delegation_revoked = "delegation_revoked"
    device_linked = "device_linked"
    device_unlinked = "device_unlinked"
    record_read = "record_read"
    record_written = "record_written"


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    at: int
    patient_id: str
    actor_id: str
    actor_role: str
    event_kind: AuditKind
    request_id: str | None = None
    detail: dict = field(default_factory=dict)

    def to_line(self) -> str:
        doc = {
            "v": 1,
            "seq": self.seq,
            "at": self.at,
            "patient_id": self.patient_id,
            "actor_id": self.actor_id,
            "actor_role": self.actor_role,
            "event_kind": self.event_kind.value,
            "request_id": self.request_id,
            "detail": self.detail,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "AuditEvent":
        doc = json.loads(line)
        if doc.get("v") != 1:
            raise CorruptLog(f"unsupported audit schema version: {doc.get('v')}")
        return cls(
            seq=doc["seq"],
            at=doc["at"],
            patient_id=doc["patient_id"],
            actor_id=doc["actor_id"],
            actor_role=doc["actor_role"],
            event_kind=AuditKind(doc["event_kind"]),
            request_id=doc.get("request_id"),
            detail=doc.get("detail", {}),
        )


class AuditLog:
    """Serialized appender over a JSON-lines file.

    ``append`` is durable: the line is flushed and fsynced before the
    call returns.  ``write_hook`` exists for fault injection in tests.
    """

    def __init__(self, path: str | None = None) -> None:
        self._path = path
        self._events: list[AuditEvent] = []
        self._lock = threading.Lock()
        self.write_hook: Callable[[AuditEvent], None] | None = None

    @classmethod
    def load(cls, path: str) -> "AuditLog":
        log = cls(path)
        if not os.path.exists(path):
            return log
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    event = AuditEvent.from_line(line)
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise CorruptLog(f"{path}:{lineno}: {exc}") from exc
                if event.seq != len(log._events) + 1:
                    raise CorruptLog(
                        f"{path}:{lineno}: seq {event.seq}, expected {len(log._events) + 1}"
                    )
                log._events.append(event)
        return log

    def append(
        self,
        at: int,
        patient_id: str,
        actor_id: str,
        actor_role: str,
        event_kind: AuditKind,
        request_id: str | None = None,
        detail: dict | None = None,
    ) -> AuditEvent:
        with self._lock:
            event = AuditEvent(
                seq=len(self._events) + 1,
                at=at,
                patient_id=patient_id,
                actor_id=actor_id,
                actor_role=actor_role,
                event_kind=event_kind,
                request_id=request_id,
                detail=detail or {},
            )
            if self.write_hook is not None:
                self.write_hook(event)
            if self._path:
                try:
                    with open(self._path, "a") as fh:
                        fh.write(event.to_line() + "\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                except OSError as exc:
                    raise StorageFailure(str(exc)) from exc
            self._events.append(event)
            return event

    def events(self) -> list[AuditEvent]:
        with self._lock:
            return list(self._events)

    def last_seq(self) -> int:
        with self._lock:
            return len(self._events)

    def patient_view(
        self,
        patient_id: str,
        kinds: Iterable[AuditKind] | None = None,
        since: int | None = None,
        until: int | None = None,
    ) -> list[AuditEvent]:
        wanted = set(kinds) if kinds is not None else None
        out = []
        for e in self.events():
            if e.patient_id != patient_id:
                continue
            if wanted is not None and e.event_kind not in wanted:
                continue
            if since is not None and e.at < since:
                continue
            if until is not None and e.at > until:
                continue
            out.append(e)
        return out


@dataclass
class EmailNotice:
    notice_id: str
    patient_email: str
    subject: str
    body: dict
    queued_at: int
    sent_at: int | None = None
    attempts: int = 0


class MailSink:
    def send(self, notice: EmailNotice) -> None:
        raise NotImplementedError


class SimulatedMailSink(MailSink):
    def __init__(self, path: str | None = None, fail_times: int = 0) -> None:
        self.path = path
        self.sent: list[EmailNotice] = []
        self.fail_times = fail_times

    def send(self, notice: EmailNotice) -> None:
        if self.fail_times > 0:
            self.fail_times -= 1
            raise StorageFailure("mail sink unavailable")
        self.sent.append(notice)
        if self.path:
            with open(self.path, "a") as fh:
                doc = {
                    "notice_id": notice.notice_id,
                    "patient_email": notice.patient_email,
                    "subject": notice.subject,
                    "body": notice.body,
                    "queued_at": notice.queued_at,
                    "sent_at": notice.sent_at,
                }
                fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


class EmailQueue:
    """Durable queue of break-glass notices; delivery never blocks grants."""

    def __init__(self, sink: MailSink) -> None:
        self.sink = sink
        self.notices: dict[str, EmailNotice] = {}

    def queue_breakglass_notice(
        self,
        notice_id: str,
        grant: Grant,
        request,
        patient,
        now_ms: int,
    ) -> EmailNotice:
        if grant.kind is not GrantKind.emergency:
            raise NonEmergencyGrant(grant.grant_id)
        notice = EmailNotice(
            notice_id=notice_id,
            patient_email=patient.email,
            subject=f"Emergency access to your record by {request.requester}",
            body={
                "requester": request.requester,
                "sections": sorted(s.value for s in grant.sections),
                "action": grant.action.value,
                "justification": request.justification or "",
                "issued_at": grant.issued_at,
                "expires_at": grant.expires_at,
                "grant_id": grant.grant_id,
            },
            queued_at=now_ms,
        )
        self.notices[notice.notice_id] = notice
        return notice

    def pump(self, now_ms: int, on_sent: Callable[[EmailNotice], None] | None = None) -> int:
        """One delivery try per pending notice; failures retry next pump."""
        sent = 0
        for notice in list(self.notices.values()):
            if notice.sent_at is not None:
                continue
            notice.attempts += 1
            notice.sent_at = now_ms
            try:
                self.sink.send(notice)
            except StorageFailure:
                notice.sent_at = None
                continue
            sent += 1
            if on_sent is not None:
                on_sent(notice)
        return sent
