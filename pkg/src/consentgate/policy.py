"""Authentication, ACL, and the user/patient registry.

Three concerns that gate every request before any patient is contacted:
credential verification with ticket issuance, the role x section x action
permission table (default deny), and the registry holding principals,
patients, and the usual-provider links.
"""

from __future__ import annotations

import hashlib
import json
import secrets
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Callable

from .clock import Clock
from .domain import (
    Action,
    Delegation,
    Device,
    DomainError,
    Patient,
    Principal,
    PrincipalRole,
    RecordSection,
    SECTION_ORDER,
)
from .ids import new_ticket_id

PBKDF2_ITERATIONS = 20_000
DEFAULT_TICKET_TTL_MS = 3_600_000


class PolicyError(DomainError):
    pass


class BadCredentials(PolicyError):
    """Uniform failure for unknown user or wrong password."""


class EmptyCredential(PolicyError):
    pass


class UnknownTicket(PolicyError):
    pass


class ExpiredTicket(PolicyError):
    pass


class DuplicateUser(PolicyError):
    pass


class MissingApprover(PolicyError):
    pass


def hash_credential(credential: str, salt: bytes | None = None) -> bytes:
    salt = salt if salt is not None else secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", credential.encode(), salt, PBKDF2_ITERATIONS)
    return salt + digest


def verify_credential(credential: str, stored: bytes) -> bool:
    salt, digest = stored[:16], stored[16:]
    candidate = hashlib.pbkdf2_hmac("sha256", credential.encode(), salt, PBKDF2_ITERATIONS)
    return secrets.compare_digest(candidate, digest)


class UserType(str, Enum):
    normal = "normal"
    manager = "manager"


@dataclass
class RegistrationRecord:
    principal: Principal
    usertype: UserType
    linked_approver: str | None = None


class Registry:
    """Principals, patients, approver links, and delegations.

    Mutations invoke ``on_change`` so the owning service can persist the
    registry eagerly; the registry itself does no I/O.
    """

    def __init__(self, on_change: Callable[[], None] | None = None) -> None:
        self.principals: dict[str, Principal] = {}
        self.patients: dict[str, Patient] = {}
        self.usertypes: dict[str, UserType] = {}
        self.approver_links: dict[str, str] = {}
        self.patient_credentials: dict[str, bytes] = {}
        self.delegations: dict[str, Delegation] = {}
        self._on_change = on_change or (lambda: None)

    def changed(self) -> None:
        self._on_change()

    # -- principals ------------------------------------------------------

    def register_user(self, record: RegistrationRecord) -> str:
        pid = record.principal.principal_id
        if pid in self.principals or pid in self.patients:
            raise DuplicateUser(pid)
        if record.usertype is UserType.normal and not record.linked_approver:
            raise MissingApprover(pid)
        self.principals[pid] = record.principal
        self.usertypes[pid] = record.usertype
        if record.linked_approver:
            self.approver_links[pid] = record.linked_approver
        self.changed()
        return pid

    def get_principal(self, principal_id: str) -> Principal | None:
        return self.principals.get(principal_id)

    def list_approvers(self) -> list[str]:
        return sorted(
            pid for pid, ut in self.usertypes.items() if ut is UserType.manager
        )

    # -- patients --------------------------------------------------------

    def add_patient(self, patient: Patient) -> None:
        if patient.patient_id in self.patients or patient.patient_id in self.principals:
            raise DuplicateUser(patient.patient_id)
        self.patients[patient.patient_id] = patient
        self.changed()

    def get_patient(self, patient_id: str) -> Patient | None:
        return self.patients.get(patient_id)

    # -- delegations -----------------------------------------------------

    def add_delegation(self, delegation: Delegation) -> None:
        self.delegations[delegation.delegation_id] = delegation
        self.changed()

    def active_delegations_for(self, patient_id: str, now_ms: int) -> list[Delegation]:
        return sorted(
            (
                d
                for d in self.delegations.values()
                if d.delegator == patient_id and d.active_at(now_ms)
            ),
            key=lambda d: d.delegation_id,
        )


@dataclass(frozen=True)
class AuthTicket:
    ticket_id: str
    principal_id: str
    issued_at: int
    expires_at: int


class TicketStore:
    """Issues and verifies cryptographic tickets for authenticated sessions."""

    def __init__(
        self,
        registry: Registry,
        clock: Clock,
        ticket_ttl_ms: int = DEFAULT_TICKET_TTL_MS,
        on_auth: Callable[[str, bool], None] | None = None,
        on_change: Callable[[], None] | None = None,
    ) -> None:
        self._registry = registry
        self._clock = clock
        self._ttl = ticket_ttl_ms
        self._tickets: dict[str, AuthTicket] = {}
        # on_auth(principal_id, ok) lets the service audit login attempts.
        self._on_auth = on_auth or (lambda principal_id, ok: None)
        self._on_change = on_change or (lambda: None)

    def authenticate(self, principal_id: str, credential: str) -> AuthTicket:
        if not principal_id or not credential:
            raise EmptyCredential("username and password are required")
        principal = self._registry.get_principal(principal_id)
        if principal is not None:
            stored = principal.credential_hash
        else:
            # patients log in through the same door (console sessions)
            stored = self._registry.patient_credentials.get(principal_id)
        if stored is None or not verify_credential(credential, stored):
            self._on_auth(principal_id, False)
            # One error for both causes: no account enumeration.
            raise BadCredentials("invalid credentials")
        now = self._clock.now_ms()
        ticket = AuthTicket(
            ticket_id=new_ticket_id(),
            principal_id=principal_id,
            issued_at=now,
            expires_at=now + self._ttl,
        )
        self._tickets[ticket.ticket_id] = ticket
        self._on_change()
        self._on_auth(principal_id, True)
        return ticket

    def snapshot(self) -> dict:
        return {
            tid: {
                "principal_id": t.principal_id,
                "issued_at": t.issued_at,
                "expires_at": t.expires_at,
            }
            for tid, t in self._tickets.items()
        }

    def restore(self, snap: dict) -> None:
        self._tickets = {
            tid: AuthTicket(ticket_id=tid, **fields) for tid, fields in snap.items()
        }

    def peek(self, ticket_id: str) -> str | None:
        """Principal behind a ticket even if expired; None if unknown."""
        ticket = self._tickets.get(ticket_id)
        return ticket.principal_id if ticket else None

    def verify_ticket(self, ticket_id: str, now_ms: int) -> str:
        ticket = self._tickets.get(ticket_id)
        if ticket is None:
            raise UnknownTicket(ticket_id)
        if now_ms >= ticket.expires_at:  # boundary is exclusive
            raise ExpiredTicket(ticket_id)
        return ticket.principal_id


@dataclass(frozen=True)
class AclVerdict:
    permitted: bool
    violating_section: RecordSection | None = None


class AclTable:
    """Immutable role x section x action table, default deny."""

    def __init__(self, version: str, permits: frozenset[tuple[PrincipalRole, RecordSection, Action]]):
        self.version = version
        self._permits = permits

    @classmethod
    def from_dict(cls, doc: dict) -> "AclTable":
        if doc.get("default") != "deny":
            raise ValueError("policy fixture must declare default deny")
        permits = set()
        for role_name, sections in doc["permits"].items():
            role = PrincipalRole(role_name)
            for section_name, actions in sections.items():
                if section_name.startswith("_"):
                    continue
                section = RecordSection(section_name)
                for action_name in actions:
                    permits.add((role, section, Action(action_name)))
        return cls(version=str(doc["version"]), permits=frozenset(permits))

    @classmethod
    def load_default(cls) -> "AclTable":
        raw = resources.files("consentgate").joinpath("fixtures/acl.v1.json").read_text()
        return cls.from_dict(json.loads(raw))

    @classmethod
    def load_file(cls, path: str) -> "AclTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def allows(self, role: PrincipalRole, section: RecordSection, action: Action) -> bool:
        return (role, section, action) in self._permits


def acl_check(
    role: PrincipalRole,
    sections: frozenset[RecordSection] | set[RecordSection],
    action: Action,
    table: AclTable,
) -> AclVerdict:
    """Permit iff every requested section is permitted for (role, action).

    Deny names the smallest violating section in enum order so the answer
    is deterministic regardless of set iteration order.
    """
    violations = [s for s in sections if not table.allows(role, s, action)]
    if not violations:
        return AclVerdict(permitted=True)
    return AclVerdict(
        permitted=False,
        violating_section=min(violations, key=SECTION_ORDER.__getitem__),
    )
