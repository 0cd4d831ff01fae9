"""Shared domain types and the consent state machine.

Everything else in the package speaks in these types.  The transition
table is the single behavioural contract for request lifecycles; it is
also shipped as a versioned JSON fixture (``fixtures/transitions.v1.json``)
so tests and documentation read the same source of truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources


class DomainError(Exception):
    """Base for protocol-level errors raised by domain operations."""


class InvalidTransition(DomainError):
    def __init__(self, state: "ConsentState", event: "ConsentEvent") -> None:
        super().__init__(f"no transition from {state.value} on {event.value}")
        self.state = state
        self.event = event


class MalformedEmergency(DomainError):
    """Emergency declared without an emergency purpose or justification."""


class UnknownPrincipal(DomainError):
    pass


class UnknownPatient(DomainError):
    pass


class PrincipalRole(str, Enum):
    usual_gp = "usual_gp"
    gp = "gp"
    medical_specialist = "medical_specialist"
    allied_health = "allied_health"
    pharmacist = "pharmacist"
    radiology_technician = "radiology_technician"
    health_insurer = "health_insurer"
    system_operator = "system_operator"


class DeviceKind(str, Enum):
    smartphone_push = "smartphone_push"
    sms = "sms"
    voice_call = "voice_call"
    landline_voice = "landline_voice"
    hardware_token = "hardware_token"


class RecordSection(str, Enum):
    demographics = "demographics"
    medical_history = "medical_history"
    mental_health = "mental_health"
    medications = "medications"
    pathology_results = "pathology_results"
    radiology_results = "radiology_results"
    documents = "documents"


# Deterministic ordering used wherever "smallest section" matters.
SECTION_ORDER = {s: i for i, s in enumerate(RecordSection)}


class Action(str, Enum):
    read = "read"
    write = "write"


class AccessPurpose(str, Enum):
    monitor_health_conditions = "monitor_health_conditions"
    review_health_information = "review_health_information"
    review_path_rad_results = "review_path_rad_results"
    remind_and_recall = "remind_and_recall"
    scan_and_store_results = "scan_and_store_results"
    target_high_risk_patient = "target_high_risk_patient"
    consultation = "consultation"
    emergency_treatment = "emergency_treatment"


class RequestCategory(str, Enum):
    normal = "normal"
    special = "special"


class ConsentState(str, Enum):
    Created = "Created"
    Authenticated = "Authenticated"
    AclPassed = "AclPassed"
    AutoApproved = "AutoApproved"
    AwaitingPatient = "AwaitingPatient"
    AwaitingDelegate = "AwaitingDelegate"
    Approved = "Approved"
    Denied = "Denied"
    TimedOut = "TimedOut"
    EmergencyGranted = "EmergencyGranted"
    RejectedAuth = "RejectedAuth"
    RejectedAcl = "RejectedAcl"


class ConsentEvent(str, Enum):
    AuthOk = "AuthOk"
    AuthFail = "AuthFail"
    AclOk = "AclOk"
    AclFail = "AclFail"
    UsualProviderDetected = "UsualProviderDetected"
    DispatchedToPatient = "DispatchedToPatient"
    PatientApproved = "PatientApproved"
    PatientDenied = "PatientDenied"
    DelegateEscalation = "DelegateEscalation"
    DelegateApproved = "DelegateApproved"
    DelegateDenied = "DelegateDenied"
    Timeout = "Timeout"
    BreakGlassInvoked = "BreakGlassInvoked"


TERMINAL_STATES = frozenset(
    {
        ConsentState.AutoApproved,
        ConsentState.Approved,
        ConsentState.Denied,
        ConsentState.TimedOut,
        ConsentState.EmergencyGranted,
        ConsentState.RejectedAuth,
        ConsentState.RejectedAcl,
    }
)

TRANSITION_TABLE: dict[tuple[ConsentState, ConsentEvent], ConsentState] = {
    (ConsentState.Created, ConsentEvent.AuthOk): ConsentState.Authenticated,
    (ConsentState.Created, ConsentEvent.AuthFail): ConsentState.RejectedAuth,
    (ConsentState.Authenticated, ConsentEvent.AclOk): ConsentState.AclPassed,
    (ConsentState.Authenticated, ConsentEvent.AclFail): ConsentState.RejectedAcl,
    (ConsentState.AclPassed, ConsentEvent.UsualProviderDetected): ConsentState.AutoApproved,
    (ConsentState.AclPassed, ConsentEvent.DispatchedToPatient): ConsentState.AwaitingPatient,
    (ConsentState.AwaitingPatient, ConsentEvent.PatientApproved): ConsentState.Approved,
    (ConsentState.AwaitingPatient, ConsentEvent.PatientDenied): ConsentState.Denied,
    (ConsentState.AwaitingPatient, ConsentEvent.Timeout): ConsentState.TimedOut,
    (ConsentState.AwaitingPatient, ConsentEvent.DelegateEscalation): ConsentState.AwaitingDelegate,
    (ConsentState.AwaitingDelegate, ConsentEvent.DelegateApproved): ConsentState.Approved,
    (ConsentState.AwaitingDelegate, ConsentEvent.DelegateDenied): ConsentState.Denied,
    (ConsentState.AwaitingDelegate, ConsentEvent.Timeout): ConsentState.TimedOut,
    (ConsentState.AclPassed, ConsentEvent.BreakGlassInvoked): ConsentState.EmergencyGranted,
    (ConsentState.AwaitingPatient, ConsentEvent.BreakGlassInvoked): ConsentState.EmergencyGranted,
    (ConsentState.AwaitingDelegate, ConsentEvent.BreakGlassInvoked): ConsentState.EmergencyGranted,
}


def transition(state: ConsentState, event: ConsentEvent) -> ConsentState:
    """Successor state for (state, event); raises InvalidTransition otherwise.

    Total over the enum cross product: every pair either maps through the
    table or raises.  Callers must treat InvalidTransition as a protocol
    violation, never swallow it.
    """
    try:
        return TRANSITION_TABLE[(state, event)]
    except KeyError:
        raise InvalidTransition(state, event) from None


def load_transition_fixture() -> dict[tuple[ConsentState, ConsentEvent], ConsentState]:
    """Parse the shipped transitions.v1.json fixture into table form."""
    raw = resources.files("consentgate").joinpath("fixtures/transitions.v1.json").read_text()
    doc = json.loads(raw)
    table = {}
    for row in doc["transitions"]:
        key = (ConsentState(row["from"]), ConsentEvent(row["on"]))
        table[key] = ConsentState(row["to"])
    return table


@dataclass(frozen=True)
class Device:
    device_id: str
    kind: DeviceKind
    address: str
    priority: int

    def __post_init__(self) -> None:
        if self.priority < 1:
            raise ValueError("device priority must be >= 1")


@dataclass
class Principal:
    principal_id: str
    display_name: str
    role: PrincipalRole
    credential_hash: bytes
    linked_patients: set[str] = field(default_factory=set)


@dataclass
class Patient:
    patient_id: str
    display_name: str
    devices: list[Device] = field(default_factory=list)
    nominee: str | None = None  # patient_id of the standing nominee
    email: str = ""

    def ordered_devices(self) -> list[Device]:
        return sorted(self.devices, key=lambda d: d.priority)


@dataclass(frozen=True)
class AccessRequest:
    request_id: str
    requester: str
    patient: str
    sections: frozenset[RecordSection]
    action: Action
    purpose: AccessPurpose
    category: RequestCategory
    justification: str | None
    submitted_at: int

    def __post_init__(self) -> None:
        if not self.sections:
            raise ValueError("sections must be non-empty")
        if self.category is RequestCategory.special and not self.justification:
            raise ValueError("special request requires a justification")


class GrantKind(str, Enum):
    consented = "consented"
    auto_usual_provider = "auto_usual_provider"
    emergency = "emergency"


@dataclass(frozen=True)
class Grant:
    grant_id: str
    request_id: str
    patient_id: str
    sections: frozenset[RecordSection]
    action: Action
    issued_at: int
    expires_at: int
    kind: GrantKind

    def covers(self, patient_id: str, section: RecordSection, action: Action) -> bool:
        return (
            patient_id == self.patient_id
            and section in self.sections
            and action == self.action
        )


@dataclass
class Delegation:
    delegation_id: str
    delegator: str
    delegate: str  # patient_id of the person receiving prompts
    window_start: int
    window_end: int
    revoked: bool = False

    def active_at(self, now_ms: int) -> bool:
        return not self.revoked and self.window_start <= now_ms < self.window_end


@dataclass
class ConsentCase:
    """Per-request state machine instance.

    ``state`` is always the fold of ``transition`` over ``history`` from
    Created; ``apply`` is the only mutation path.
    """

    request: AccessRequest
    state: ConsentState = ConsentState.Created
    history: list[tuple[ConsentEvent, int]] = field(default_factory=list)
    active_channel: str | None = None
    deadline: int | None = None
    attempts: int = 0
    overall_deadline: int | None = None
    active_target: str | None = None
    active_delegation_id: str | None = None

    def apply(self, event: ConsentEvent, at_ms: int) -> ConsentState:
        if self.history and at_ms < self.history[-1][1]:
            raise ValueError("history must be time-ordered")
        self.state = transition(self.state, event)
        self.history.append((event, at_ms))
        return self.state

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def check_fold(self) -> bool:
        state = ConsentState.Created
        for event, _ in self.history:
            state = transition(state, event)
        return state == self.state


def classify(
    purpose: AccessPurpose,
    declared_emergency: bool,
    justification: str | None,
) -> RequestCategory:
    """Categorize a request as normal or special (emergency).

    Pure function.  A declared emergency must carry the emergency purpose
    and a non-empty justification or it is malformed, not quietly normal.
    """
    if not declared_emergency:
        return RequestCategory.normal
    if purpose is not AccessPurpose.emergency_treatment or not justification:
        raise MalformedEmergency(
            "emergency declared without emergency_treatment purpose and justification"
        )
    return RequestCategory.special


def is_usual_provider(requester: str, patient: str, registry) -> bool:
    """True iff the requester holds the usual-provider link for this patient.

    The link is a per-patient relationship held in the registry, never
    self-asserted; the requester must also carry the usual_gp role.
    """
    principal = registry.get_principal(requester)
    if principal is None:
        raise UnknownPrincipal(requester)
    if registry.get_patient(patient) is None:
        raise UnknownPatient(patient)
    return principal.role is PrincipalRole.usual_gp and patient in principal.linked_patients
