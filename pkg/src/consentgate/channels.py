"""Notification channels: push, SMS, voice, and one-time passcodes.

All transports are in-process simulations writing to an inspectable
outbox; the Transport interface is the seam where real telephony or a
push vendor would plug in.  Responses come back as single-use,
request-bound proofs: a keyed MAC for push devices, a reply code for
everything else.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import random
import secrets
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .clock import Clock
from .domain import (
    AccessPurpose,
    Action,
    Device,
    DeviceKind,
    DomainError,
    RecordSection,
)

PASSCODE_TTL_MS = 300_000
PASSCODE_SPACE = 10**6


class ChannelError(DomainError):
    pass


class TransportUnavailable(ChannelError):
    pass


class DuplicatePriority(ChannelError):
    pass


class DuplicateDevice(ChannelError):
    pass


class UnknownDevice(ChannelError):
    pass


class ProofKind(str, Enum):
    push_signed = "push_signed"
    sms_reply_code = "sms_reply_code"
    voice_keypress = "voice_keypress"
    otp_code = "otp_code"


# Which proof kind each device kind answers with.
PROOF_KIND_FOR_DEVICE: dict[DeviceKind, ProofKind] = {
    DeviceKind.smartphone_push: ProofKind.push_signed,
    DeviceKind.sms: ProofKind.sms_reply_code,
    DeviceKind.voice_call: ProofKind.voice_keypress,
    DeviceKind.landline_voice: ProofKind.voice_keypress,
    DeviceKind.hardware_token: ProofKind.otp_code,
}


@dataclass(frozen=True)
class ConsentPrompt:
    """What the patient sees. Metadata only, never clinical content."""

    request_id: str
    patient_display: str
    requester_display: str
    purpose: AccessPurpose
    sections: frozenset[RecordSection]
    action: Action
    expires_at: int


@dataclass(frozen=True)
class DeliveryReceipt:
    delivered: bool
    at: int


@dataclass(frozen=True)
class ResponseProof:
    kind: ProofKind
    payload: str
    device_id: str

    def fingerprint(self, request_id: str) -> str:
        material = f"{self.kind.value}|{self.payload}|{self.device_id}|{request_id}"
        return hashlib.sha256(material.encode()).hexdigest()


@dataclass
class Passcode:
    code: str
    request_id: str
    issued_at: int
    ttl_ms: int = PASSCODE_TTL_MS
    consumed: bool = False


@dataclass
class OutboxEntry:
    request_id: str
    device_id: str
    kind: DeviceKind
    attempt: int
    sent_at: int
    # extras are inspectable in-process but excluded from the frozen
    # outbox.jsonl schema
    payload: dict = field(default_factory=dict)

    def wire_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "device_id": self.device_id,
            "kind": self.kind.value,
            "attempt": self.attempt,
            "sent_at": self.sent_at,
        }


class Transport:
    """Delivery seam. Simulations either deliver or raise."""

    def deliver(self, prompt: ConsentPrompt, device: Device) -> None:
        raise NotImplementedError


class SimulatedTransport(Transport):
    def __init__(self, failing: bool = False):
        self.failing = failing

    def deliver(self, prompt: ConsentPrompt, device: Device) -> None:
        if self.failing:
            raise TransportUnavailable(device.kind.value)


class ChannelManager:
    """Owns transports, the outbox, passcodes, and proof verification.

    Secret state (enrollment keys, live passcodes, consumed proofs) is
    snapshot/restorable so the service can persist it across restarts.
    """

    def __init__(
        self,
        clock: Clock,
        outbox_path: str | None = None,
        on_change: Callable[[], None] | None = None,
        rng: random.Random | None = None,
    ) -> None:
        self._clock = clock
        self._outbox_path = outbox_path
        self._on_change = on_change or (lambda: None)
        self._rng = rng
        self.transports: dict[DeviceKind, Transport] = {
            kind: SimulatedTransport() for kind in DeviceKind
        }
        self.outbox: list[OutboxEntry] = []
        self._enrollment_keys: dict[str, str] = {}  # device_id -> hex key
        self._passcodes: dict[str, list[Passcode]] = {}  # request_id -> codes
        self._consumed_proofs: set[str] = set()
        # serializes verify-and-consume so single-use holds under races
        self._verify_lock = threading.Lock()

    # -- device enrollment ----------------------------------------------

    def link_device(self, patient, device: Device) -> None:
        if any(d.device_id == device.device_id for d in patient.devices):
            raise DuplicateDevice(device.device_id)
        if any(d.priority == device.priority for d in patient.devices):
            raise DuplicatePriority(f"priority {device.priority} already taken")
        patient.devices.append(device)
        if device.device_id not in self._enrollment_keys:
            self._enrollment_keys[device.device_id] = secrets.token_hex(16)
        self._on_change()

    def unlink_device(self, patient, device_id: str) -> None:
        for i, d in enumerate(patient.devices):
            if d.device_id == device_id:
                del patient.devices[i]
                self._on_change()
                return
        raise UnknownDevice(device_id)

    def enrollment_key(self, device_id: str) -> str | None:
        return self._enrollment_keys.get(device_id)

    # -- dispatch --------------------------------------------------------

    def dispatch(self, prompt: ConsentPrompt, device: Device, attempt: int = 1) -> DeliveryReceipt:
        now = self._clock.now_ms()
        transport = self.transports.get(device.kind)
        if transport is None:
            raise TransportUnavailable(device.kind.value)
        transport.deliver(prompt, device)  # raises on failure
        payload: dict = {"purpose": prompt.purpose.value}
        if PROOF_KIND_FOR_DEVICE[device.kind] is not ProofKind.push_signed:
            # non-push channels answer with a one-time reply code that we
            # deliver alongside the prompt
            payload["reply_code"] = self.issue_passcode(prompt.request_id).code
        entry = OutboxEntry(
            request_id=prompt.request_id,
            device_id=device.device_id,
            kind=device.kind,
            attempt=attempt,
            sent_at=now,
            payload=payload,
        )
        self.outbox.append(entry)
        if self._outbox_path:
            with open(self._outbox_path, "a") as fh:
                fh.write(json.dumps(entry.wire_dict(), sort_keys=True) + "\n")
        return DeliveryReceipt(delivered=True, at=now)

    # -- passcodes -------------------------------------------------------

    def issue_passcode(self, request_id: str) -> Passcode:
        if self._rng is not None:
            value = self._rng.randrange(PASSCODE_SPACE)
        else:
            value = secrets.randbelow(PASSCODE_SPACE)
        code = Passcode(
            code=f"{value:06d}",
            request_id=request_id,
            issued_at=self._clock.now_ms(),
        )
        self._passcodes.setdefault(request_id, []).append(code)
        self._on_change()
        return code

    def verify_passcode(self, request_id: str, code: str, now_ms: int) -> bool:
        with self._verify_lock:
            return self._verify_passcode_locked(request_id, code, now_ms)

    def _verify_passcode_locked(self, request_id: str, code: str, now_ms: int) -> bool:
        # Uniform fail for unknown/expired/consumed/mismatched: no oracle.
        for candidate in self._passcodes.get(request_id, []):
            if candidate.consumed:
                continue
            if now_ms >= candidate.issued_at + candidate.ttl_ms:
                continue
            if hmac.compare_digest(candidate.code, code):
                candidate.consumed = True
                self._on_change()
                return True
        return False

    # -- proofs ----------------------------------------------------------

    def make_push_proof(self, request_id: str, device_id: str, decision: str) -> ResponseProof:
        """Sign a decision the way an enrolled push device would."""
        key = self._enrollment_keys.get(device_id)
        if key is None:
            raise UnknownDevice(device_id)
        mac = _push_mac(key, request_id, device_id, decision)
        return ResponseProof(
            kind=ProofKind.push_signed,
            payload=f"{decision}:{mac}",
            device_id=device_id,
        )

    def verify_proof(self, proof: ResponseProof, request_id: str, now_ms: int) -> bool:
        with self._verify_lock:
            fp = proof.fingerprint(request_id)
            if fp in self._consumed_proofs:
                return False
            if proof.kind is ProofKind.push_signed:
                ok = self._verify_push(proof, request_id)
            else:
                ok = self._verify_passcode_locked(request_id, proof.payload, now_ms)
            if ok:
                self._consumed_proofs.add(fp)
                self._on_change()
            return ok

    def proof_decision(self, proof: ResponseProof) -> str | None:
        """Decision a push proof was signed over, if stated."""
        if proof.kind is ProofKind.push_signed and ":" in proof.payload:
            return proof.payload.split(":", 1)[0]
        return None

    def _verify_push(self, proof: ResponseProof, request_id: str) -> bool:
        key = self._enrollment_keys.get(proof.device_id)
        if key is None or ":" not in proof.payload:
            return False
        decision, mac = proof.payload.split(":", 1)
        expected = _push_mac(key, request_id, proof.device_id, decision)
        # byte comparison: malformed (non-ASCII) payloads fail, never raise
        return hmac.compare_digest(expected.encode(), mac.encode())

    # -- persistence -----------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "enrollment_keys": dict(self._enrollment_keys),
            "passcodes": {
                rid: [
                    {
                        "code": c.code,
                        "issued_at": c.issued_at,
                        "ttl_ms": c.ttl_ms,
                        "consumed": c.consumed,
                    }
                    for c in codes
                ]
                for rid, codes in self._passcodes.items()
            },
            "consumed_proofs": sorted(self._consumed_proofs),
        }

    def reload_outbox(self) -> None:
        """Rebuild the in-memory outbox from outbox.jsonl after a restart.

        The file holds only the metadata schema; reply codes are recovered
        by pairing each non-push entry with the passcode issued for it, in
        order, from the restored passcode store.
        """
        if not self._outbox_path or not os.path.exists(self._outbox_path):
            return
        self.outbox = []
        cursor: dict[str, int] = {}
        with open(self._outbox_path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                kind = DeviceKind(doc["kind"])
                payload: dict = {}
                if PROOF_KIND_FOR_DEVICE[kind] is not ProofKind.push_signed:
                    rid = doc["request_id"]
                    idx = cursor.get(rid, 0)
                    cursor[rid] = idx + 1
                    codes = self._passcodes.get(rid, [])
                    if idx < len(codes):
                        payload["reply_code"] = codes[idx].code
                self.outbox.append(
                    OutboxEntry(
                        request_id=doc["request_id"],
                        device_id=doc["device_id"],
                        kind=kind,
                        attempt=doc["attempt"],
                        sent_at=doc["sent_at"],
                        payload=payload,
                    )
                )

    def restore(self, snap: dict) -> None:
        self._enrollment_keys = dict(snap.get("enrollment_keys", {}))
        self._passcodes = {
            rid: [Passcode(request_id=rid, **c) for c in codes]
            for rid, codes in snap.get("passcodes", {}).items()
        }
        self._consumed_proofs = set(snap.get("consumed_proofs", []))


def _push_mac(key_hex: str, request_id: str, device_id: str, decision: str) -> str:
    message = f"{request_id}|{device_id}|{decision}".encode()
    return hmac.new(bytes.fromhex(key_hex), message, hashlib.sha256).hexdigest()
