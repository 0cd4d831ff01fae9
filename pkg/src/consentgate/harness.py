"""Scenario harness: scripted end-to-end runs and randomized campaigns.

Scenarios are JSON files (steps against the HTTP surface, advances of
the simulated clock, and an expected per-request trace).  The fuzz
campaign generates random populations and request storms, then sweeps
the global invariants over the resulting audit log and grant set.
"""

from __future__ import annotations

import json
import os
import random
import shutil
import tempfile
from dataclasses import dataclass, field
from importlib import resources

from .audit import AuditKind
from .channels import PROOF_KIND_FOR_DEVICE, SimulatedTransport, TransportUnavailable
from .clock import FIVE_DAYS_MS
from .domain import (
    AccessPurpose,
    Action,
    ConsentState,
    DeviceKind,
    GrantKind,
    RecordSection,
    is_usual_provider,
)
from .orchestrator import BreakGlassRejected
from .service import Service, ServiceConfig, build_app

TERMINAL_DENIES = frozenset(
    {
        ConsentState.Denied,
        ConsentState.TimedOut,
        ConsentState.RejectedAuth,
        ConsentState.RejectedAcl,
    }
)


def scenario_names() -> list[str]:
    files = resources.files("consentgate").joinpath("scenarios")
    return sorted(
        p.name[: -len(".json")]
        for p in files.iterdir()
        if p.name.endswith(".json")
        and p.name != "manifest.json"
        and not p.name.startswith("_")
    )


def load_scenario(name: str) -> dict:
    raw = resources.files("consentgate").joinpath(f"scenarios/{name}.json").read_text()
    return json.loads(raw)


def load_manifest() -> dict:
    raw = resources.files("consentgate").joinpath("scenarios/manifest.json").read_text()
    return json.loads(raw)


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    diffs: list[str] = field(default_factory=list)
    grant_ttl_ms: int | None = None

    def first_divergence(self) -> str | None:
        return self.diffs[0] if self.diffs else None


class ScenarioRunner:
    """Executes scenario steps against a harness-mode service over HTTP.

    The runner holds only a variable environment (saved ids); the service
    can be swapped mid-run (restart testing) without losing the script.
    """

    def __init__(self, data_dir: str, rng_seed: int = 0) -> None:
        self.data_dir = data_dir
        self.rng_seed = rng_seed
        self.env: dict[str, str] = {}
        self.service: Service | None = None
        self._client = None
        self.start_service()

    def start_service(self) -> None:
        self.close()
        config = ServiceConfig(
            data_dir=self.data_dir, clock_mode="simulated", harness=True
        )
        self.service = Service(config, rng_seed=self.rng_seed)
        from fastapi.testclient import TestClient

        self._client = TestClient(build_app(self.service), raise_server_exceptions=False)

    def restart_service(self) -> None:
        """Simulated kill + reload from the data directory."""
        self.start_service()

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    # -- step execution --------------------------------------------------

    def _sub(self, value):
        if isinstance(value, str) and value.startswith("$"):
            return self.env[value[1:]]
        return value

    def run_step(self, step: dict) -> None:
        op = step["op"]
        c = self._client
        if op == "seed":
            if "fixture_ref" in step:
                raw = (
                    resources.files("consentgate")
                    .joinpath(f"scenarios/{step['fixture_ref']}.json")
                    .read_text()
                )
                self.service.seed(json.loads(raw))
            else:
                self.service.seed(step["fixture"])
        elif op == "advance":
            r = c.post("/v1/harness/clock/advance", json={"delta_ms": step["delta_ms"]})
            assert r.status_code == 200, r.text
        elif op == "login":
            r = c.post(
                "/v1/auth/login",
                json={"user_id": step["user"], "password": step["password"]},
            )
            assert r.status_code == 200, r.text
            self.env[step["save_as"]] = r.json()["ticket_id"]
        elif op == "submit":
            r = c.post(
                "/v1/requests",
                json={
                    "ticket_id": self._sub(step["ticket"]),
                    "patient_id": step["patient"],
                    "sections": step["sections"],
                    "action": step["action"],
                    "purpose": step["purpose"],
                    "declared_emergency": step.get("declared_emergency", False),
                    "justification": step.get("justification"),
                },
            )
            assert r.status_code == step.get("expect_status", 200), r.text
            self.env[step["save_as"]] = r.json()["request_id"]
        elif op == "respond":
            request_id = self._sub(step["request"])
            proof = self._proof_for(request_id, step["responder"], step["decision"])
            r = c.post(
                f"/v1/requests/{request_id}/decision",
                json={
                    "responder_id": step["responder"],
                    "decision": step["decision"],
                    "proof": proof,
                },
            )
            assert r.status_code == step.get("expect_status", 200), r.text
        elif op == "break_glass":
            request_id = self._sub(step["request"])
            r = c.post(
                f"/v1/requests/{request_id}/break-glass",
                json={
                    "ticket_id": self._sub(step["ticket"]),
                    "justification": step.get("justification", ""),
                },
            )
            assert r.status_code == step.get("expect_status", 200), r.text
            if "save_grant_as" in step:
                self.env[step["save_grant_as"]] = r.json()["grant_id"]
        elif op == "delegate":
            r = c.post(
                f"/v1/patients/{step['patient']}/delegations",
                json={
                    "delegate": step["delegate"],
                    "window_start": step["window_start"],
                    "window_end": step["window_end"],
                },
            )
            assert r.status_code == step.get("expect_status", 200), r.text
            if "save_as" in step:
                self.env[step["save_as"]] = r.json()["delegation_id"]
        elif op == "revoke_delegation":
            r = c.delete(f"/v1/delegations/{self._sub(step['delegation'])}")
            assert r.status_code == step.get("expect_status", 200), r.text
        elif op == "read_record":
            case_r = c.get(f"/v1/requests/{self._sub(step['request'])}")
            grant_id = case_r.json().get("grant_id")
            r = c.get(
                f"/v1/records/{step['patient']}/{step['section']}",
                params={"grant_id": grant_id or "missing"},
            )
            assert r.status_code == step.get("expect_status", 200), r.text
        else:
            raise ValueError(f"unknown scenario op: {op}")

    def _proof_for(self, request_id: str, responder: str, decision: str) -> dict:
        r = self._client.get("/v1/harness/outbox", params={"request_id": request_id})
        entries = r.json()["outbox"]
        assert entries, f"no outbox entries for {request_id}"
        last = entries[-1]
        if DeviceKind(last["kind"]) is DeviceKind.smartphone_push:
            pr = self._client.post(
                "/v1/harness/push-proof",
                json={
                    "request_id": request_id,
                    "device_id": last["device_id"],
                    "decision": decision,
                },
            )
            return pr.json()
        proof_kind = PROOF_KIND_FOR_DEVICE[DeviceKind(last["kind"])]
        return {
            "kind": proof_kind.value,
            "payload": last["payload"]["reply_code"],
            "device_id": last["device_id"],
        }

    # -- full runs -------------------------------------------------------

    def run(self, scenario: dict, from_step: int = 0, to_step: int | None = None) -> None:
        steps = scenario["steps"]
        end = len(steps) if to_step is None else to_step
        for step in steps[from_step:end]:
            self.run_step(step)

    def check_expectations(self, scenario: dict) -> ScenarioResult:
        diffs: list[str] = []
        ttl_seen: int | None = None
        for expect in scenario["expect"]:
            request_id = self._sub(expect["request"])
            case = self.service.orchestrator.cases.get(request_id)
            if case is None:
                diffs.append(f"{request_id}: case missing")
                continue
            if case.state.value != expect["terminal_state"]:
                diffs.append(
                    f"{request_id}: state {case.state.value}, expected {expect['terminal_state']}"
                )
            if "trace" in expect:
                actual = [
                    e.event_kind.value
                    for e in self.service.audit_log.events()
                    if e.request_id == request_id
                    and e.event_kind is not AuditKind.grant_checked
                ]
                if actual != expect["trace"]:
                    divergence = next(
                        (
                            i
                            for i, (a, b) in enumerate(zip(actual, expect["trace"]))
                            if a != b
                        ),
                        min(len(actual), len(expect["trace"])),
                    )
                    diffs.append(
                        f"{request_id}: trace diverges at step {divergence}: "
                        f"actual {actual} vs expected {expect['trace']}"
                    )
            grants = [
                g
                for g in self.service.orchestrator.grants.values()
                if g.request_id == request_id
            ]
            if expect.get("grant") is None:
                if grants:
                    diffs.append(f"{request_id}: unexpected grant {grants[0].grant_id}")
            else:
                if not grants:
                    diffs.append(f"{request_id}: expected a grant, none issued")
                else:
                    g = grants[0]
                    ttl_seen = g.expires_at - g.issued_at
                    want = expect["grant"]
                    if g.kind.value != want["kind"]:
                        diffs.append(
                            f"{request_id}: grant kind {g.kind.value} != {want['kind']}"
                        )
                    if "ttl_ms" in want and g.expires_at - g.issued_at != want["ttl_ms"]:
                        diffs.append(
                            f"{request_id}: grant ttl {g.expires_at - g.issued_at} != {want['ttl_ms']}"
                        )
            if expect.get("mail_queued"):
                queued = [
                    n
                    for n in self.service.email_queue.notices.values()
                    if n.body.get("grant_id") in {g.grant_id for g in grants}
                ]
                if not queued:
                    diffs.append(f"{request_id}: expected a queued break-glass email")
        return ScenarioResult(
            name=scenario["name"], passed=not diffs, diffs=diffs, grant_ttl_ms=ttl_seen
        )


def run_scenario(name: str, data_dir: str | None = None) -> ScenarioResult:
    scenario = load_scenario(name)
    tmp = None
    if data_dir is None:
        tmp = tempfile.mkdtemp(prefix="consentgate-scn-")
        data_dir = tmp
    runner = ScenarioRunner(data_dir)
    try:
        runner.run(scenario)
        return runner.check_expectations(scenario)
    finally:
        runner.close()
        if tmp:
            shutil.rmtree(tmp, ignore_errors=True)


# ----------------------------------------------------------------------
# fuzz campaign


class FlakyTransport(SimulatedTransport):
    def __init__(self, rng: random.Random, fail_rate: float) -> None:
        super().__init__()
        self._rng = rng
        self._fail_rate = fail_rate

    def deliver(self, prompt, device) -> None:
        if self._rng.random() < self._fail_rate:
            raise TransportUnavailable(device.kind.value)


@dataclass
class FuzzReport:
    seed: int
    n_requests: int
    violations: list[str] = field(default_factory=list)
    states: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


_FUZZ_ROLES = ["gp", "medical_specialist", "allied_health", "pharmacist", "radiology_technician", "health_insurer"]


def _fuzz_population(rng: random.Random) -> dict:
    principals = [
        {
            "id": "dr-usual",
            "role": "usual_gp",
            "password": "pw",
            "usertype": "manager",
            "linked_patients": ["pat-0", "pat-1"],
        }
    ]
    for i, role in enumerate(_FUZZ_ROLES):
        principals.append(
            {"id": f"prov-{i}", "role": role, "password": "pw", "usertype": "manager"}
        )
    patients = []
    kinds = [k.value for k in DeviceKind]
    for i in range(6):
        devices = []
        n_dev = rng.choice([0, 1, 1, 2, 3])
        for j in range(n_dev):
            devices.append(
                {
                    "device_id": f"dev-{i}-{j}",
                    "kind": rng.choice(kinds),
                    "address": f"+61-{i}{j}",
                    "priority": j + 1,
                }
            )
        patients.append(
            {
                "id": f"pat-{i}",
                "email": f"pat{i}@example.net",
                "devices": devices,
            }
        )
    # patient 4 has a nominee, patient 5 is unreachable by configuration
    patients[4]["devices"] = []
    patients[4]["nominee"] = "pat-0"
    patients[5]["devices"] = []
    patients[5].pop("nominee", None)
    if not patients[0]["devices"]:
        patients[0]["devices"] = [
            {"device_id": "dev-0-0", "kind": "smartphone_push", "address": "+61-00", "priority": 1}
        ]
    return {"principals": principals, "patients": patients}


def fuzz_campaign(
    seed: int,
    n_requests: int,
    channel_fail_rate: float = 0.0,
    data_dir: str | None = None,
) -> FuzzReport:
    rng = random.Random(seed)
    tmp = None
    if data_dir is None:
        tmp = tempfile.mkdtemp(prefix="consentgate-fuzz-")
        data_dir = tmp
    config = ServiceConfig(data_dir=data_dir, clock_mode="simulated", harness=True)
    service = Service(config, rng_seed=seed)
    try:
        service.seed(_fuzz_population(rng))
        if channel_fail_rate > 0:
            for kind in DeviceKind:
                service.channels.transports[kind] = FlakyTransport(rng, channel_fail_rate)
        _drive_random_requests(service, rng, n_requests)
        report = FuzzReport(seed=seed, n_requests=n_requests)
        report.violations = sweep_invariants(service)
        for case in service.orchestrator.cases.values():
            report.states[case.state.value] = report.states.get(case.state.value, 0) + 1
        return report
    finally:
        if tmp:
            shutil.rmtree(tmp, ignore_errors=True)


def _drive_random_requests(service: Service, rng: random.Random, n: int) -> None:
    orch = service.orchestrator
    provider_ids = sorted(service.registry.principals)
    patient_ids = sorted(service.registry.patients)
    tickets = {
        pid: service.tickets.authenticate(pid, "pw").ticket_id for pid in provider_ids
    }
    sections = list(RecordSection)
    purposes = [p for p in AccessPurpose if p is not AccessPurpose.emergency_treatment]

    for _ in range(n):
        service.advance_clock(rng.randrange(500, 5_000))
        requester = rng.choice(provider_ids)
        patient = rng.choice(patient_ids)
        path = rng.random()
        if path < 0.12:
            # break-glass from scratch
            try:
                orch.break_glass(
                    ticket_id=tickets[requester],
                    justification="emergency department admission",
                    patient_id=patient,
                    sections={rng.choice(sections)},
                    action=rng.choice(list(Action)),
                )
            except BreakGlassRejected:
                pass
            continue
        try:
            case = orch.submit_access_request(
                ticket_id=tickets[requester],
                patient_id=patient,
                sections={rng.choice(sections) for _ in range(rng.randrange(1, 4))},
                action=rng.choice(list(Action)),
                purpose=rng.choice(purposes),
            )
        except Exception:
            continue
        if case.terminal:
            continue
        if path < 0.5:
            _respond_via_channel(service, rng, case, "approve")
        elif path < 0.7:
            _respond_via_channel(service, rng, case, "deny")
        elif path < 0.78:
            try:
                orch.break_glass(
                    ticket_id=tickets[requester],
                    justification="patient unresponsive",
                    request_id=case.request.request_id,
                )
            except BreakGlassRejected:
                pass
        else:
            # walk the case through its deadlines until it times out
            while not case.terminal:
                target = case.deadline or case.overall_deadline
                now = service.clock.now_ms()
                if target is None or target <= now:
                    break
                service.advance_clock(target - now)
    # settle anything still pending
    final = service.clock.now_ms()
    horizon = max(
        (c.overall_deadline or final for c in orch.cases.values()), default=final
    )
    if horizon > final:
        service.advance_clock(horizon - final)
    service.advance_clock(1)


def _respond_via_channel(service: Service, rng: random.Random, case, decision: str) -> None:
    request_id = case.request.request_id
    entries = [e for e in service.channels.outbox if e.request_id == request_id]
    if not entries or case.active_channel is None:
        return
    last = entries[-1]
    from .channels import ProofKind, ResponseProof

    if last.kind is DeviceKind.smartphone_push:
        proof = service.channels.make_push_proof(request_id, last.device_id, decision)
    else:
        proof = ResponseProof(
            kind=PROOF_KIND_FOR_DEVICE[last.kind],
            payload=last.payload.get("reply_code", ""),
            device_id=last.device_id,
        )
    try:
        service.orchestrator.record_decision(
            request_id, case.active_target, decision, proof
        )
    except Exception:
        pass


# ----------------------------------------------------------------------
# global invariant sweep


def sweep_invariants(service: Service) -> list[str]:
    """Audit the whole run: consent completeness, fail-closed, ordering."""
    violations: list[str] = []
    orch = service.orchestrator
    events = service.audit_log.events()

    by_request: dict[str, list] = {}
    for e in events:
        if e.request_id:
            by_request.setdefault(e.request_id, []).append(e)

    # seq contiguity
    for i, e in enumerate(events, start=1):
        if e.seq != i:
            violations.append(f"audit seq gap at {i}: {e.seq}")
            break

    for grant in orch.grants.values():
        rid = grant.request_id
        case = orch.cases.get(rid)
        if case is None:
            violations.append(f"{grant.grant_id}: grant without case")
            continue
        if case.state in TERMINAL_DENIES:
            violations.append(
                f"{grant.grant_id}: grant coexists with deny state {case.state.value}"
            )
        kinds = [e.event_kind for e in by_request.get(rid, [])]
        if AuditKind.grant_issued not in kinds:
            violations.append(f"{grant.grant_id}: no grant_issued audit event")
        if grant.kind is GrantKind.consented:
            decision = orch.decisions.get(rid)
            if decision is None or decision.decision != "approve":
                violations.append(f"{grant.grant_id}: consented grant without approval")
        elif grant.kind is GrantKind.auto_usual_provider:
            if not is_usual_provider(case.request.requester, grant.patient_id, service.registry):
                violations.append(f"{grant.grant_id}: auto grant without usual link")
        elif grant.kind is GrantKind.emergency:
            if grant.expires_at - grant.issued_at != FIVE_DAYS_MS:
                violations.append(f"{grant.grant_id}: emergency TTL not five days")
            if AuditKind.break_glass not in kinds:
                violations.append(f"{grant.grant_id}: emergency grant without break_glass event")
            if AuditKind.email_queued not in kinds:
                violations.append(f"{grant.grant_id}: emergency grant without queued email")

    grants_by_request = {g.request_id: g for g in orch.grants.values()}
    for rid, case in orch.cases.items():
        if not case.check_fold():
            violations.append(f"{rid}: state is not the fold of its history")
        kinds = [e.event_kind for e in by_request.get(rid, [])]
        if case.state in TERMINAL_DENIES and rid in grants_by_request:
            violations.append(f"{rid}: denied case holds a grant")
        if AuditKind.acl_fail in kinds and AuditKind.dispatched in kinds:
            violations.append(f"{rid}: dispatched despite ACL failure")
        if AuditKind.decision in kinds and AuditKind.dispatched in kinds:
            if kinds.index(AuditKind.dispatched) > kinds.index(AuditKind.decision):
                violations.append(f"{rid}: decision before dispatch")
        elif AuditKind.decision in kinds and AuditKind.dispatched not in kinds:
            violations.append(f"{rid}: decision without any dispatch")
        if case.state in TERMINAL_DENIES:
            if not by_request.get(rid):
                violations.append(f"{rid}: denied case left no patient-visible events")

    return violations
