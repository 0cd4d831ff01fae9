"""Shared fixtures: a harness-mode service over a temp data directory."""
from __future__ import annotations

import json
from pathlib import Path

import pytest

from consentgate.service import Service, ServiceConfig

FIXTURES = Path(__file__).parent / "fixtures"

SEED = {
    "principals": [
        {
            "id": "dr-usual",
            "role": "usual_gp",
            "password": "pw",
            "usertype": "manager",
            "linked_patients": ["pat-amy"],
        },
        {"id": "dr-lee", "role": "gp", "password": "pw", "usertype": "manager"},
        {"id": "dr-chen", "role": "medical_specialist", "password": "pw", "usertype": "manager"},
        {"id": "rt-sam", "role": "radiology_technician", "password": "pw", "usertype": "manager"},
        {"id": "ins-acme", "role": "health_insurer", "password": "pw", "usertype": "manager"},
    ],
    "patients": [
        {
            "id": "pat-amy",
            "email": "amy@example.net",
            "password": "amy-pw",
            "devices": [
                {"device_id": "amy-phone", "kind": "smartphone_push", "address": "+61-1", "priority": 1},
                {"device_id": "amy-sms", "kind": "sms", "address": "+61-2", "priority": 2},
            ],
        },
        {"id": "pat-bob", "email": "bob@example.net", "devices": [], "nominee": "pat-amy"},
        {
            "id": "pat-cho",
            "email": "cho@example.net",
            "devices": [
                {"device_id": "cho-phone", "kind": "smartphone_push", "address": "+61-3", "priority": 1}
            ],
        },
        {"id": "pat-dee", "email": "dee@example.net", "devices": []},
    ],
    "records": [
        {"patient": "pat-amy", "section": "medications", "text": "aspirin 100mg"},
        {"patient": "pat-amy", "section": "medical_history", "text": "appendectomy 2019"},
        {"patient": "pat-cho", "section": "medications", "text": "metformin 500mg"},
    ],
}


def make_service(data_dir: str, seed: bool = True, rng_seed: int = 0) -> Service:
    config = ServiceConfig(data_dir=str(data_dir), clock_mode="simulated", harness=True)
    service = Service(config, rng_seed=rng_seed)
    if seed:
        service.seed(json.loads(json.dumps(SEED)))
    return service


@pytest.fixture
def service(tmp_path):
    return make_service(tmp_path / "data")


@pytest.fixture
def empty_service(tmp_path):
    return make_service(tmp_path / "data", seed=False)


def login(service: Service, user: str, password: str = "pw") -> str:
    return service.tickets.authenticate(user, password).ticket_id
