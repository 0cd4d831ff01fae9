"""Minimal EHR stand-in: opaque per-section documents behind grant checks.

The store has no public ungated read/write; every access goes through
the grant checker supplied at construction time, and every permitted
access is audited.
"""

from __future__ import annotations

import base64
import threading
from dataclasses import dataclass
from typing import Callable

from .domain import Action, DomainError, RecordSection


class GrantDenied(DomainError):
    pass


class SectionEmpty(DomainError):
    pass


@dataclass
class SectionDocument:
    patient_id: str
    section: RecordSection
    body: bytes
    version: int
    updated_at: int
    updated_by: str


class RecordStore:
    def __init__(
        self,
        check_grant: Callable[[str, str, RecordSection, Action, int], bool],
        on_access: Callable[[str, str, RecordSection, Action, int, int], None],
        actor_for_grant: Callable[[str], str] | None = None,
        on_change: Callable[[], None] | None = None,
    ) -> None:
        # check_grant(grant_id, patient_id, section, action, now) -> permit
        # on_access(grant_id, patient_id, section, action, version, now)
        self._check_grant = check_grant
        self._on_access = on_access
        self._actor_for_grant = actor_for_grant or (lambda grant_id: grant_id)
        self._on_change = on_change or (lambda: None)
        self._docs: dict[tuple[str, RecordSection], SectionDocument] = {}
        self._lock = threading.Lock()

    def read_section(
        self, grant_id: str, patient_id: str, section: RecordSection, now_ms: int
    ) -> SectionDocument:
        if not self._check_grant(grant_id, patient_id, section, Action.read, now_ms):
            raise GrantDenied(grant_id)
        with self._lock:
            doc = self._docs.get((patient_id, section))
        if doc is None:
            raise SectionEmpty(f"{patient_id}/{section.value}")
        self._on_access(grant_id, patient_id, section, Action.read, doc.version, now_ms)
        return doc

    def write_section(
        self, grant_id: str, patient_id: str, section: RecordSection, body: bytes, now_ms: int
    ) -> int:
        if not self._check_grant(grant_id, patient_id, section, Action.write, now_ms):
            raise GrantDenied(grant_id)
        with self._lock:
            prev = self._docs.get((patient_id, section))
            version = (prev.version if prev else 0) + 1
            self._docs[(patient_id, section)] = SectionDocument(
                patient_id=patient_id,
                section=section,
                body=body,
                version=version,
                updated_at=now_ms,
                updated_by=self._actor_for_grant(grant_id),
            )
        self._on_change()
        self._on_access(grant_id, patient_id, section, Action.write, version, now_ms)
        return version

    def seed(self, patient_id: str, section: RecordSection, body: bytes) -> None:
        """Fixture loading path; bypasses grants, used only by seeding."""
        with self._lock:
            prev = self._docs.get((patient_id, section))
            version = (prev.version if prev else 0) + 1
            self._docs[(patient_id, section)] = SectionDocument(
                patient_id=patient_id,
                section=section,
                body=body,
                version=version,
                updated_at=0,
                updated_by="seed",
            )
        self._on_change()

    def snapshot(self) -> dict:
        with self._lock:
            return {
                f"{pid}/{section.value}": {
                    "body": base64.b64encode(doc.body).decode(),
                    "version": doc.version,
                    "updated_at": doc.updated_at,
                    "updated_by": doc.updated_by,
                }
                for (pid, section), doc in self._docs.items()
            }

    def restore(self, snap: dict) -> None:
        with self._lock:
            self._docs = {}
            for key, raw in snap.items():
                pid, section_name = key.rsplit("/", 1)
                section = RecordSection(section_name)
                self._docs[(pid, section)] = SectionDocument(
                    patient_id=pid,
                    section=section,
                    body=base64.b64decode(raw["body"]),
                    version=raw["version"],
                    updated_at=raw["updated_at"],
                    updated_by=raw["updated_by"],
                )
