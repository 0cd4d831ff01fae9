"""Identifier generation.

Server-assigned ids (requests, grants, delegations, notices) come from an
IdSource so harness runs can be made fully deterministic.  Auth ticket ids
are always cryptographically random regardless of mode; they never appear
in persisted logs.
"""

from __future__ import annotations

import random
import secrets


class IdSource:
    """Random, unguessable ids. Default for production use."""

    def next_id(self, prefix: str) -> str:
        return f"{prefix}-{secrets.token_hex(8)}"


class SequentialIdSource(IdSource):
    """Deterministic counter-based ids for harness/simulation mode."""

    def __init__(self) -> None:
        self._counters: dict[str, int] = {}

    def next_id(self, prefix: str) -> str:
        n = self._counters.get(prefix, 0) + 1
        self._counters[prefix] = n
        return f"{prefix}-{n:06d}"

    def snapshot(self) -> dict[str, int]:
        return dict(self._counters)

    def restore(self, counters: dict[str, int]) -> None:
        self._counters = dict(counters)


def new_ticket_id() -> str:
    # 128 bits of randomness; never derived from an IdSource.
    return secrets.token_hex(16)


def seeded_rng(seed: int) -> random.Random:
    return random.Random(seed)
