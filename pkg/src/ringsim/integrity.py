"""Integrity-tree verification primitives and violation plumbing.

Verification chains: each metadata block's 54-bit MAC is stored in its
parent metadata block (the top of the chain is held on-chip), and each
data slot's MAC rides in its own ECC area, bound to the bucket's
encryption counter so stale data+MAC pairs fail. A parent-side MAC of
zero marks a child that has never been written since boot; such a child
must read back exactly as its deterministic initial image.

Error and tamper look identical at detection time (a MAC mismatch).
Schemes with replication attempt recovery first and only raise an attack
alarm when recovery fails; schemes without it alarm immediately.
"""

from __future__ import annotations

from dataclasses import dataclass

from .codec import unpack_ecc_area


@dataclass
class ViolationEvent:
    kind: str          # "meta" | "data" | "node" | "channel"
    bucket: int | None
    level: int | None
    cause: str


class IntegrityViolation(Exception):
    """Tampering suspected: a MAC mismatch that recovery could not explain."""

    def __init__(self, event: ViolationEvent):
        super().__init__(f"{event.kind} integrity violation: {event.cause}")
        self.event = event


class ReliabilityFailure(Exception):
    """Fault pattern outside the repairable model (e.g. two dead channels)."""


class StashOverflow(ReliabilityFailure):
    """Stash exceeded its hard capacity; unreachable under pressure relief."""


def verify_meta(cipher, address: int, stored: bytes, parent_mac: int,
                initial_stored: bytes | None) -> bool:
    if parent_mac == 0:
        return initial_stored is not None and stored == initial_stored
    return cipher.mac_meta(address, stored) == parent_mac


def verify_data(cipher, slot_tag: int, enc_ctr: int, payload: bytes,
                ecc: bytes, expected_shard: int) -> bool:
    mac, shard = unpack_ecc_area(ecc)
    if shard != expected_shard:
        return False
    return cipher.mac_data(slot_tag, enc_ctr, payload, shard) == mac
