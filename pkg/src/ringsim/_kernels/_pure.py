"""Pure-Python kernel lane, backed by hashlib's BLAKE2b."""

from __future__ import annotations

import hashlib
from typing import Sequence

BACKEND = "pure"


def prf_tag(key: bytes, msg: bytes) -> int:
    """64-bit keyed-PRF tag of ``msg`` (little-endian digest word)."""
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8, key=key).digest(), "little")


def prf_block(key: bytes, msg: bytes) -> bytes:
    """64-byte keyed-PRF output, used as a one-time pad."""
    return hashlib.blake2b(msg, digest_size=64, key=key).digest()


def xor_pad(key: bytes, msg: bytes, payload: bytes) -> bytes:
    """XOR ``payload`` (at most 64 bytes) with the pad derived from ``msg``."""
    pad = hashlib.blake2b(msg, digest_size=64, key=key).digest()
    n = len(payload)
    x = int.from_bytes(payload, "big") ^ int.from_bytes(pad[:n], "big")
    return x.to_bytes(n, "big")


MASK54 = (1 << 54) - 1


def seal_slot(key: bytes, pad_msg: bytes, mac_head: bytes, plaintext: bytes,
              partial: int) -> bytes:
    """Encrypt one 64-byte slot payload and attach its ECC area.

    The ECC area packs the 10-bit counter shard above the 54-bit tag.
    """
    pad = hashlib.blake2b(pad_msg, digest_size=64, key=key).digest()
    cipher = (int.from_bytes(plaintext, "big") ^ int.from_bytes(pad, "big")).to_bytes(64, "big")
    tag = int.from_bytes(hashlib.blake2b(mac_head + cipher, digest_size=8, key=key).digest(),
                         "little") & MASK54
    return cipher + ((partial << 54) | tag).to_bytes(8, "big")


def check_slot(key: bytes, mac_head: bytes, block: bytes, partial: int) -> bool:
    """Verify a stored slot block against its expected counter shard."""
    ecc = int.from_bytes(block[64:72], "big")
    if ecc >> 54 != partial:
        return False
    tag = int.from_bytes(hashlib.blake2b(mac_head + block[:64], digest_size=8, key=key).digest(),
                         "little") & MASK54
    return tag == (ecc & MASK54)


def pack_fields(widths: Sequence[int], values: Sequence[int], nbytes: int) -> bytes:
    """Pack ``values`` into ``nbytes`` bytes, MSB-first, per the width list.

    Values are masked to their declared widths; trailing bits are zero.
    """
    acc = 0
    used = 0
    for w, v in zip(widths, values):
        acc = (acc << w) | (v & ((1 << w) - 1))
        used += w
    acc <<= nbytes * 8 - used
    return acc.to_bytes(nbytes, "big")


def unpack_fields(widths: Sequence[int], data: bytes) -> list[int]:
    """Inverse of :func:`pack_fields`; returns one int per width."""
    acc = int.from_bytes(data, "big")
    nbits = len(data) * 8
    out = []
    pos = 0
    for w in widths:
        pos += w
        out.append((acc >> (nbits - pos)) & ((1 << w) - 1))
    return out
