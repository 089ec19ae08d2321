"""Counter-mode encryption, 54-bit MACs, and the MAC-unit contention model.

A seeded keyed PRF (BLAKE2b via the kernel layer) stands in for the
AES-GCM hardware: pads and tags are deterministic functions of the key and
the inputs, which makes every simulation replayable. The construction is
isolated here so a real block cipher could be substituted.

Canonical MAC addresses are stable across physical remapping:

* bucket metadata block:   ``bucket_id * 13``
* bucket data slot ``s``:  ``bucket_id * 13 + 1 + s``
* flag-tree node ``n``:    ``NODE_TAG_BASE + n``
"""

from __future__ import annotations

from . import _kernels as kernels
from .codec import MAC_MASK

MAC_LATENCY = 80
NODE_TAG_BASE = 1 << 40

META_SLOT_TAG = 15  # pad-domain slot tag for the metadata block's own span

_DOM_PAD = b"\x01"
_DOM_DATA_MAC = b"\x02"
_DOM_META_MAC = b"\x03"


def derive_key(seed: int) -> bytes:
    """32-byte simulation key from an integer seed."""
    return kernels.prf_block(b"", b"ringsim-key" + seed.to_bytes(8, "little"))[:32]


class CipherSuite:
    """All keyed operations of one simulator instance."""

    def __init__(self, key: bytes):
        if len(key) > 64:
            raise ValueError("key longer than 64 bytes")
        self.key = key

    # -- encryption -------------------------------------------------------

    def _pad_msg(self, bucket_id: int, enc_ctr: int, slot: int) -> bytes:
        return (
            _DOM_PAD
            + bucket_id.to_bytes(8, "little")
            + enc_ctr.to_bytes(8, "little")
            + bytes([slot])
        )

    def crypt_payload(self, bucket_id: int, enc_ctr: int, slot: int, payload: bytes) -> bytes:
        """Involutive counter-mode transform of a 64-byte slot payload."""
        return kernels.xor_pad(self.key, self._pad_msg(bucket_id, enc_ctr, slot), payload)

    def crypt_meta_spans(self, bucket_id: int, enc_ctr: int, block: bytes,
                         spans) -> bytes:
        """XOR one pad stream over the sensitive bit spans of a metadata block.

        The encrypted fields are not byte-aligned, so the pad is consumed
        bit-wise across the given ``(offset, length)`` spans in order.
        """
        pad = kernels.prf_block(self.key, self._pad_msg(bucket_id, enc_ctr, META_SLOT_TAG))
        pad_int = int.from_bytes(pad, "big")
        pad_bits = len(pad) * 8
        nbits = len(block) * 8
        x = int.from_bytes(block, "big")
        used = 0
        for bit_off, bit_len in spans:
            seg = (pad_int >> (pad_bits - used - bit_len)) & ((1 << bit_len) - 1)
            x ^= seg << (nbits - bit_off - bit_len)
            used += bit_len
        return x.to_bytes(len(block), "big")

    # -- authentication ---------------------------------------------------

    def _data_mac_head(self, address: int, enc_ctr: int, partial_ctr: int) -> bytes:
        return (
            _DOM_DATA_MAC
            + address.to_bytes(8, "little")
            + enc_ctr.to_bytes(8, "little")
            + partial_ctr.to_bytes(2, "little")
        )

    def mac_data(self, address: int, enc_ctr: int, ciphertext: bytes, partial_ctr: int) -> int:
        """54-bit tag over a data slot: address, counter, shard, ciphertext."""
        msg = self._data_mac_head(address, enc_ctr, partial_ctr) + ciphertext
        return kernels.prf_tag(self.key, msg) & MAC_MASK

    def seal_slot(self, bucket_id: int, enc_ctr: int, slot: int, address: int,
                  partial_ctr: int, plaintext: bytes) -> bytes:
        """Fused encrypt+tag+pack of one 72-byte slot block."""
        return kernels.seal_slot(
            self.key,
            self._pad_msg(bucket_id, enc_ctr, slot),
            self._data_mac_head(address, enc_ctr, partial_ctr),
            plaintext,
            partial_ctr,
        )

    def check_slot(self, enc_ctr: int, address: int, partial_ctr: int, block: bytes) -> bool:
        """Fused verification of one stored 72-byte slot block."""
        return kernels.check_slot(
            self.key,
            self._data_mac_head(address, enc_ctr, partial_ctr),
            block,
            partial_ctr,
        )

    def mac_meta(self, address: int, block: bytes) -> int:
        """54-bit tag over a full 576-bit metadata or flag-node block."""
        msg = _DOM_META_MAC + address.to_bytes(8, "little") + block
        return kernels.prf_tag(self.key, msg) & MAC_MASK

    def mac_node(self, node_uid: int, block: bytes) -> int:
        return self.mac_meta(NODE_TAG_BASE + node_uid, block)


class MacUnitPool:
    """Fixed pool of MAC units, each busy for ``latency`` cycles per tag.

    ``submit`` models one tag computation entering the pool at cycle ``now``
    and returns its completion cycle; the earliest-free unit is used.
    """

    def __init__(self, units: int = 4, latency: int = MAC_LATENCY):
        if units < 1:
            raise ValueError("need at least one MAC unit")
        self.latency = latency
        self._free_at = [0] * units
        self.submissions = 0
        self.total_wait = 0

    def submit(self, now: int) -> int:
        free = self._free_at
        best = 0
        t = free[0]
        for i in range(1, len(free)):
            if free[i] < t:
                best, t = i, free[i]
        start = now if now >= t else t
        done = start + self.latency
        free[best] = done
        self.submissions += 1
        self.total_wait += start - now
        return done

    def reset(self) -> None:
        self._free_at = [0] * len(self._free_at)
        self.submissions = 0
        self.total_wait = 0


def xor_payload(a: bytes, b: bytes) -> bytes:
    """Plain XOR of two equal-length payloads."""
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")
