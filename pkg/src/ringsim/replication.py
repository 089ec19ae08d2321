"""Channel-level error resilience for the bucket tree.

Replicas of the metadata block and of every real block are written into
the bucket's dummy slots, always in the opposite channel from their
originals, so a whole-channel loss leaves one copy of everything. Replica
positions are never stored: they are recomputed from the metadata
(metadata replica first, then real-block replicas in stored-entry order,
each into the leftmost free opposite-channel dummy slot), so the consumer
side (``locate_replica``) and the producer side (``plan_replicas``) are
the same calculation.

The bucket's 60-bit encryption counter is additionally sharded into six
10-bit pieces per channel (one in each data slot's ECC area), so the
counter survives the loss of either channel and corrupted metadata can be
decrypted during recovery.

Recovery escalates through three cases: a single data slot (fetch all
opposite-channel blocks of the bucket, pick the counterpart), a corrupted
metadata block (rebuild the counter from shards, then try each fetched
opposite-channel block as the replica until one matches the parent-stored
MAC), and a full channel loss (recursive top-down rebuild into a
replacement DIMM).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import codec, ecp
from .codec import (
    BLOCK_BITS,
    BUCKET_SLOTS,
    DATA_BYTES,
    ENC_CTR_BITS,
    PARTIAL_CTR_COUNT,
    BucketMetadata,
)

# Spans of a replica slot that must sit on sound cells: the repair-entry
# region (the replica's own repair pointers must decode before repairs can
# apply) and the ECC area (the replica's MAC cannot vouch for itself).
_META_REPLICA_CLEAN_SPANS = ((0, ecp.BUCKET_ECP_LAYOUT.region_end), (512, BLOCK_BITS))


@dataclass(frozen=True)
class ReplicaPlan:
    meta_slot: int
    real_slots: tuple[int, ...]  # replica slot per metadata entry, entry order

    def all_slots(self) -> set[int]:
        return {self.meta_slot, *self.real_slots}


def split_counter(ctr: int) -> list[int]:
    """Six 10-bit shards; shard ``k`` holds counter bits ``[10k, 10k+10)``."""
    return [(ctr >> (10 * k)) & 0x3FF for k in range(PARTIAL_CTR_COUNT)]


def join_counter(shards: Sequence[int]) -> int:
    if len(shards) != PARTIAL_CTR_COUNT:
        raise ValueError("need exactly six shards from one channel")
    ctr = 0
    for k, s in enumerate(shards):
        ctr |= (s & 0x3FF) << (10 * k)
    return ctr & ((1 << ENC_CTR_BITS) - 1)


def shard_index(slot: int, slot_channels: Sequence[int]) -> int:
    """Rank of a slot among the slots of its channel (0..5)."""
    ch = slot_channels[slot]
    return sum(1 for s in range(slot) if slot_channels[s] == ch)


def forbidden_meta_replica_slots(ecps: Sequence[codec.EcpEntry]) -> set[int]:
    """Dummy slots whose known-failed cells would sit under the replica's
    repair-entry region or ECC area."""
    out = set()
    for e in ecps:
        if not e.used:
            continue
        block, bit = divmod(e.addr, BLOCK_BITS)
        if block == 0:
            continue
        for lo, hi in _META_REPLICA_CLEAN_SPANS:
            if lo <= bit < hi:
                out.add(block - 1)
                break
    return out


def plan_replicas(meta_channel: int, real_slots: Sequence[int],
                  slot_channels: Sequence[int],
                  forbidden_meta_slots: set[int] = frozenset()) -> ReplicaPlan | None:
    """Deterministic replica placement; ``None`` when the metadata replica
    has no sound opposite-channel dummy slot (caller re-permutes)."""
    free = [s for s in range(BUCKET_SLOTS) if s not in set(real_slots)]
    meta_slot = None
    for s in free:
        if slot_channels[s] != meta_channel and s not in forbidden_meta_slots:
            meta_slot = s
            break
    if meta_slot is None:
        return None
    free.remove(meta_slot)
    placed = []
    for rs in real_slots:
        chosen = None
        for s in free:
            if slot_channels[s] != slot_channels[rs]:
                chosen = s
                break
        if chosen is None:
            return None
        free.remove(chosen)
        placed.append(chosen)
    return ReplicaPlan(meta_slot, tuple(placed))


def locate_replica(meta: BucketMetadata, meta_channel: int,
                   slot_channels: Sequence[int]) -> ReplicaPlan | None:
    """Recompute the producer-side plan from metadata alone."""
    n = meta.real_count()
    return plan_replicas(
        meta_channel,
        meta.real_offsets[:n],
        slot_channels,
        forbidden_meta_replica_slots(meta.ecps),
    )


def slot_roles(meta: BucketMetadata, plan: ReplicaPlan) -> dict[int, tuple[str, int]]:
    """Role of each of the twelve data slots.

    Values are ``("real", entry)``, ``("real_replica", entry)``,
    ``("meta_replica", 0)``, or ``("dummy", 0)``.
    """
    roles = {s: ("dummy", 0) for s in range(BUCKET_SLOTS)}
    n = meta.real_count()
    for i in range(n):
        roles[meta.real_offsets[i]] = ("real", i)
    roles[plan.meta_slot] = ("meta_replica", 0)
    for i, s in enumerate(plan.real_slots):
        roles[s] = ("real_replica", i)
    return roles


# ---------------------------------------------------------------------------
# Recovery cases. These drive an OramController; reads and writes issued
# here are accounted in the dedicated "recovery" traffic category.
# ---------------------------------------------------------------------------


def fetch_opposite_channel(ctrl, bucket: int, failed_block_index: int) -> dict[int, bytes]:
    """Over-fetch every same-bucket block in the other channel.

    The fetch set depends only on the failed block's channel, never on
    which slot actually failed, preserving obliviousness. Keys are
    bucket-relative block numbers (0 = metadata, 1+s = slot s).
    """
    bad_ch = ctrl.dram.channel_of(failed_block_index)
    out = {}
    for rel in range(codec.BUCKET_BLOCKS):
        idx = ctrl.bucket_block(bucket, rel)
        if ctrl.dram.channel_of(idx) != bad_ch:
            out[rel] = ctrl.read_recovery(idx)
    return out


def recover_data_slot(ctrl, bucket: int, meta: BucketMetadata, slot: int) -> bytes:
    """Case 1: rebuild one data slot from its counterpart."""
    ctrl.stats.recoveries["case1"] += 1
    fetched = fetch_opposite_channel(ctrl, bucket, ctrl.bucket_block(bucket, 1 + slot))
    slot_channels = ctrl.slot_channels(bucket)
    plan = locate_replica(meta, ctrl.meta_channel(bucket), slot_channels)
    if plan is None:
        return ctrl.alarm("data", bucket, "replica plan unreconstructable")
    roles = slot_roles(meta, plan)
    role, arg = roles[slot]

    def payload_of(src_slot: int) -> bytes | None:
        raw = fetched.get(1 + src_slot)
        if raw is None:
            return None
        raw = ecp.apply_entries(raw, meta.ecps, (1 + src_slot) * BLOCK_BITS)
        payload, ecc = raw[:DATA_BYTES], raw[DATA_BYTES:]
        shard = split_counter(meta.enc_ctr)[shard_index(src_slot, slot_channels)]
        if not ctrl.verify_slot(bucket, src_slot, meta, payload, ecc, shard):
            return None
        return ctrl.cipher.crypt_payload(bucket, meta.enc_ctr, src_slot, payload)

    if role == "real":
        plain = payload_of(plan.real_slots[arg])
    elif role == "real_replica":
        plain = payload_of(meta.real_offsets[arg])
    elif role == "meta_replica":
        plain = codec.encode_replica_payload(meta)
    else:  # true dummy: content is derivable, no replica needed
        plain = codec.ZERO_DATA
    if plain is None:
        return ctrl.alarm("data", bucket, f"slot {slot} and its counterpart both corrupt")
    corrected = ctrl.build_slot_block(bucket, meta, slot, plain)
    ctrl.write_recovery(ctrl.bucket_block(bucket, 1 + slot), corrected)
    return corrected


def recover_metadata(ctrl, bucket: int, parent_mac: int) -> tuple[bytes, BucketMetadata]:
    """Case 2: rebuild the metadata block by candidate trial.

    Reconstructs the encryption counter from the surviving channel's
    shards, then tries each fetched opposite-channel block as the replica;
    the first candidate whose re-encoded primary image matches the
    parent-stored MAC wins and further MAC computing stops.
    """
    ctrl.stats.recoveries["case2"] += 1
    meta_idx = ctrl.bucket_block(bucket, 0)
    fetched = fetch_opposite_channel(ctrl, bucket, meta_idx)
    slot_channels = ctrl.slot_channels(bucket)

    shard_slots = sorted(s for s in range(BUCKET_SLOTS) if (1 + s) in fetched)
    shards = [0] * PARTIAL_CTR_COUNT
    for s in shard_slots:
        _, shard = codec.unpack_ecc_area(fetched[1 + s][DATA_BYTES:])
        shards[shard_index(s, slot_channels)] = shard
    enc_ctr = join_counter(shards)

    if parent_mac == 0:
        # Never written since boot: the initial image is the expected value.
        stored = ctrl.initial_meta_stored(bucket)
        ctrl.write_recovery(meta_idx, stored)
        return stored, ctrl.decode_meta_stored(bucket, stored)

    for s in shard_slots:
        payload = ctrl.cipher.crypt_payload(bucket, enc_ctr, s, fetched[1 + s][:DATA_BYTES])
        payload = _self_repair_replica_payload(payload, s)
        candidate = codec.decode_replica_payload(payload, enc_ctr, s)
        stored = ctrl.encode_meta_stored_verbatim(bucket, candidate)
        ctrl.stats.mac_trials += 1
        if ctrl.cipher.mac_meta(ctrl.meta_tag(bucket), stored) == parent_mac:
            ctrl.write_recovery(meta_idx, stored)
            return stored, candidate
    return ctrl.alarm("meta", bucket, "no fetched block matches the parent MAC")


def _self_repair_replica_payload(payload: bytes, slot: int) -> bytes:
    """Apply the replica's own repair entries to its decrypted payload."""
    base = (1 + slot) * BLOCK_BITS
    _, _, corrected = ecp.decode_entries(payload, ecp.BUCKET_ECP_LAYOUT, self_base=base)
    return bytes(corrected)


def recover_channel(ctrl, channel: int) -> None:
    """Case 3: rebuild a failed channel into a replacement DIMM.

    Walks the tree top-down so every metadata rebuild can rely on an
    already-recovered parent; data slots are then rebuilt from replicas,
    flag-tree nodes from their mirrors.
    """
    if len(ctrl.dram.failed_channels) > 1:
        ctrl.reliability_alarm("more than one channel failed")
    ctrl.stats.recoveries["case3"] += 1
    ctrl.dram.replace_channel(channel)
    ctrl.rebuild_flag_nodes(channel)

    for bucket in sorted(ctrl.materialized):
        if bucket not in ctrl.written:
            ctrl.rematerialize_initial(bucket)
            continue
        parent_mac = ctrl.parent_stored_mac(bucket)
        meta_idx = ctrl.bucket_block(bucket, 0)
        if ctrl.dram.channel_of(meta_idx) != channel:
            raw = ctrl.read_recovery(meta_idx)
            _, entries, corrected = ecp.decode_entries(raw, ecp.BUCKET_ECP_LAYOUT)
            stored = bytes(corrected)
            if ctrl.cipher.mac_meta(ctrl.meta_tag(bucket), stored) != parent_mac:
                stored, meta = recover_metadata(ctrl, bucket, parent_mac)
            else:
                meta = ctrl.decode_meta_stored(bucket, stored)
        else:
            stored, meta = recover_metadata(ctrl, bucket, parent_mac)

        slot_channels = ctrl.slot_channels(bucket)
        plan = locate_replica(meta, ctrl.meta_channel(bucket), slot_channels)
        if plan is None:
            ctrl.alarm("meta", bucket, "replica plan unreconstructable after rebuild")
        roles = slot_roles(meta, plan)
        ctr_shards = split_counter(meta.enc_ctr)
        for slot in range(BUCKET_SLOTS):
            idx = ctrl.bucket_block(bucket, 1 + slot)
            if ctrl.dram.channel_of(idx) != channel:
                continue
            role, arg = roles[slot]
            if role == "real":
                plain = _recovered_payload(ctrl, bucket, meta, plan.real_slots[arg], slot_channels, ctr_shards)
            elif role == "real_replica":
                plain = _recovered_payload(ctrl, bucket, meta, meta.real_offsets[arg], slot_channels, ctr_shards)
            elif role == "meta_replica":
                plain = codec.encode_replica_payload(meta)
            else:
                plain = codec.ZERO_DATA
            if plain is None:
                ctrl.alarm("data", bucket, f"slot {slot}: both copies lost")
            ctrl.write_recovery(idx, ctrl.build_slot_block(bucket, meta, slot, plain))
        ctrl.note_channel_rebuilt(bucket, stored, meta)


def _recovered_payload(ctrl, bucket, meta, src_slot, slot_channels, ctr_shards):
    raw = ctrl.read_recovery(ctrl.bucket_block(bucket, 1 + src_slot))
    raw = ecp.apply_entries(raw, meta.ecps, (1 + src_slot) * BLOCK_BITS)
    payload, ecc = raw[:DATA_BYTES], raw[DATA_BYTES:]
    shard = ctr_shards[shard_index(src_slot, slot_channels)]
    if not ctrl.verify_slot(bucket, src_slot, meta, payload, ecc, shard):
        return None
    return ctrl.cipher.crypt_payload(bucket, meta.enc_ctr, src_slot, payload)
