"""Replica planning, counter shards, and the three recovery cases."""

import random

import pytest

from ringsim import codec, replication
from ringsim.codec import BucketMetadata, EcpEntry
from ringsim.replication import (
    ReplicaPlan,
    forbidden_meta_replica_slots,
    join_counter,
    locate_replica,
    plan_replicas,
    shard_index,
    slot_roles,
    split_counter,
)
from tests.conftest import make_controller, run_mixed

# Slot channels when the metadata block sits on channel 1 (odd bucket base):
# slot s lives on channel s % 2.
CH_META1 = tuple((1 + 1 + s) % 2 for s in range(12))


def test_plan_metadata_replica_goes_opposite_first_free():
    """Metadata on channel 1: its replica fills the first channel-0 dummy."""
    plan = plan_replicas(1, [], CH_META1)
    assert CH_META1[plan.meta_slot] == 0
    assert plan.meta_slot == 0  # leftmost channel-0 slot
    assert plan.real_slots == ()


def test_plan_real_replicas_follow_entry_order():
    # block A in slot 0 (channel 0) -> replica in first channel-1 dummy.
    plan = plan_replicas(1, [0], CH_META1)
    assert plan.meta_slot == 2  # slot 0 is taken by the real block
    assert CH_META1[plan.real_slots[0]] == 1
    assert plan.real_slots[0] == 1


def test_plan_five_reals_fill_in_sequence():
    reals = [0, 1, 2, 3, 4]
    plan = plan_replicas(1, reals, CH_META1)
    taken = set(reals) | plan.all_slots()
    assert len(taken) == 11  # 5 reals + 5 replicas + metadata replica
    for rs, rep in zip(reals, plan.real_slots):
        assert CH_META1[rs] != CH_META1[rep]
    assert CH_META1[plan.meta_slot] == 0


def test_plan_respects_forbidden_slots():
    plan = plan_replicas(1, [], CH_META1, forbidden_meta_slots={0, 2})
    assert plan.meta_slot == 4


def test_plan_infeasible_when_all_opposite_slots_forbidden():
    assert plan_replicas(1, [], CH_META1, forbidden_meta_slots={0, 2, 4, 6, 8, 10}) is None


def test_locate_reproduces_plan_over_random_permutations():
    rng = random.Random(1)
    for _ in range(20000):
        n = rng.randrange(6)
        perm = rng.sample(range(12), 12)
        reals = perm[:n]
        meta_ch = rng.randrange(2)
        channels = tuple((meta_ch + 1 + s) % 2 for s in range(12))
        plan = plan_replicas(meta_ch, reals, channels)
        assert plan is not None
        meta = BucketMetadata(
            addresses=[i if i < n else codec.ADDR_NONE for i in range(5)],
            real_offsets=[reals[i] if i < n else 0 for i in range(5)],
            replica_meta_offset=plan.meta_slot,
        )
        assert locate_replica(meta, meta_ch, channels) == plan


def test_forbidden_slots_derived_from_repair_entries():
    ecps = [EcpEntry(0, 0, False) for _ in range(5)]
    ecps[0] = EcpEntry((1 + 3) * 576 + 10, 1, True)    # slot 3, entry span
    ecps[1] = EcpEntry((1 + 5) * 576 + 520, 0, True)   # slot 5, ECC area
    ecps[2] = EcpEntry((1 + 7) * 576 + 200, 0, True)   # slot 7, body: allowed
    ecps[3] = EcpEntry(100, 1, True)                   # metadata block itself
    assert forbidden_meta_replica_slots(ecps) == {3, 5}


def test_roles_cover_all_slots():
    plan = ReplicaPlan(2, (1, 3))
    meta = BucketMetadata(
        addresses=[7, 9, codec.ADDR_NONE, codec.ADDR_NONE, codec.ADDR_NONE],
        real_offsets=[0, 4, 0, 0, 0],
    )
    roles = slot_roles(meta, plan)
    assert roles[0] == ("real", 0) and roles[4] == ("real", 1)
    assert roles[2] == ("meta_replica", 0)
    assert roles[1] == ("real_replica", 0) and roles[3] == ("real_replica", 1)
    assert all(roles[s] == ("dummy", 0) for s in (5, 6, 7, 8, 9, 10, 11))


def test_split_join_counter():
    assert join_counter(split_counter(0)) == 0
    rng = random.Random(2)
    for _ in range(1000):
        x = rng.randrange(1 << 60)
        assert join_counter(split_counter(x)) == x
    with pytest.raises(ValueError):
        join_counter([0] * 5)


def test_shard_index_ranks_within_channel():
    assert [shard_index(s, CH_META1) for s in range(12)] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5]


def test_counter_survives_either_channel():
    """Kill one channel; the other channel's shards rebuild the counter."""
    ctr = 0xABCDEF0123456
    shards = split_counter(ctr)
    for ch in (0, 1):
        surviving = [s for s in range(12) if CH_META1[s] != ch]
        got = [0] * 6
        for s in surviving:
            got[shard_index(s, CH_META1)] = shards[shard_index(s, CH_META1)]
        assert join_counter(got) == ctr


# ---------------------------------------------------------------------------
# recovery cases against a live controller
# ---------------------------------------------------------------------------


def _find_tree_copy(ctrl, addr):
    leaf = ctrl.posmap[addr]
    for d, bucket in ctrl.path_buckets(leaf):
        meta = ctrl.decode_meta_stored(bucket, ctrl.dram.peek(ctrl.bucket_block(bucket, 0)))
        slot = meta.slot_of(addr)
        if slot is not None:
            return bucket, slot, meta
    return None


def _flip(ctrl, idx, bit=11):
    blk = bytearray(ctrl.dram.peek(idx))
    blk[bit >> 3] ^= 0x80 >> (bit & 7)
    ctrl.dram.write_block(idx, bytes(blk))


def test_case1_randomized_single_slot_corruptions():
    """Random single-slot corruptions across random buckets: 100% recovery."""
    ctrl = make_controller("rimr", levels=9, cached=3, seed=21)
    shadow = run_mixed(ctrl, 500, 96, 21)
    rng = random.Random(22)
    recovered = 0
    for _ in range(200):
        bucket = rng.choice(sorted(ctrl.written))
        slot = rng.randrange(12)
        _flip(ctrl, ctrl.bucket_block(bucket, 1 + slot), rng.randrange(576))
        shadow = run_mixed(ctrl, 3, 96, rng.randrange(1 << 30), shadow)
        recovered += 1
    assert ctrl.stats.alarms == 0
    assert ctrl.stats.recoveries["case1"] >= 1
    # final sweep: everything still reads back correctly
    for a, v in shadow.items():
        assert ctrl.access(a, "read") == v


def test_case1_replica_corruption_rebuilds_replica():
    ctrl = make_controller("rimr", levels=9, cached=3, seed=23)
    shadow = run_mixed(ctrl, 400, 64, 23)
    # find a written bucket and corrupt its metadata-replica slot
    for bucket in sorted(ctrl.written):
        meta = ctrl.decode_meta_stored(bucket, ctrl.dram.peek(ctrl.bucket_block(bucket, 0)))
        slot = meta.replica_meta_offset
        idx = ctrl.bucket_block(bucket, 1 + slot)
        before = ctrl.dram.peek(idx)
        _flip(ctrl, idx)
        plan = locate_replica(meta, ctrl.meta_channel(bucket), ctrl.slot_channels(bucket))
        if plan is None or plan.meta_slot != slot:
            continue
        corrected = replication.recover_data_slot(ctrl, bucket, meta, slot)
        assert corrected == before
        assert ctrl.dram.peek(idx) == before
        return
    pytest.fail("no written bucket found")


def test_case2_metadata_recovery_bounded_trials():
    ctrl = make_controller("rimr", levels=9, cached=3, seed=24)
    shadow = run_mixed(ctrl, 400, 64, 24)
    bucket = max(b for b in ctrl.written)
    idx = ctrl.bucket_block(bucket, 0)
    want = ctrl.dram.peek(idx)
    # corrupt both the counter field and the body
    blk = bytearray(want)
    blk[65] ^= 0xFF  # counter bits live in the ECC area
    blk[20] ^= 0x10
    ctrl.dram.write_block(idx, bytes(blk))
    trials_before = ctrl.stats.mac_trials
    stored, meta = replication.recover_metadata(ctrl, bucket, ctrl.parent_stored_mac(bucket))
    assert stored == want
    assert ctrl.dram.peek(idx) == want
    assert 1 <= ctrl.stats.mac_trials - trials_before <= 6


def test_case2_forged_candidates_never_accepted():
    """Random forged blocks never match a parent-stored tag."""
    ctrl = make_controller("rimr", levels=9, cached=3, seed=25)
    run_mixed(ctrl, 200, 64, 25)
    bucket = max(ctrl.written)
    parent_mac = ctrl.parent_stored_mac(bucket)
    assert parent_mac != 0
    rng = random.Random(26)
    tag = ctrl.meta_tag(bucket)
    hits = sum(1 for _ in range(100_000)
               if ctrl.cipher.mac_meta(tag, rng.randbytes(72)) == parent_mac)
    assert hits == 0


def test_recovery_fetch_set_is_failure_position_independent():
    """Over-fetch obliviousness: fetched set depends only on the channel."""
    ctrl = make_controller("rimr", levels=9, cached=3, seed=27)
    run_mixed(ctrl, 300, 64, 27)
    bucket = max(ctrl.written)
    sets = {}
    for slot in range(12):
        got = replication.fetch_opposite_channel(
            ctrl, bucket, ctrl.bucket_block(bucket, 1 + slot))
        ch = ctrl.dram.channel_of(ctrl.bucket_block(bucket, 1 + slot))
        sets.setdefault(ch, set(got)).intersection_update(got)
        assert set(got) == sets[ch]
    for ch, rels in sets.items():
        assert len(rels) in (6, 7)  # all other-channel blocks of 13


def test_recovery_is_idempotent():
    ctrl = make_controller("rimr", levels=9, cached=3, seed=28)
    run_mixed(ctrl, 300, 64, 28)
    bucket = max(ctrl.written)
    meta = ctrl.decode_meta_stored(bucket, ctrl.dram.peek(ctrl.bucket_block(bucket, 0)))
    idx = ctrl.bucket_block(bucket, 1 + 2)
    _flip(ctrl, idx)
    once = replication.recover_data_slot(ctrl, bucket, meta, 2)
    twice = replication.recover_data_slot(ctrl, bucket, meta, 2)
    assert once == twice == ctrl.dram.peek(idx)


def test_channel_disjointness_full_scan():
    """After arbitrary traffic, no original/replica pair shares a channel."""
    ctrl = make_controller("rimr", levels=9, cached=3, seed=29)
    run_mixed(ctrl, 800, 96, 29)
    for bucket in sorted(ctrl.written):
        meta = ctrl.decode_meta_stored(bucket, ctrl.dram.peek(ctrl.bucket_block(bucket, 0)))
        channels = ctrl.slot_channels(bucket)
        plan = locate_replica(meta, ctrl.meta_channel(bucket), channels)
        assert plan is not None
        assert channels[plan.meta_slot] != ctrl.meta_channel(bucket)
        n = meta.real_count()
        for i in range(n):
            assert channels[meta.real_offsets[i]] != channels[plan.real_slots[i]]


def test_case3_byte_exact_rebuild_vs_shadow():
    """Kill a channel mid-run; rebuilt state equals a fault-free twin."""
    for channel in (0, 1):
        a = make_controller("rimr", levels=9, cached=3, seed=30)
        b = make_controller("rimr", levels=9, cached=3, seed=30)
        sh_a = run_mixed(a, 400, 64, 31)
        sh_b = run_mixed(b, 400, 64, 31)
        a.dram.fail_channel(channel)
        sh_a = run_mixed(a, 50, 64, 32, sh_a)
        sh_b = run_mixed(b, 50, 64, 32, sh_b)
        assert a.stats.recoveries["case3"] == 1
        assert b.stats.recoveries["case3"] == 0
        assert sh_a == sh_b
        assert a.dram._store == b.dram._store
        assert a.posmap == b.posmap and a.stash == b.stash


def test_two_channel_failure_is_unrecoverable():
    from ringsim.integrity import ReliabilityFailure
    ctrl = make_controller("rimr", levels=9, cached=3, seed=33)
    run_mixed(ctrl, 100, 32, 33)
    ctrl.dram.fail_channel(0)
    ctrl.dram.fail_channel(1)
    with pytest.raises(ReliabilityFailure):
        run_mixed(ctrl, 50, 32, 34)


def test_classification_campaign_labels_match():
    """500 injected transients + 500 permanents, all classified correctly."""
    ctrl = make_controller("rimr", levels=9, cached=3, seed=60)
    run_mixed(ctrl, 400, 64, 60)
    rng = random.Random(61)
    want = {"transient": 0, "permanent": 0}
    injected = 0
    while injected < 1000:
        kind = "transient" if injected % 2 == 0 else "permanent"
        bucket = rng.choice(sorted(ctrl.written))
        idx = ctrl.bucket_block(bucket, 0)  # metadata: read on every path hit
        bit = rng.randrange(96, 500)        # body bits, away from repair fields
        if any(b == bit for b, _ in ctrl.dram.stuck_bits(idx)):
            continue  # the repair layer legitimately masks covered cells
        if kind == "transient":
            from ringsim.dram import FaultRecord, map_address
            coords = map_address(idx, ctrl.dram.geometry)
            ctrl.dram.inject_fault(FaultRecord("transient", "bit", (*coords, bit)))
        else:
            if len(ctrl.dram.stuck_bits(idx)) >= 4:
                continue
            cur = (ctrl.dram.peek(idx)[bit >> 3] >> (7 - (bit & 7))) & 1
            ctrl.dram.add_stuck_bit(idx, bit, 1 - cur)
        want[kind] += 1
        injected += 1
        # touch a path through the bucket so the fault is read immediately
        level = ctrl.bucket_level(bucket)
        leaf_under = (bucket - ((1 << level) - 1)) << (ctrl.cfg.tree_levels - 1 - level)
        ctrl._guarded(ctrl._read_path_op, leaf_under, None, "campaign", injected)
        ctrl._run_pending_reshuffles()
    assert ctrl.stats.classified == want
    assert ctrl.stats.alarms == 0
