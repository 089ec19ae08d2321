"""Repair-pointer laws: rotation, front-repair rule, fault campaigns."""

import random

import pytest

from ringsim import ecp
from ringsim.ecp import (
    BUCKET_ECP_LAYOUT,
    LEAF_ECP_LAYOUT,
    NONLEAF_ECP_LAYOUT,
    RemapTable,
    apply_entries,
    decode_entries,
    encode_entry_fields,
    entries_from_assignment,
    finalize_values,
    solve,
)
from ringsim.codec import BLOCK_BITS, EcpEntry

LAYOUTS = [NONLEAF_ECP_LAYOUT, LEAF_ECP_LAYOUT]


def test_apply_empty_set_is_identity():
    raw = random.Random(0).randbytes(72)
    assert apply_entries(raw, [EcpEntry() for _ in range(5)], 0) == raw


def test_apply_single_repair():
    raw = bytearray(72)
    raw[100 >> 3] &= 0  # bit 100 currently 0; pretend it is stuck at 0
    out = apply_entries(bytes(raw), [EcpEntry(100, 1, True)], 0)
    assert (out[100 >> 3] >> (7 - (100 & 7))) & 1 == 1


def test_front_repair_scenario_fault_in_third_entry():
    """A fault inside the third entry's field is repaired by the first."""
    lay = BUCKET_ECP_LAYOUT
    fault = lay.field_span(2)[0] + 3  # inside physical slot 2
    r, assign = solve({fault}, lay, cur_roffset=0)
    assert r == 0
    assert assign[0] == fault and assign[1:] == [None] * 4


def test_rotation_when_first_entry_hit():
    """A fault in the first entry's field forces a left rotation."""
    lay = BUCKET_ECP_LAYOUT
    fault = lay.field_span(0)[0] + 5
    r, assign = solve({fault}, lay, cur_roffset=0)
    assert r == 1  # rotated left one entry
    # under the new rotation the faulty cells belong to logical entry 1
    assert assign[0] == fault


def test_rotation_keeps_roffset_when_possible():
    lay = BUCKET_ECP_LAYOUT
    data_fault = lay.region_end + 40
    r, assign = solve({data_fault}, lay, cur_roffset=3)
    assert r == 3
    assert assign[0] == data_fault


def test_head_faults_are_unrepairable():
    for lay in [BUCKET_ECP_LAYOUT, *LAYOUTS]:
        assert solve({0}, lay) is None
        assert solve({lay.head_bits - 1}, lay) is None


def test_capacity_rules():
    lay = BUCKET_ECP_LAYOUT
    # one fault in each of four distinct entry fields: repairable
    faults = {lay.field_span(p)[0] + 1 for p in range(4)}
    assert solve(faults, lay) is not None
    # one fault in every entry field: no sound first entry exists
    faults = {lay.field_span(p)[0] + 1 for p in range(5)}
    assert solve(faults, lay) is None
    # three faults in one field exceed per-entry capacity
    lo, _ = lay.field_span(3)
    assert solve({lo, lo + 1, lo + 2}, lay) is None
    # more faults than entries
    faults = {lay.region_end + i for i in range(6)}
    assert solve(faults, lay) is None


def test_reserve_two_rule():
    """Two failed cells in one entry field need two earlier sound entries."""
    lay = NONLEAF_ECP_LAYOUT  # three entries
    lo, _ = lay.field_span(2)
    r, assign = solve({lo + 1, lo + 5}, lay, 0)
    # both repairs must sit logically in front of the damaged entry
    damaged_logical = (2 + r) % lay.n_entries
    for i, a in enumerate(assign):
        if a in (lo + 1, lo + 5):
            assert i < damaged_logical
    assert {assign[0], assign[1]} == {lo + 1, lo + 5}


def test_no_cycle_invariant_random():
    """Entry i repairing entry j's field implies i < j after un-rotation."""
    rng = random.Random(1)
    for lay in [BUCKET_ECP_LAYOUT, *LAYOUTS]:
        for _ in range(2000):
            k = rng.randrange(1, lay.n_entries + 1)
            faults = set()
            while len(faults) < k:
                faults.add(rng.randrange(lay.head_bits, lay.target_bits))
            solved = solve(faults, lay, rng.randrange(lay.n_entries))
            if solved is None:
                continue
            r, assign = solved
            for i, addr in enumerate(assign):
                if addr is None or not lay.region_off <= addr < lay.region_end:
                    continue
                physical = (addr - lay.region_off) // lay.entry_bits
                logical = (physical + r) % lay.n_entries
                assert i < logical, (lay.n_entries, r, assign)


def _run_repair_cycle(lay, rng, faults_with_values):
    """Encode entries for the fault set, damage a block, verify recovery."""
    solved = solve(set(faults_with_values), lay, rng.randrange(lay.n_entries))
    if solved is None:
        return None
    r, assign = solved
    entries = entries_from_assignment(assign)
    desired = bytearray(rng.randbytes(72))
    desired[0] |= 0x80  # fault flag
    encode_entry_fields(desired, r, entries, lay)
    finalize_values(entries, r, lay, desired, 0)
    stored = bytearray(desired)
    for addr, stuck in faults_with_values.items():
        if stuck is None:
            stuck = 1 - ((desired[addr >> 3] >> (7 - (addr & 7))) & 1)
        if stuck:
            stored[addr >> 3] |= 0x80 >> (addr & 7)
        else:
            stored[addr >> 3] &= ~(0x80 >> (addr & 7)) & 0xFF
    _, entries2, corrected = decode_entries(bytes(stored), lay)
    return bytes(corrected), bytes(desired)


@pytest.mark.parametrize("lay", [NONLEAF_ECP_LAYOUT, LEAF_ECP_LAYOUT, BUCKET_ECP_LAYOUT],
                         ids=["nonleaf", "leaf", "bucket"])
def test_randomized_repair_campaign(lay):
    """Any solvable fault placement is fully repaired on read."""
    rng = random.Random(2)
    span = min(lay.target_bits, BLOCK_BITS)
    repaired = 0
    for _ in range(3000):
        k = rng.randrange(1, lay.n_entries + 1)
        faults = {}
        while len(faults) < k:
            faults[rng.randrange(lay.head_bits, span)] = rng.choice([0, 1, None])
        out = _run_repair_cycle(lay, rng, faults)
        if out is None:
            continue
        corrected, desired = out
        assert corrected == desired
        repaired += 1
    assert repaired > 1500  # most placements are repairable


def test_exhaustive_small_placements_in_entry_region():
    """All 1- and 2-fault placements inside the entry region are repaired,
    plus a large sample of 3- and 4-fault placements."""
    lay = BUCKET_ECP_LAYOUT
    rng = random.Random(3)
    region = list(range(lay.region_off, lay.region_end))
    for a in region:
        out = _run_repair_cycle(lay, rng, {a: None})
        assert out is not None and out[0] == out[1]
    for _ in range(2000):
        pair = rng.sample(region, 2)
        out = _run_repair_cycle(lay, rng, {p: None for p in pair})
        assert out is not None and out[0] == out[1]
    for k in (3, 4):
        solvable = 0
        for _ in range(5000):
            picks = rng.sample(region, k)
            out = _run_repair_cycle(lay, rng, {p: None for p in picks})
            if out is not None:
                assert out[0] == out[1]
                solvable += 1
        assert solvable > 0


def test_mirrored_repair_applies_to_both_copies():
    """One entry set repairs different stuck cells in a node and its mirror."""
    lay = NONLEAF_ECP_LAYOUT
    rng = random.Random(4)
    for _ in range(2000):
        k = rng.randrange(1, 4)
        primary_faults = {rng.randrange(lay.head_bits, BLOCK_BITS): None for _ in range(k)}
        mirror_faults = {rng.randrange(lay.head_bits, BLOCK_BITS): None for _ in range(k)}
        union = dict(primary_faults)
        union.update(mirror_faults)
        if len(union) > lay.n_entries:
            continue
        solved = solve(set(union), lay, 0)
        if solved is None:
            continue
        r, assign = solved
        entries = entries_from_assignment(assign)
        desired = bytearray(rng.randbytes(72))
        encode_entry_fields(desired, r, entries, lay)
        finalize_values(entries, r, lay, desired, 0)
        for faults in (primary_faults, mirror_faults):
            stored = bytearray(desired)
            for addr in faults:
                stored[addr >> 3] ^= 0x80 >> (addr & 7)  # flip = stuck at wrong value
            _, _, corrected = decode_entries(bytes(stored), lay)
            assert bytes(corrected) == bytes(desired)


def test_remap_table():
    t = RemapTable(capacity=3)
    assert t.lookup(10) is None
    assert t.add(10) == 0
    assert t.add(11) == 1
    assert t.add(10) == 0  # idempotent
    assert t.add(12) == 2
    with pytest.raises(OverflowError):
        t.add(13)
    assert t.entries() == [(10, 0), (11, 1), (12, 2)]
    assert len(t) == 3


def test_remap_capacity_encoding_budget():
    # 1084 entries of (23-bit bucket id + 11-bit spare index) fit in 8 KB.
    assert 1084 * (23 + 11) <= 8 * 1024 * 8
