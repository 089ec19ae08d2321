"""DRAM model: address mapping, fault semantics, determinism."""

import random

import pytest

from ringsim.dram import (
    Coords,
    DramGeometry,
    DramModel,
    FaultRecord,
    linear_index,
    map_address,
    parse_fault_schedule,
)
from tests.conftest import TOY_GEOMETRY


def test_origin_maps_to_zero():
    assert map_address(0, TOY_GEOMETRY) == Coords(0, 0, 0, 0, 0, 0)


def test_consecutive_blocks_alternate_channels():
    for i in range(63):
        assert map_address(i, TOY_GEOMETRY).channel == i % 2


def test_mapping_is_bijective_with_even_channel_split():
    seen = set()
    per_channel = {0: 0, 1: 0}
    for i in range(64):
        c = map_address(i, TOY_GEOMETRY)
        assert c not in seen
        seen.add(c)
        per_channel[c.channel] += 1
        assert linear_index(c, TOY_GEOMETRY) == i
    assert per_channel == {0: 32, 1: 32}


def test_bucket_slots_split_evenly_across_channels():
    # 12 consecutive data-slot indices -> six per channel.
    for base in (1, 14, 27):
        channels = [map_address(base + s, TOY_GEOMETRY).channel for s in range(12)]
        assert channels.count(0) == 6 and channels.count(1) == 6


def test_capacity_error():
    with pytest.raises(ValueError):
        map_address(64, TOY_GEOMETRY)


def test_for_blocks_round_up():
    g = DramGeometry.for_blocks(1000)
    assert g.capacity_blocks >= 1000
    assert DramGeometry.for_blocks(1).capacity_blocks >= 1


def test_write_read_roundtrip(toy_dram):
    rng = random.Random(1)
    blocks = {i: rng.randbytes(72) for i in range(0, 64, 3)}
    for i, b in blocks.items():
        toy_dram.write_block(i, b)
    for i, b in blocks.items():
        assert toy_dram.read_block(i) == b
    assert toy_dram.read_block(1) == bytes(72)  # unwritten reads as zeros


def test_stuck_at_overrides_writes(toy_dram):
    toy_dram.add_stuck_bit(5, 7, 1)
    toy_dram.write_block(5, bytes(72))
    got = toy_dram.read_block(5)
    assert (got[0] >> 0) & 1 == 1  # bit 7 is the LSB of byte 0
    toy_dram.write_block(5, b"\xff" * 72)
    toy_dram.add_stuck_bit(5, 8, 0)
    got = toy_dram.read_block(5)
    assert (got[1] >> 7) & 1 == 0


def test_random_faulted_traffic_matches_shadow_model():
    """1000 write/read pairs under 10 random permanent faults."""
    model = DramModel(TOY_GEOMETRY, seed=3)
    rng = random.Random(3)
    stuck = {}
    for _ in range(10):
        blk, bit, val = rng.randrange(64), rng.randrange(576), rng.randrange(2)
        model.add_stuck_bit(blk, bit, val)
        stuck.setdefault(blk, []).append((bit, val))

    def shadow_apply(blk, data):
        x = bytearray(data)
        for bit, val in stuck.get(blk, ()):
            if val:
                x[bit >> 3] |= 0x80 >> (bit & 7)
            else:
                x[bit >> 3] &= ~(0x80 >> (bit & 7)) & 0xFF
        return bytes(x)

    for _ in range(1000):
        blk = rng.randrange(64)
        data = rng.randbytes(72)
        model.write_block(blk, data)
        assert model.read_block(blk) == shadow_apply(blk, data)


def test_transient_fault_is_one_shot(toy_dram):
    toy_dram.write_block(9, bytes(72))
    coords = map_address(9, TOY_GEOMETRY)
    toy_dram.inject_fault(FaultRecord("transient", "bit", (*coords, 100)))
    first = toy_dram.read_block(9)
    assert first != bytes(72)
    assert toy_dram.read_block(9) == bytes(72)  # overwritten by correct data


def test_word_fault_spans_64_bits(toy_dram):
    toy_dram.write_block(2, bytes(72))
    coords = map_address(2, TOY_GEOMETRY)
    toy_dram.inject_fault(FaultRecord("permanent", "word", (*coords, 3), stuck_value=1))
    got = toy_dram.read_block(2)
    assert got[24:32] == b"\xff" * 8
    assert got[:24] == bytes(24) and got[32:] == bytes(40)


def test_region_fault_hits_only_matching_blocks(toy_dram):
    rng = random.Random(4)
    content = {i: rng.randbytes(72) for i in range(64)}
    for i, b in content.items():
        toy_dram.write_block(i, b)
    target = map_address(10, TOY_GEOMETRY)
    toy_dram.inject_fault(FaultRecord("permanent", "row", target[:5]))
    for i in range(64):
        c = map_address(i, TOY_GEOMETRY)
        in_region = c[:5] == target[:5]
        assert (toy_dram.read_block(i) != content[i]) == in_region


def test_failed_channel_reads_garbage_and_replacement_restores():
    model = DramModel(TOY_GEOMETRY, seed=5)
    rng = random.Random(5)
    content = {i: rng.randbytes(72) for i in range(64)}
    for i, b in content.items():
        model.write_block(i, b)
    model.fail_channel(0)
    model.fail_channel(0)  # idempotent
    for i in range(64):
        if i % 2 == 0:
            assert model.channel_failed(i)
            assert model.read_block(i) != content[i]
        else:
            assert not model.channel_failed(i)
            assert model.read_block(i) == content[i]
    model.replace_channel(0)
    for i in range(0, 64, 2):
        model.write_block(i, content[i])
    for i in range(64):
        assert model.read_block(i) == content[i]


def test_garbage_is_not_zeros_and_is_deterministic():
    a = DramModel(TOY_GEOMETRY, seed=6)
    b = DramModel(TOY_GEOMETRY, seed=6)
    a.fail_channel(1)
    b.fail_channel(1)
    ga, gb = a.read_block(1), b.read_block(1)
    assert ga == gb
    assert ga != bytes(72)
    assert DramModel(TOY_GEOMETRY, seed=7).fail_channel(1) or True
    c = DramModel(TOY_GEOMETRY, seed=7)
    c.fail_channel(1)
    assert c.read_block(1) != ga  # seed-dependent


def test_sample_zero_rate():
    model = DramModel(TOY_GEOMETRY, seed=8)
    assert model.sample_permanent_faults(0.0, seed=1) == 0


def test_sample_rate_matches_binomial():
    """1e-4 over ~7.6e6 bits lands within 3 sigma of the mean 760."""
    geom = DramGeometry.for_blocks(13200)  # 13200 * 576 = 7_603_200 bits
    model = DramModel(geom, seed=9)
    nbits = 13200 * 576
    count = model.sample_permanent_faults(1e-4, seed=42, start_block=0, n_blocks=13200)
    mean = nbits * 1e-4
    sigma = (nbits * 1e-4 * (1 - 1e-4)) ** 0.5
    assert abs(count - mean) <= 3 * sigma
    # determinism: same seed, same placement
    m2 = DramModel(geom, seed=9)
    m2.sample_permanent_faults(1e-4, seed=42, start_block=0, n_blocks=13200)
    assert m2._stuck == model._stuck


def test_fault_schedule_parsing():
    text = """
    # schedule
    10 transient bit 0 0 1 1 2 1 100
    5 permanent channel 1
    7 permanent word 1 0 0 1 3 0 2 0
    """
    recs = parse_fault_schedule(text)
    assert [r.tick for r in recs] == [5, 7, 10]
    assert recs[0].granularity == "channel" and recs[0].coords == (1,)
    assert recs[1].stuck_value == 0
    with pytest.raises(ValueError, match="line 1"):
        parse_fault_schedule("bogus line")
    with pytest.raises(ValueError, match="line 1"):
        parse_fault_schedule("1 permanent bit 0 0")


def test_deterministic_replay_with_schedule():
    runs = []
    for _ in range(2):
        model = DramModel(TOY_GEOMETRY, seed=11)
        rng = random.Random(11)
        for rec in parse_fault_schedule("0 permanent bit 0 0 0 0 0 1 17 1\n0 transient row 1 0 1 1 2"):
            model.inject_fault(rec)
        out = []
        for _ in range(200):
            blk = rng.randrange(64)
            if rng.random() < 0.5:
                model.write_block(blk, rng.randbytes(72))
            out.append(model.read_block(blk))
        runs.append(out)
    assert runs[0] == runs[1]
