"""Permanent-fault repair via rotating error-correction pointers.

A repair entry stores the bit address of a permanently failed cell and the
value that cell should carry; reads apply entries front to back, so an
entry whose own storage is damaged must be repaired by entries in front of
it. The entry array can be rotated (tracked by a small rotation offset) to
keep the first entry on sound cells. The same machinery serves two
flavors:

* bucket entries live in the metadata block and address the whole
  13-block bucket (13-bit addresses, no in-use flag: address 0 means
  unused, and bit 0 of the bucket is the unrepairable fault flag anyway);
* node entries live in a flag-tree node and address the 576 bits of the
  node itself, covering faults in either the node or its mirror (both
  copies store identical bits, so one entry repairs the address in both).

``solve`` re-derives a feasible rotation and entry assignment from the
full set of confirmed faults; values are filled in against the final
stored image by ``finalize_values`` because every rewrite changes what the
failed cells ought to hold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .codec import BLOCK_BITS, BUCKET_BITS, EcpEntry


@dataclass(frozen=True)
class EcpLayout:
    n_entries: int
    entry_bits: int
    region_off: int    # bit offset of the entry array in its block
    addr_bits: int
    has_flag: bool     # explicit in-use flag bit leads the entry
    head_bits: int     # unrepairable prefix: fault flag + rotation offset
    target_bits: int   # addressable range of an entry

    @property
    def region_end(self) -> int:
        return self.region_off + self.n_entries * self.entry_bits

    def field_span(self, physical_slot: int) -> tuple[int, int]:
        lo = self.region_off + physical_slot * self.entry_bits
        return lo, lo + self.entry_bits

    def physical_slot(self, logical: int, roffset: int) -> int:
        return (logical - roffset) % self.n_entries

    def value_bit(self, physical_slot: int) -> int:
        lo, _ = self.field_span(physical_slot)
        return lo + self.entry_bits - 1


BUCKET_ECP_LAYOUT = EcpLayout(
    n_entries=5, entry_bits=14, region_off=4, addr_bits=13,
    has_flag=False, head_bits=4, target_bits=BUCKET_BITS,
)
NONLEAF_ECP_LAYOUT = EcpLayout(
    n_entries=3, entry_bits=12, region_off=3, addr_bits=10,
    has_flag=True, head_bits=3, target_bits=BLOCK_BITS,
)
LEAF_ECP_LAYOUT = EcpLayout(
    n_entries=7, entry_bits=12, region_off=4, addr_bits=10,
    has_flag=True, head_bits=4, target_bits=BLOCK_BITS,
)


def _idle_mask_bytes(layout: EcpLayout) -> tuple[int, int, list["EcpEntry"]]:
    """Precompute the all-idle fast path: covered byte count and bit mask."""
    nbytes = (layout.region_end + 7) // 8
    mask = 0
    for bit in range(1, layout.region_end):
        mask |= 1 << (nbytes * 8 - 1 - bit)
    return nbytes, mask, []


_IDLE = {
    id(BUCKET_ECP_LAYOUT): _idle_mask_bytes(BUCKET_ECP_LAYOUT),
    id(NONLEAF_ECP_LAYOUT): _idle_mask_bytes(NONLEAF_ECP_LAYOUT),
    id(LEAF_ECP_LAYOUT): _idle_mask_bytes(LEAF_ECP_LAYOUT),
}

MAX_FAULTS_PER_ENTRY = 2  # three failed cells in one entry exceed capacity


def get_bit(buf: bytes | bytearray, bit: int) -> int:
    return (buf[bit >> 3] >> (7 - (bit & 7))) & 1


def set_bit(buf: bytearray, bit: int, value: int) -> None:
    if value:
        buf[bit >> 3] |= 0x80 >> (bit & 7)
    else:
        buf[bit >> 3] &= ~(0x80 >> (bit & 7)) & 0xFF


def read_bits(buf: bytes | bytearray, off: int, width: int) -> int:
    v = 0
    for i in range(off, off + width):
        v = (v << 1) | get_bit(buf, i)
    return v


def decode_entries(raw: bytes, layout: EcpLayout,
                   self_base: int = 0) -> tuple[int, list[EcpEntry], bytes | bytearray]:
    """Decode the entry array from a raw block, applying self-repairs.

    Entries are read in logical order; each decoded repair that targets the
    decoded span itself (``self_base`` up to the buffer size — a replica
    payload sits at its slot's bucket offset) is applied before the next
    entry is read, so damage inside later entry fields is undone by the
    entries in front of it. Returns the rotation offset, the logical
    entries, and the self-corrected block.
    """
    nbytes, mask, _ = _IDLE[id(layout)]
    if int.from_bytes(raw[:nbytes], "big") & mask == 0:
        # Rotation zero and every entry idle: the common fault-free block.
        return 0, [EcpEntry() for _ in range(layout.n_entries)], raw
    buf = bytearray(raw)
    span = len(raw) * 8
    roffset = read_bits(buf, 1, layout.head_bits - 1)
    if roffset >= layout.n_entries:
        roffset %= layout.n_entries
    entries = []
    for logical in range(layout.n_entries):
        lo, _ = layout.field_span(layout.physical_slot(logical, roffset))
        if layout.has_flag:
            used = bool(get_bit(buf, lo))
            addr = read_bits(buf, lo + 1, layout.addr_bits)
        else:
            addr = read_bits(buf, lo, layout.addr_bits)
            used = addr != 0
        value = get_bit(buf, lo + layout.entry_bits - 1)
        entries.append(EcpEntry(addr, value, used))
        if used and self_base <= addr < self_base + span and addr < layout.target_bits:
            set_bit(buf, addr - self_base, value)
    return roffset, entries, buf


def encode_entry_fields(buf: bytearray, roffset: int, entries: Sequence[EcpEntry],
                        layout: EcpLayout) -> None:
    """Write the rotation offset and entry array into a block image."""
    for i in range(layout.head_bits - 1):
        set_bit(buf, 1 + i, (roffset >> (layout.head_bits - 2 - i)) & 1)
    for logical, e in enumerate(entries):
        lo, _ = layout.field_span(layout.physical_slot(logical, roffset))
        pos = lo
        if layout.has_flag:
            set_bit(buf, pos, 1 if e.used else 0)
            pos += 1
        addr = e.addr if e.used else 0
        for i in range(layout.addr_bits):
            set_bit(buf, pos + i, (addr >> (layout.addr_bits - 1 - i)) & 1)
        set_bit(buf, lo + layout.entry_bits - 1, e.value)


def apply_entries(raw: bytes, entries: Sequence[EcpEntry], base: int,
                  span: int = BLOCK_BITS) -> bytes:
    """Apply repairs that target ``[base, base+span)`` to one raw block."""
    buf = None
    for e in entries:
        if e.used and base <= e.addr < base + span:
            if buf is None:
                buf = bytearray(raw)
            set_bit(buf, e.addr - base, e.value)
    return bytes(buf) if buf is not None else raw


def solve(faults: set[int], layout: EcpLayout, cur_roffset: int = 0):
    """Find a rotation and entry assignment covering every fault.

    Entry addresses come back in logical order (``None`` for unused
    slots). Returns ``None`` when the fault set exceeds repair capacity:
    a fault in the unrepairable head, more than two faults in one entry
    field, no rotation that keeps the first entry sound, or simply more
    faults than entries.
    """
    n = layout.n_entries
    if len(faults) > n:
        return None
    if any(f < layout.head_bits for f in faults):
        return None
    if any(not layout.head_bits <= f < layout.target_bits for f in faults):
        return None
    region_faults = [f for f in faults if f < layout.region_end]
    plain_faults = sorted(f for f in faults if f >= layout.region_end)

    for step in range(n):
        r = (cur_roffset + step) % n
        per_entry: list[list[int]] = [[] for _ in range(n)]
        for f in region_faults:
            physical = (f - layout.region_off) // layout.entry_bits
            logical = (physical + r) % n
            per_entry[logical].append(f)
        if per_entry[0] or any(len(v) > MAX_FAULTS_PER_ENTRY for v in per_entry):
            continue
        assign: list[int | None] = [None] * n
        nxt = 0
        ok = True
        for k in range(1, n):
            for f in sorted(per_entry[k]):
                if nxt >= k:
                    ok = False
                    break
                assign[nxt] = f
                nxt += 1
            if not ok:
                break
        if not ok:
            continue
        if nxt + len(plain_faults) > n:
            continue
        for f in plain_faults:
            assign[nxt] = f
            nxt += 1
        return r, assign
    return None


def entries_from_assignment(assign: Sequence[int | None]) -> list[EcpEntry]:
    return [EcpEntry(a, 0, True) if a is not None else EcpEntry() for a in assign]


def finalize_values(entries: list[EcpEntry], roffset: int, layout: EcpLayout,
                    own: bytearray, own_base: int,
                    bit_lookup: Callable[[int], int] | None = None) -> None:
    """Fill entry values from the final stored image, back to front.

    ``own`` is the block that physically stores the entries (its bucket- or
    node-relative base is ``own_base``); value bits inside it are patched in
    place as they are resolved. ``bit_lookup`` resolves addresses outside
    the own block; when it is absent (or returns ``None``) the entry's
    current value is kept, which re-encodes an unchanged target correctly.
    Back-to-front order works because the front-repair rule only lets
    entries point at later entry fields.
    """
    for logical in range(len(entries) - 1, -1, -1):
        e = entries[logical]
        if not e.used:
            continue
        if own_base <= e.addr < own_base + BLOCK_BITS:
            v = get_bit(own, e.addr - own_base)
        else:
            v = bit_lookup(e.addr) if bit_lookup is not None else None
            if v is None:
                v = e.value
        e.value = v
        set_bit(own, layout.value_bit(layout.physical_slot(logical, roffset)), v)


class RemapTable:
    """On-chip table remapping worn-out buckets into the redundant area."""

    def __init__(self, capacity: int = 1084):
        self.capacity = capacity
        self._map: dict[int, int] = {}

    def lookup(self, bucket: int) -> int | None:
        return self._map.get(bucket)

    def add(self, bucket: int) -> int:
        if bucket in self._map:
            return self._map[bucket]
        if len(self._map) >= self.capacity:
            raise OverflowError("remap table full")
        slot = len(self._map)
        self._map[bucket] = slot
        return slot

    def __len__(self) -> int:
        return len(self._map)

    def entries(self) -> list[tuple[int, int]]:
        return sorted(self._map.items())
