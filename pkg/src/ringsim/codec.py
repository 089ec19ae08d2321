"""Bit-exact codecs for the 576-bit blocks used by the simulator.

A memory block is 72 bytes: a 64-byte data area plus an 8-byte area that
re-purposes the ECC chip. Three block families carry structured metadata:

* bucket metadata blocks (one per tree bucket),
* the 512-bit replica payload of a bucket metadata block, and
* flag-tree nodes (leaf and non-leaf), which hold the per-bucket valid
  bits and read counters when the flag tree is enabled.

All layouts are fixed MSB-first bit tables; ``layout_manifest`` renders
them in a stable human-readable form that is pinned by a golden test.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

from . import _kernels as kernels

BLOCK_BITS = 576
BLOCK_BYTES = 72
DATA_BITS = 512
DATA_BYTES = 64
ECC_BITS = 64
ECC_BYTES = 8

REAL_SLOTS = 5          # Z
DUMMY_SLOTS = 7         # S
BUCKET_SLOTS = 12       # Z + S data slots per bucket
BUCKET_BLOCKS = 13      # metadata block + data slots
BUCKET_BITS = BUCKET_BLOCKS * BLOCK_BITS  # 7488

BUCKET_ECPS = 5
NONLEAF_ECPS = 3
LEAF_ECPS = 7

MAC_BITS = 54
MAC_MASK = (1 << MAC_BITS) - 1
ENC_CTR_BITS = 60
PARTIAL_CTR_BITS = 10
PARTIAL_CTR_COUNT = 6

ADDR_NONE = (1 << 32) - 1  # "no real block" sentinel in an address field

ZERO_BLOCK = bytes(BLOCK_BYTES)
ZERO_DATA = bytes(DATA_BYTES)


def _layout(fields: Sequence[tuple[str, int]]) -> tuple[tuple[str, int, int], ...]:
    out = []
    off = 0
    for name, width in fields:
        out.append((name, off, width))
        off += width
    return tuple(out)


def _widths(layout: tuple[tuple[str, int, int], ...]) -> tuple[int, ...]:
    return tuple(w for _, _, w in layout)


def _bucket_ecp_fields() -> list[tuple[str, int]]:
    out = []
    for i in range(BUCKET_ECPS):
        out += [(f"ecp{i}_addr", 13), (f"ecp{i}_value", 1)]
    return out


def _node_ecp_fields(count: int) -> list[tuple[str, int]]:
    out = []
    for i in range(count):
        out += [(f"ecp{i}_used", 1), (f"ecp{i}_addr", 10), (f"ecp{i}_value", 1)]
    return out


def _vr_fields(count: int) -> list[tuple[str, int]]:
    out = []
    for i in range(count):
        out += [(f"vr{i}_valid", 12), (f"vr{i}_ctr", 3)]
    return out


def _slot_fields() -> list[tuple[str, int]]:
    out = []
    for i in range(REAL_SLOTS):
        out += [(f"addr{i}", 32)]
    for i in range(REAL_SLOTS):
        out += [(f"label{i}", 30)]
    for i in range(REAL_SLOTS):
        out += [(f"offset{i}", 4)]
    return out


# Bucket metadata block. The fault fields lead so that they sit at the same
# bit offsets in the metadata block and in its 512-bit replica payload (the
# replica's repair entries must be decodable from cells known to be sound),
# and the child MACs close out the data area so that the re-purposed ECC
# area holds exactly the replica offset plus the encryption counter. No
# field straddles the 512-bit boundary.
BUCKET_META_LAYOUT = _layout(
    [("fbit", 1), ("roffset", 3)]
    + _bucket_ecp_fields()
    + _slot_fields()
    + [
        ("child_mac0", MAC_BITS),
        ("child_mac1", MAC_BITS),
        ("replica_meta_offset", 4),
        ("enc_ctr", ENC_CTR_BITS),
    ]
)

# Replica payload: the metadata block minus its own slot offset and the
# encryption counter, which brings it to exactly 512 bits. Field offsets
# match the primary layout throughout.
REPLICA_META_LAYOUT = _layout(
    [("fbit", 1), ("roffset", 3)]
    + _bucket_ecp_fields()
    + _slot_fields()
    + [("child_mac0", MAC_BITS), ("child_mac1", MAC_BITS)]
)

# Variant used by schemes without the separated flag tree: the valid bits
# and read counter ride inline in the metadata block, and there is no
# fault-repair state. The counter again lives in the ECC area.
BUCKET_META_INLINE_LAYOUT = _layout(
    [("vr_valid", 12), ("vr_ctr", 3)]
    + _slot_fields()
    + [
        ("child_mac0", MAC_BITS),
        ("child_mac1", MAC_BITS),
        ("pad", 59),
        ("enc_ctr", ENC_CTR_BITS),
        ("pad2", 4),
    ]
)

NONLEAF_NODE_LAYOUT = _layout(
    [("fbit", 1), ("roffset", 2)]
    + _node_ecp_fields(NONLEAF_ECPS)
    + _vr_fields(7)
    + [(f"child_mac{i}", MAC_BITS) for i in range(8)]
)

ECC_AREA_LAYOUT = _layout([("partial_ctr", PARTIAL_CTR_BITS), ("mac", MAC_BITS)])

_BUCKET_META_WIDTHS = _widths(BUCKET_META_LAYOUT)
_REPLICA_META_WIDTHS = _widths(REPLICA_META_LAYOUT)
_BUCKET_INLINE_WIDTHS = _widths(BUCKET_META_INLINE_LAYOUT)
_NONLEAF_WIDTHS = _widths(NONLEAF_NODE_LAYOUT)
_ECC_WIDTHS = _widths(ECC_AREA_LAYOUT)

assert sum(_BUCKET_META_WIDTHS) == BLOCK_BITS
assert sum(_REPLICA_META_WIDTHS) == DATA_BITS
assert sum(_BUCKET_INLINE_WIDTHS) == BLOCK_BITS
assert sum(_NONLEAF_WIDTHS) == BLOCK_BITS
assert sum(_ECC_WIDTHS) == ECC_BITS

_LEAF_LAYOUTS: dict[int, tuple[tuple[str, int, int], ...]] = {}


def leaf_node_layout(tree_node_levels: int) -> tuple[tuple[str, int, int], ...]:
    """Leaf-node layout; the ancestor-offset count depends on tree height."""
    layout = _LEAF_LAYOUTS.get(tree_node_levels)
    if layout is None:
        fields = (
            [("fbit", 1), ("roffset", 3)]
            + _node_ecp_fields(LEAF_ECPS)
            + _vr_fields(31)
            + [(f"anc_offset{i}", 3) for i in range(tree_node_levels - 1)]
        )
        used = sum(w for _, w in fields)
        if used > BLOCK_BITS:
            raise ValueError(f"leaf node layout overflows a block: {used} bits")
        fields.append(("pad", BLOCK_BITS - used))
        layout = _layout(fields)
        _LEAF_LAYOUTS[tree_node_levels] = layout
    return layout


@dataclass
class EcpEntry:
    """One repair pointer: the failed cell's bit address and correct value."""

    addr: int = 0
    value: int = 0
    used: bool = False


@dataclass
class VRSet:
    """Valid bits plus read counter for one bucket's twelve data slots."""

    valid_mask: int = (1 << BUCKET_SLOTS) - 1
    read_ctr: int = 0

    def is_valid(self, slot: int) -> bool:
        return bool((self.valid_mask >> slot) & 1)

    def consume(self, slot: int) -> None:
        self.valid_mask &= ~(1 << slot)
        self.read_ctr += 1

    def reset(self) -> None:
        self.valid_mask = (1 << BUCKET_SLOTS) - 1
        self.read_ctr = 0

    def copy(self) -> "VRSet":
        return VRSet(self.valid_mask, self.read_ctr)


def _fresh_ecps(count: int) -> list[EcpEntry]:
    return [EcpEntry() for _ in range(count)]


@dataclass
class BucketMetadata:
    """Decoded bucket metadata block.

    ``vr_set`` is only meaningful for the inline-flags encoding; with the
    flag tree enabled the valid bits live in the tree nodes instead.
    """

    fbit: int = 0
    roffset: int = 0
    ecps: list[EcpEntry] = field(default_factory=lambda: _fresh_ecps(BUCKET_ECPS))
    addresses: list[int] = field(default_factory=lambda: [ADDR_NONE] * REAL_SLOTS)
    path_labels: list[int] = field(default_factory=lambda: [0] * REAL_SLOTS)
    real_offsets: list[int] = field(default_factory=lambda: [0] * REAL_SLOTS)
    replica_meta_offset: int = 0
    enc_ctr: int = 0
    child_macs: list[int] = field(default_factory=lambda: [0, 0])
    vr_set: VRSet = field(default_factory=VRSet)

    def real_count(self) -> int:
        return sum(1 for a in self.addresses if a != ADDR_NONE)

    def slot_of(self, address: int) -> int | None:
        for i, a in enumerate(self.addresses):
            if a == address:
                return self.real_offsets[i]
        return None

    def copy(self) -> "BucketMetadata":
        return replace(
            self,
            ecps=[replace(e) for e in self.ecps],
            addresses=list(self.addresses),
            path_labels=list(self.path_labels),
            real_offsets=list(self.real_offsets),
            child_macs=list(self.child_macs),
            vr_set=self.vr_set.copy(),
        )


@dataclass
class FlagNodeNonLeaf:
    """Decoded non-leaf flag-tree node: 7 VR sets and 8 child MACs."""

    fbit: int = 0
    roffset: int = 0
    ecps: list[EcpEntry] = field(default_factory=lambda: _fresh_ecps(NONLEAF_ECPS))
    vr_sets: list[VRSet] = field(default_factory=lambda: [VRSet() for _ in range(7)])
    child_macs: list[int] = field(default_factory=lambda: [0] * 8)

    def copy(self) -> "FlagNodeNonLeaf":
        return FlagNodeNonLeaf(
            self.fbit,
            self.roffset,
            [replace(e) for e in self.ecps],
            [v.copy() for v in self.vr_sets],
            list(self.child_macs),
        )


@dataclass
class FlagNodeLeaf:
    """Decoded leaf flag-tree node: 31 VR sets plus ancestor path offsets."""

    fbit: int = 0
    roffset: int = 0
    ecps: list[EcpEntry] = field(default_factory=lambda: _fresh_ecps(LEAF_ECPS))
    vr_sets: list[VRSet] = field(default_factory=lambda: [VRSet() for _ in range(31)])
    anc_offsets: list[int] = field(default_factory=list)

    def copy(self) -> "FlagNodeLeaf":
        return FlagNodeLeaf(
            self.fbit,
            self.roffset,
            [replace(e) for e in self.ecps],
            [v.copy() for v in self.vr_sets],
            list(self.anc_offsets),
        )


def _rotate_out(ecps: Sequence[EcpEntry], roffset: int) -> list[EcpEntry]:
    """Logical entry order to stored (physical) field order: left-rotated."""
    n = len(ecps)
    return [ecps[(p + roffset) % n] for p in range(n)]


def _rotate_in(phys: list[EcpEntry], roffset: int) -> list[EcpEntry]:
    n = len(phys)
    return [phys[(i - roffset) % n] for i in range(n)]


def _ecp_values_bucket(ecps: Sequence[EcpEntry], roffset: int) -> list[int]:
    vals = []
    for e in _rotate_out(ecps, roffset):
        vals += [e.addr if e.used else 0, e.value]
    return vals


def _ecp_from_bucket_vals(vals: list[int], roffset: int) -> list[EcpEntry]:
    phys = []
    for i in range(BUCKET_ECPS):
        addr, value = vals[2 * i], vals[2 * i + 1]
        phys.append(EcpEntry(addr, value, addr != 0))
    return _rotate_in(phys, roffset % BUCKET_ECPS)


def _ecp_values_node(ecps: Sequence[EcpEntry], roffset: int) -> list[int]:
    vals = []
    for e in _rotate_out(ecps, roffset):
        vals += [1 if e.used else 0, e.addr, e.value]
    return vals


def _ecp_from_node_vals(vals: list[int], roffset: int) -> list[EcpEntry]:
    phys = []
    for i in range(0, len(vals), 3):
        phys.append(EcpEntry(vals[i + 1], vals[i + 2], bool(vals[i])))
    return _rotate_in(phys, roffset % len(phys))


def encode_bucket_metadata(m: BucketMetadata) -> bytes:
    vals = [m.fbit, m.roffset]
    vals += _ecp_values_bucket(m.ecps, m.roffset)
    vals += m.addresses
    vals += m.path_labels
    vals += m.real_offsets
    vals += [m.child_macs[0], m.child_macs[1], m.replica_meta_offset, m.enc_ctr]
    return kernels.pack_fields(_BUCKET_META_WIDTHS, vals, BLOCK_BYTES)


def decode_bucket_metadata(data: bytes) -> BucketMetadata:
    v = kernels.unpack_fields(_BUCKET_META_WIDTHS, data)
    return BucketMetadata(
        fbit=v[0],
        roffset=v[1],
        ecps=_ecp_from_bucket_vals(v[2:12], v[1]),
        addresses=v[12:17],
        path_labels=v[17:22],
        real_offsets=v[22:27],
        child_macs=[v[27], v[28]],
        replica_meta_offset=v[29],
        enc_ctr=v[30],
    )


def encode_replica_payload(m: BucketMetadata) -> bytes:
    """512-bit replica form: same fields minus its own offset and counter."""
    vals = [m.fbit, m.roffset]
    vals += _ecp_values_bucket(m.ecps, m.roffset)
    vals += m.addresses
    vals += m.path_labels
    vals += m.real_offsets
    vals += [m.child_macs[0], m.child_macs[1]]
    return kernels.pack_fields(_REPLICA_META_WIDTHS, vals, DATA_BYTES)


def decode_replica_payload(data: bytes, enc_ctr: int, replica_slot: int) -> BucketMetadata:
    """Rebuild full metadata from a replica payload.

    The encryption counter is recovered out-of-band (counter shards) and the
    replica's own slot index supplies the missing offset field.
    """
    v = kernels.unpack_fields(_REPLICA_META_WIDTHS, data)
    return BucketMetadata(
        fbit=v[0],
        roffset=v[1],
        ecps=_ecp_from_bucket_vals(v[2:12], v[1]),
        addresses=v[12:17],
        path_labels=v[17:22],
        real_offsets=v[22:27],
        replica_meta_offset=replica_slot,
        enc_ctr=enc_ctr,
        child_macs=[v[27], v[28]],
    )


def encode_bucket_metadata_inline(m: BucketMetadata) -> bytes:
    vals = [m.vr_set.valid_mask, m.vr_set.read_ctr]
    vals += m.addresses
    vals += m.path_labels
    vals += m.real_offsets
    vals += [m.child_macs[0], m.child_macs[1], 0, m.enc_ctr, 0]
    return kernels.pack_fields(_BUCKET_INLINE_WIDTHS, vals, BLOCK_BYTES)


def decode_bucket_metadata_inline(data: bytes) -> BucketMetadata:
    v = kernels.unpack_fields(_BUCKET_INLINE_WIDTHS, data)
    return BucketMetadata(
        addresses=v[2:7],
        path_labels=v[7:12],
        real_offsets=v[12:17],
        child_macs=[v[17], v[18]],
        enc_ctr=v[20],
        vr_set=VRSet(v[0], v[1]),
    )


def encode_flag_nonleaf(n: FlagNodeNonLeaf) -> bytes:
    vals = [n.fbit, n.roffset]
    vals += _ecp_values_node(n.ecps, n.roffset)
    for s in n.vr_sets:
        vals += [s.valid_mask, s.read_ctr]
    vals += n.child_macs
    return kernels.pack_fields(_NONLEAF_WIDTHS, vals, BLOCK_BYTES)


def decode_flag_nonleaf(data: bytes) -> FlagNodeNonLeaf:
    v = kernels.unpack_fields(_NONLEAF_WIDTHS, data)
    sets = [VRSet(v[11 + 2 * i], v[12 + 2 * i]) for i in range(7)]
    return FlagNodeNonLeaf(
        fbit=v[0],
        roffset=v[1],
        ecps=_ecp_from_node_vals(v[2:11], v[1]),
        vr_sets=sets,
        child_macs=v[25:33],
    )


def encode_flag_leaf(n: FlagNodeLeaf, tree_node_levels: int) -> bytes:
    layout = leaf_node_layout(tree_node_levels)
    vals = [n.fbit, n.roffset]
    vals += _ecp_values_node(n.ecps, n.roffset)
    for s in n.vr_sets:
        vals += [s.valid_mask, s.read_ctr]
    vals += n.anc_offsets
    vals += [0]
    return kernels.pack_fields(_widths(layout), vals, BLOCK_BYTES)


def decode_flag_leaf(data: bytes, tree_node_levels: int) -> FlagNodeLeaf:
    layout = leaf_node_layout(tree_node_levels)
    v = kernels.unpack_fields(_widths(layout), data)
    base = 2 + 3 * LEAF_ECPS
    sets = [VRSet(v[base + 2 * i], v[base + 1 + 2 * i]) for i in range(31)]
    off = base + 62
    return FlagNodeLeaf(
        fbit=v[0],
        roffset=v[1],
        ecps=_ecp_from_node_vals(v[2:base], v[1]),
        vr_sets=sets,
        anc_offsets=v[off : off + tree_node_levels - 1],
    )


def pack_ecc_area(mac: int, partial_ctr: int) -> bytes:
    """Pack a data slot's ECC area: 10-bit counter shard above a 54-bit MAC."""
    return kernels.pack_fields(_ECC_WIDTHS, [partial_ctr, mac], ECC_BYTES)


def unpack_ecc_area(data: bytes) -> tuple[int, int]:
    """Inverse of :func:`pack_ecc_area`; returns ``(mac, partial_ctr)``."""
    partial, mac = kernels.unpack_fields(_ECC_WIDTHS, data)
    return mac, partial


def layout_manifest(tree_node_levels: int = 5) -> str:
    """Stable text rendering of every layout: name, bit offset, width."""
    sections = [
        ("bucket-metadata", BUCKET_META_LAYOUT),
        ("replica-payload", REPLICA_META_LAYOUT),
        ("bucket-metadata-inline-flags", BUCKET_META_INLINE_LAYOUT),
        ("flag-node-nonleaf", NONLEAF_NODE_LAYOUT),
        (f"flag-node-leaf-{tree_node_levels}-levels", leaf_node_layout(tree_node_levels)),
        ("data-slot-ecc-area", ECC_AREA_LAYOUT),
    ]
    lines = []
    for title, layout in sections:
        total = sum(w for _, _, w in layout)
        lines.append(f"[{title}] bits={total}")
        for name, off, width in layout:
            lines.append(f"{name} offset={off} width={width}")
        lines.append("")
    return "\n".join(lines)
