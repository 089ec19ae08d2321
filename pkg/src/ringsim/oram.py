"""Ring ORAM controller.

Implements the three protocol operations (path read, path eviction, early
reshuffle) over a bit-level DRAM model, with optional integrity
verification, a packed flag tree for the valid-bit metadata, channel-level
replication, and permanent-fault repair, selected per scheme.

Determinism: every random draw comes from a stream derived from the master
seed and an operation index (access number, eviction number, ...), so a
run is replayable and an operation interrupted by a channel failure can be
retried after recovery with identical draws. Operations are structured so
that no externally visible state mutates before their last fallible read.

Initialization: the tree is logically boot-initialized to all-dummy
buckets. Blocks are materialized on first touch from a deterministic
initial image; a parent-stored MAC of zero marks a child still in that
state, which keeps initialization O(1) per touched bucket while every
fetched block stays verifiable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import _kernels as kernels
from . import codec, ecp, replication
from .codec import (
    ADDR_NONE,
    BLOCK_BITS,
    BUCKET_BLOCKS,
    BUCKET_SLOTS,
    DATA_BYTES,
    DUMMY_SLOTS,
    REAL_SLOTS,
    ZERO_DATA,
    BucketMetadata,
    EcpEntry,
    FlagNodeLeaf,
    FlagNodeNonLeaf,
    VRSet,
)
from .crypto import CipherSuite, MacUnitPool, derive_key
from .dram import DramGeometry, DramModel
from .ecp import BUCKET_ECP_LAYOUT, LEAF_ECP_LAYOUT, NONLEAF_ECP_LAYOUT, RemapTable
from .flagtree import FlagTreeGeometry
from .integrity import (
    IntegrityViolation,
    ReliabilityFailure,
    StashOverflow,
    ViolationEvent,
    verify_data,
    verify_meta,
)

# Encrypted spans (bit offset, bit length): addresses, labels, offsets and
# the replica position are ciphertext in a stored metadata block; fault
# info, the encryption counter and the child MACs stay in the clear.
META_SPANS = ((74, 330), (512, 4))
INLINE_SPANS = ((15, 330),)
META_CTR_OFF = 516
INLINE_CTR_OFF = 512


@dataclass(frozen=True)
class Features:
    """Feature gates derived from the scheme name."""

    integrity: bool = True
    flag_tree: bool = True
    replication: bool = True

    def __post_init__(self) -> None:
        if self.flag_tree and not self.integrity:
            raise ValueError("the flag tree requires integrity verification")
        if self.replication and not self.flag_tree:
            raise ValueError("replication requires the flag tree")


SCHEME_FEATURES = {
    "baseline": Features(False, False, False),
    "ri": Features(True, False, False),
    "rim": Features(True, True, False),
    "rimr": Features(True, True, True),
    "rimre": Features(True, True, True),
}


@dataclass
class OramConfig:
    tree_levels: int = 23
    cached_levels: int = 7
    evict_rate: int = 5          # one eviction per this many accesses
    stash_capacity: int = 8192   # 512 KiB of 64 B blocks
    real_utilization: float = 0.8
    stash_high: float = 0.90
    stash_low: float = 0.75
    spare_buckets: int = 1084
    spare_nodes: int = 64
    block_ticks: int = 32
    mac_units: int = 4
    leaf_span: int = 5
    nonleaf_span: int = 3
    cached_node_levels: int = 2

    def __post_init__(self) -> None:
        if self.tree_levels < 2:
            raise ValueError("need at least two tree levels")
        if not 1 <= self.cached_levels < self.tree_levels:
            raise ValueError("cached_levels must be in [1, tree_levels)")
        if self.tree_levels - 1 > 30:
            raise ValueError("leaf labels exceed the 30-bit label field")

    @property
    def leaves(self) -> int:
        return 1 << (self.tree_levels - 1)

    @property
    def num_buckets(self) -> int:
        return (1 << self.tree_levels) - 1

    @property
    def logical_capacity(self) -> int:
        return int(self.real_utilization * REAL_SLOTS * self.leaves)

    def flag_geometry(self) -> FlagTreeGeometry:
        span = min(self.leaf_span, self.tree_levels)
        probe = FlagTreeGeometry(
            oram_levels=self.tree_levels,
            cached_oram_levels=self.cached_levels,
            leaf_span=span,
            nonleaf_span=self.nonleaf_span,
            cached_node_levels=0,
        )
        cached = max(1, min(self.cached_node_levels, probe.node_levels))
        return FlagTreeGeometry(
            oram_levels=self.tree_levels,
            cached_oram_levels=self.cached_levels,
            leaf_span=span,
            nonleaf_span=self.nonleaf_span,
            cached_node_levels=cached,
        )


class AddressMap:
    """Static block-index layout: bucket tree, flag-node pairs, spares."""

    def __init__(self, cfg: OramConfig, geom: FlagTreeGeometry | None):
        self.bucket_region = BUCKET_BLOCKS * cfg.num_buckets
        base = self.bucket_region
        base += base % 2  # keep node primaries on channel 0
        self.node_base = base
        node_blocks = 2 * geom.total_nodes if geom is not None else 0
        self.spare_bucket_base = self.node_base + node_blocks
        self.spare_node_base = self.spare_bucket_base + BUCKET_BLOCKS * cfg.spare_buckets
        self.spare_node_base += self.spare_node_base % 2
        self.total_blocks = self.spare_node_base + 2 * cfg.spare_nodes


class Stats:
    """Per-run counters; protocol traffic is split from recovery traffic."""

    CATEGORIES = ("meta", "data", "node_primary", "node_mirror")

    def __init__(self) -> None:
        self.reads = {c: 0 for c in self.CATEGORIES}
        self.writes = {c: 0 for c in self.CATEGORIES}
        self.recovery_reads = 0
        self.recovery_writes = 0
        self.accesses = 0
        self.dummy_accesses = 0
        self.read_paths = 0
        self.evictions = 0
        self.reshuffles = 0
        self.detections = {"meta": 0, "data": 0, "node": 0, "channel": 0}
        self.events: list[ViolationEvent] = []
        self.recoveries = {"case1": 0, "case2": 0, "case3": 0}
        self.mac_trials = 0
        self.remaps = 0
        self.node_relocations = 0
        self.classified = {"transient": 0, "permanent": 0}
        self.alarms = 0
        self.max_stash = 0
        self.reshuffle_chain_writes = 0

    @property
    def total_reads(self) -> int:
        return sum(self.reads.values())

    @property
    def total_writes(self) -> int:
        return sum(self.writes.values())

    @property
    def total_detections(self) -> int:
        return sum(self.detections.values())

    def counts(self) -> tuple[int, int]:
        return self.total_reads, self.total_writes


class Timeline:
    """Latency proxy: per-channel transfer slots plus MAC-unit queueing.

    Reads extend the enclosing operation's completion time (and, with
    integrity on, wait for a MAC unit); writes occupy their channel but
    are posted off the critical path.
    """

    def __init__(self, channels: int, block_ticks: int, pool: MacUnitPool):
        self.block_ticks = block_ticks
        self.pool = pool
        self.clock = 0
        self.chan_free = [0] * channels
        self._op_end = 0

    def begin_op(self) -> None:
        self._op_end = self.clock

    def read(self, channel: int, mac: bool) -> None:
        t = max(self.chan_free[channel], self.clock) + self.block_ticks
        self.chan_free[channel] = t
        done = self.pool.submit(t) if mac else t
        if done > self._op_end:
            self._op_end = done

    def write(self, channel: int) -> None:
        self.chan_free[channel] = max(self.chan_free[channel], self.clock) + self.block_ticks

    def end_op(self) -> None:
        self.clock = self._op_end


class _ChannelDown(Exception):
    def __init__(self, channel: int):
        super().__init__(f"channel {channel} failed")
        self.channel = channel


@dataclass
class _NodeCtx:
    level: int
    index: int
    uid: int
    node: FlagNodeLeaf | FlagNodeNonLeaf
    child_slot: int


@dataclass
class _PathVr:
    sets: dict[int, VRSet]
    dram_nodes: list[_NodeCtx] = field(default_factory=list)


class OramController:
    """One simulated secure-memory controller instance (single-threaded)."""

    def __init__(self, cfg: OramConfig, features: Features, seed: int = 0,
                 dram: DramModel | None = None, mac_units: int | None = None):
        self.cfg = cfg
        self.features = features
        self.seed = seed
        self.cipher = CipherSuite(derive_key(seed))
        self._rng_key = derive_key(seed ^ 0x5EED)
        self.geom = cfg.flag_geometry() if features.flag_tree else None
        self.addr_map = AddressMap(cfg, self.geom)
        if dram is None:
            dram = DramModel(DramGeometry.for_blocks(self.addr_map.total_blocks), seed)
        if dram.geometry.capacity_blocks < self.addr_map.total_blocks:
            raise ValueError("DRAM geometry smaller than the address map")
        if features.replication and dram.geometry.channels != 2:
            raise ValueError("replication requires a two-channel memory system")
        self.dram = dram
        self.pool = MacUnitPool(mac_units if mac_units is not None else cfg.mac_units)
        self.timeline = Timeline(dram.geometry.channels, cfg.block_ticks, self.pool)
        self.stats = Stats()

        self.posmap: dict[int, int] = {}
        self.stash: dict[int, tuple[int, bytes]] = {}
        self.cached_buckets: dict[int, list[tuple[int, int, bytes]]] = {}
        self.anchor_macs: dict[int, int] = {}
        self.written: set[int] = set()
        self.materialized: set[int] = set()
        self.bucket_faults: dict[int, set[int]] = {}
        self.remap = RemapTable(cfg.spare_buckets)

        self.cached_nodes: dict[tuple[int, int], FlagNodeLeaf | FlagNodeNonLeaf] = {}
        self.node_written: set[int] = set()
        self.materialized_nodes: set[int] = set()
        self.node_faults: dict[int, set[int]] = {}
        self.node_spare: dict[int, int] = {}
        self._node_toggle = 0

        self.access_count = 0
        self.eviction_count = 0
        self.reshuffle_count = 0
        self.pressure_count = 0
        self.pending_reshuffles: set[int] = set()
        self._in_recovery = False
        self._rebuild_meta: dict[int, BucketMetadata] = {}

        self.record_trace = False
        self.trace: list[tuple[str, str, int]] = []
        self.record_leaves = False
        self.leaf_log: list[int] = []

        # Decode memos, keyed on the exact stored bytes; a mismatch (fault,
        # attack, recovery write) simply falls back to a fresh decode.
        self._meta_cache: dict[int, tuple[bytes, BucketMetadata]] = {}
        self._node_cache: dict[int, tuple[bytes, object]] = {}
        self._init_meta_cache: dict[int, bytes] = {}
        ch = dram.geometry.channels
        self._slot_ch_tables = {
            r: tuple((r + 1 + s) % ch for s in range(BUCKET_SLOTS)) for r in range(ch)
        }
        self._shard_idx_tables = {
            r: tuple(sum(1 for t in range(s) if tab[t] == tab[s])
                     for s in range(BUCKET_SLOTS))
            for r, tab in self._slot_ch_tables.items()
        }

        if self.geom is not None:
            for k in range(self.geom.cached_node_levels):
                for j in range(self.geom.node_counts[k]):
                    self.cached_nodes[(k, j)] = self._initial_node(k, j)

    # ------------------------------------------------------------------
    # derived randomness
    # ------------------------------------------------------------------

    def _rng(self, tag: str, *idx: int) -> random.Random:
        msg = tag.encode() + b"".join(i.to_bytes(8, "little") for i in idx)
        return random.Random(kernels.prf_tag(self._rng_key, msg))

    # ------------------------------------------------------------------
    # tree arithmetic and addressing
    # ------------------------------------------------------------------

    @staticmethod
    def bucket_level(bucket: int) -> int:
        return (bucket + 1).bit_length() - 1

    def bucket_at(self, leaf: int, level: int) -> int:
        return (1 << level) - 1 + (leaf >> (self.cfg.tree_levels - 1 - level))

    def path_buckets(self, leaf: int) -> list[tuple[int, int]]:
        """(level, bucket) for the DRAM-resident part of a path, top-down."""
        return [(d, self.bucket_at(leaf, d))
                for d in range(self.cfg.cached_levels, self.cfg.tree_levels)]

    def bucket_base(self, bucket: int) -> int:
        slot = self.remap.lookup(bucket)
        if slot is None:
            return BUCKET_BLOCKS * bucket
        return self.addr_map.spare_bucket_base + BUCKET_BLOCKS * slot

    def bucket_block(self, bucket: int, rel: int) -> int:
        return self.bucket_base(bucket) + rel

    def meta_channel(self, bucket: int) -> int:
        return self.dram.channel_of(self.bucket_base(bucket))

    def slot_channels(self, bucket: int) -> tuple[int, ...]:
        return self._slot_ch_tables[self.bucket_base(bucket) % self.dram.geometry.channels]

    def _slot_shard_index(self, bucket: int, slot: int) -> int:
        return self._shard_idx_tables[self.bucket_base(bucket) % self.dram.geometry.channels][slot]

    def meta_tag(self, bucket: int) -> int:
        return BUCKET_BLOCKS * bucket

    def slot_tag(self, bucket: int, slot: int) -> int:
        return BUCKET_BLOCKS * bucket + 1 + slot

    def node_blocks(self, uid: int) -> tuple[int, int]:
        slot = self.node_spare.get(uid)
        if slot is None:
            base = self.addr_map.node_base + 2 * uid
        else:
            base = self.addr_map.spare_node_base + 2 * slot
        return base, base + 1

    @staticmethod
    def permute_slots(rng: random.Random) -> list[int]:
        """Uniform random permutation of the twelve slot positions."""
        return rng.sample(range(BUCKET_SLOTS), BUCKET_SLOTS)

    def reverse_lex_leaf(self, counter: int) -> int:
        bits = self.cfg.tree_levels - 1
        x = counter % self.cfg.leaves
        out = 0
        for _ in range(bits):
            out = (out << 1) | (x & 1)
            x >>= 1
        return out

    # ------------------------------------------------------------------
    # counted block IO
    # ------------------------------------------------------------------

    def _read_block(self, idx: int, cat: str) -> bytes:
        raw = self.dram.read_block(idx)
        self.stats.reads[cat] += 1
        if self.record_trace:
            self.trace.append(("R", cat, idx))
        self.timeline.read(self.dram.channel_of(idx), self.features.integrity)
        if self.features.replication and self.dram.channel_failed(idx):
            ch = self.dram.channel_of(idx)
            self._record_violation("channel", None, None, f"read from failed channel {ch}")
            raise _ChannelDown(ch)
        return raw

    def _write_block(self, idx: int, data: bytes, cat: str) -> None:
        self.dram.write_block(idx, data)
        self.stats.writes[cat] += 1
        if self.record_trace:
            self.trace.append(("W", cat, idx))
        self.timeline.write(self.dram.channel_of(idx))

    def read_recovery(self, idx: int) -> bytes:
        raw = self.dram.read_block(idx)
        self.stats.recovery_reads += 1
        self.timeline.read(self.dram.channel_of(idx), self.features.integrity)
        return raw

    def write_recovery(self, idx: int, data: bytes) -> None:
        self.dram.write_block(idx, data)
        self.stats.recovery_writes += 1
        self.timeline.write(self.dram.channel_of(idx))

    # ------------------------------------------------------------------
    # violations and alarms
    # ------------------------------------------------------------------

    def _record_violation(self, kind: str, bucket: int | None, level: int | None,
                          cause: str) -> ViolationEvent:
        ev = ViolationEvent(kind, bucket, level, cause)
        self.stats.detections[kind] += 1
        self.stats.events.append(ev)
        return ev

    def alarm(self, kind: str, bucket: int | None, cause: str):
        self.stats.alarms += 1
        level = self.bucket_level(bucket) if bucket is not None else None
        raise IntegrityViolation(ViolationEvent(kind, bucket, level, cause))

    def reliability_alarm(self, cause: str):
        raise ReliabilityFailure(cause)

    # ------------------------------------------------------------------
    # initial (boot) images
    # ------------------------------------------------------------------

    def _initial_meta(self, bucket: int) -> BucketMetadata:
        meta = BucketMetadata()
        if self.features.replication:
            plan = replication.plan_replicas(
                self.meta_channel(bucket), [], self.slot_channels(bucket))
            meta.replica_meta_offset = plan.meta_slot
        return meta

    def initial_meta_stored(self, bucket: int) -> bytes:
        stored = self._init_meta_cache.get(bucket)
        if stored is None:
            stored = self.encode_meta_stored_verbatim(bucket, self._initial_meta(bucket))
            self._init_meta_cache[bucket] = stored
        return stored

    def _initial_bucket_blocks(self, bucket: int) -> list[bytes]:
        meta = self._initial_meta(bucket)
        blocks = [self.initial_meta_stored(bucket)]
        for slot in range(BUCKET_SLOTS):
            if self.features.replication and slot == meta.replica_meta_offset:
                plain = codec.encode_replica_payload(meta)
            else:
                plain = ZERO_DATA
            blocks.append(self.build_slot_block(bucket, meta, slot, plain))
        return blocks

    def _ensure_bucket(self, bucket: int) -> None:
        if bucket in self.materialized:
            return
        base = self.bucket_base(bucket)
        for rel, blk in enumerate(self._initial_bucket_blocks(bucket)):
            self.dram.write_block(base + rel, blk)
        self.materialized.add(bucket)

    def rematerialize_initial(self, bucket: int) -> None:
        base = self.bucket_base(bucket)
        for rel, blk in enumerate(self._initial_bucket_blocks(bucket)):
            self.write_recovery(base + rel, blk)

    def _initial_node(self, level: int, index: int):
        geom = self.geom
        if level == geom.node_levels - 1:
            node = FlagNodeLeaf()
            node.anc_offsets = geom.ancestor_entry_positions(index)
        else:
            node = FlagNodeNonLeaf()
        return node

    def _initial_node_stored(self, level: int, index: int) -> bytes:
        geom = self.geom
        node = self._initial_node(level, index)
        if level == geom.node_levels - 1:
            return codec.encode_flag_leaf(node, geom.node_levels)
        return codec.encode_flag_nonleaf(node)

    def _ensure_node(self, level: int, index: int) -> None:
        uid = self.geom.node_uid(level, index)
        if uid in self.materialized_nodes:
            return
        stored = self._initial_node_stored(level, index)
        primary, mirror = self.node_blocks(uid)
        self.dram.write_block(primary, stored)
        self.dram.write_block(mirror, stored)
        self.materialized_nodes.add(uid)

    # ------------------------------------------------------------------
    # metadata encode/decode
    # ------------------------------------------------------------------

    def encode_meta_stored_verbatim(self, bucket: int, meta: BucketMetadata) -> bytes:
        """Encode and encrypt without refreshing repair-entry values."""
        if self.features.flag_tree:
            enc = codec.encode_bucket_metadata(meta)
            spans = META_SPANS
        else:
            enc = codec.encode_bucket_metadata_inline(meta)
            spans = INLINE_SPANS
        return self.cipher.crypt_meta_spans(bucket, meta.enc_ctr, enc, spans)

    def encode_meta_stored(self, bucket: int, meta: BucketMetadata,
                           bit_lookup=None) -> bytes:
        """Final stored image: repair-entry values refreshed against it."""
        stored = self.encode_meta_stored_verbatim(bucket, meta)
        if self.features.replication and any(e.used for e in meta.ecps):
            buf = bytearray(stored)
            ecp.finalize_values(meta.ecps, meta.roffset, BUCKET_ECP_LAYOUT,
                                buf, 0, bit_lookup)
            stored = bytes(buf)
        return stored

    def decode_meta_stored(self, bucket: int, stored: bytes) -> BucketMetadata:
        if self.features.flag_tree:
            ctr = int.from_bytes(stored[64:72], "big") & ((1 << 60) - 1)
            plain = self.cipher.crypt_meta_spans(bucket, ctr, stored, META_SPANS)
            return codec.decode_bucket_metadata(plain)
        ctr = (int.from_bytes(stored[64:72], "big") >> 4) & ((1 << 60) - 1)
        plain = self.cipher.crypt_meta_spans(bucket, ctr, stored, INLINE_SPANS)
        return codec.decode_bucket_metadata_inline(plain)

    def build_slot_block(self, bucket: int, meta: BucketMetadata, slot: int,
                         plaintext: bytes) -> bytes:
        if self.features.replication:
            shard = (meta.enc_ctr >> (10 * self._slot_shard_index(bucket, slot))) & 0x3FF
        else:
            shard = 0
        if self.features.integrity:
            return self.cipher.seal_slot(bucket, meta.enc_ctr, slot,
                                         self.slot_tag(bucket, slot), shard, plaintext)
        payload = self.cipher.crypt_payload(bucket, meta.enc_ctr, slot, plaintext)
        return payload + codec.pack_ecc_area(0, shard)

    def verify_slot(self, bucket: int, slot: int, meta: BucketMetadata,
                    payload: bytes, ecc: bytes, shard: int) -> bool:
        return verify_data(self.cipher, self.slot_tag(bucket, slot),
                           meta.enc_ctr, payload, ecc, shard)

    # ------------------------------------------------------------------
    # fetch paths (verified reads)
    # ------------------------------------------------------------------

    def parent_stored_mac(self, bucket: int) -> int:
        """Parent-side MAC for one bucket (channel-rebuild support)."""
        level = self.bucket_level(bucket)
        if level == self.cfg.cached_levels:
            return self.anchor_macs.get(bucket, 0)
        parent = (bucket - 1) // 2
        meta = self._rebuild_meta.get(parent)
        if meta is None:
            raw = self.read_recovery(self.bucket_block(parent, 0))
            if self.features.replication:
                _, _, corrected = ecp.decode_entries(raw, BUCKET_ECP_LAYOUT)
                raw = bytes(corrected)
            meta = self.decode_meta_stored(parent, raw)
        return meta.child_macs[(bucket - 1) % 2]

    def note_channel_rebuilt(self, bucket: int, stored: bytes,
                             meta: BucketMetadata) -> None:
        self._rebuild_meta[bucket] = meta

    def _fetch_metadata(self, bucket: int, parent_mac: int) -> tuple[BucketMetadata, bytes]:
        self._ensure_bucket(bucket)
        raw = self._read_block(self.bucket_block(bucket, 0), "meta")
        if self.features.replication:
            _, _, corrected = ecp.decode_entries(raw, BUCKET_ECP_LAYOUT)
            stored = bytes(corrected)
        else:
            stored = raw
        if self.features.integrity:
            initial = self.initial_meta_stored(bucket) if parent_mac == 0 else None
            if not verify_meta(self.cipher, self.meta_tag(bucket), stored,
                               parent_mac, initial):
                level = self.bucket_level(bucket)
                self._record_violation("meta", bucket, level, "metadata MAC mismatch")
                if self.features.replication and not self._in_recovery:
                    stored, meta = replication.recover_metadata(self, bucket, parent_mac)
                    self._classify_block(self.bucket_block(bucket, 0), stored, bucket)
                    return meta, stored
                self.alarm("meta", bucket, "metadata MAC mismatch")
        cached = self._meta_cache.get(bucket)
        if cached is not None and cached[0] == stored:
            return cached[1], stored
        meta = self.decode_meta_stored(bucket, stored)
        self._meta_cache[bucket] = (stored, meta)
        return meta, stored

    def _fetch_path_metadata(self, path: list[tuple[int, int]]) -> dict[int, BucketMetadata]:
        metas: dict[int, BucketMetadata] = {}
        for level, bucket in path:
            if level == self.cfg.cached_levels:
                parent_mac = self.anchor_macs.get(bucket, 0)
            else:
                parent = (bucket - 1) // 2
                parent_mac = metas[parent].child_macs[(bucket - 1) % 2]
            meta, _ = self._fetch_metadata(bucket, parent_mac)
            metas[bucket] = meta
        return metas

    def _fetch_slot_payload(self, bucket: int, slot: int, meta: BucketMetadata) -> bytes:
        raw = self._read_block(self.bucket_block(bucket, 1 + slot), "data")
        if self.features.replication:
            if meta.fbit:
                raw = ecp.apply_entries(raw, meta.ecps, (1 + slot) * BLOCK_BITS)
            shard = (meta.enc_ctr >> (10 * self._slot_shard_index(bucket, slot))) & 0x3FF
        else:
            shard = 0
        if self.features.integrity:
            if not self.cipher.check_slot(meta.enc_ctr, self.slot_tag(bucket, slot),
                                          shard, raw):
                level = self.bucket_level(bucket)
                self._record_violation("data", bucket, level, f"slot {slot} MAC mismatch")
                if self.features.replication and not self._in_recovery:
                    corrected = replication.recover_data_slot(self, bucket, meta, slot)
                    self._classify_block(self.bucket_block(bucket, 1 + slot),
                                         corrected, bucket, meta)
                    raw = corrected
                else:
                    self.alarm("data", bucket, f"slot {slot} MAC mismatch")
        return raw[:DATA_BYTES]

    # ------------------------------------------------------------------
    # flag-tree node IO
    # ------------------------------------------------------------------

    def _node_layout(self, level: int):
        return LEAF_ECP_LAYOUT if level == self.geom.node_levels - 1 else NONLEAF_ECP_LAYOUT

    def _encode_node(self, level: int, node) -> bytes:
        geom = self.geom
        if level == geom.node_levels - 1:
            raw = codec.encode_flag_leaf(node, geom.node_levels)
        else:
            raw = codec.encode_flag_nonleaf(node)
        if self.features.replication and any(e.used for e in node.ecps):
            buf = bytearray(raw)
            ecp.finalize_values(node.ecps, node.roffset, self._node_layout(level), buf, 0)
            raw = bytes(buf)
        return raw

    def _decode_node(self, level: int, stored: bytes):
        if level == self.geom.node_levels - 1:
            return codec.decode_flag_leaf(stored, self.geom.node_levels)
        return codec.decode_flag_nonleaf(stored)

    def _node_ok(self, uid: int, level: int, index: int, stored: bytes,
                 parent_mac: int) -> bool:
        if parent_mac == 0:
            return stored == self._initial_node_stored(level, index)
        return self.cipher.mac_node(uid, stored) == parent_mac

    def _fetch_node(self, level: int, index: int, parent_obj, copy: int):
        geom = self.geom
        uid = geom.node_uid(level, index)
        self._ensure_node(level, index)
        primary, mirror = self.node_blocks(uid)
        idx, cat = (primary, "node_primary") if copy == 0 else (mirror, "node_mirror")
        raw = self._read_block(idx, cat)
        layout = self._node_layout(level)
        if self.features.replication:
            _, _, corrected = ecp.decode_entries(raw, layout)
            stored = bytes(corrected)
        else:
            stored = raw
        parent_mac = parent_obj.child_macs[geom.child_slot(level, index)]
        if not self._node_ok(uid, level, index, stored, parent_mac):
            self._record_violation("node", None, level, f"flag node {uid} MAC mismatch")
            if self.features.replication and not self._in_recovery:
                other = self.read_recovery(mirror if copy == 0 else primary)
                _, _, ocorr = ecp.decode_entries(other, layout)
                ostored = bytes(ocorr)
                if not self._node_ok(uid, level, index, ostored, parent_mac):
                    self.alarm("node", None, f"flag node {uid}: both copies corrupt")
                self.write_recovery(idx, ostored)
                self._classify_node(uid, ostored, level, index)
                stored = ostored
            else:
                self.alarm("node", None, f"flag node {uid} MAC mismatch")
        cached = self._node_cache.get(uid)
        if cached is not None and cached[0] == stored:
            return cached[1]
        node = self._decode_node(level, stored)
        self._node_cache[uid] = (stored, node)
        return node

    def _fetch_vr_path(self, leaf: int) -> _PathVr:
        geom = self.geom
        copy = self._node_toggle
        self._node_toggle ^= 1
        dram_nodes: list[_NodeCtx] = []
        parent_obj = None
        for k in range(geom.node_levels):
            j = geom.node_index_on_path(k, leaf)
            if geom.is_cached_level(k):
                parent_obj = self.cached_nodes[(k, j)]
                continue
            node = self._fetch_node(k, j, parent_obj, copy)
            dram_nodes.append(_NodeCtx(k, j, geom.node_uid(k, j), node,
                                       geom.child_slot(k, j)))
            parent_obj = node
        sets: dict[int, VRSet] = {}
        by_level = {ctx.level: ctx.node for ctx in dram_nodes}
        for d in range(self.cfg.cached_levels, self.cfg.tree_levels):
            k, j, pos = geom.set_position(d, leaf)
            holder = by_level.get(k)
            if holder is None:
                holder = self.cached_nodes[(k, j)]
            sets[d] = holder.vr_sets[pos]
        return _PathVr(sets, dram_nodes)

    def _write_vr_nodes(self, pv: _PathVr) -> None:
        for i in range(len(pv.dram_nodes) - 1, -1, -1):
            ctx = pv.dram_nodes[i]
            stored = self._encode_node(ctx.level, ctx.node)
            primary, mirror = self.node_blocks(ctx.uid)
            self._write_block(primary, stored, "node_primary")
            self._write_block(mirror, stored, "node_mirror")
            self.node_written.add(ctx.uid)
            self._node_cache[ctx.uid] = (stored, ctx.node)
            mac = self.cipher.mac_node(ctx.uid, stored)
            if i > 0:
                pv.dram_nodes[i - 1].node.child_macs[ctx.child_slot] = mac
            else:
                parent = (ctx.level - 1, self.geom.parent_index(ctx.level, ctx.index))
                self.cached_nodes[parent].child_macs[ctx.child_slot] = mac

    def rebuild_flag_nodes(self, channel: int) -> None:
        """Rebuild the failed channel's node copies from their mirrors."""
        if self.geom is None:
            return
        geom = self.geom
        rebuilt: dict[int, bytes] = {}
        for uid in sorted(self.materialized_nodes):
            level = next(k for k in range(geom.node_levels)
                         if geom.level_offsets[k] <= uid < geom.level_offsets[k + 1])
            index = uid - geom.level_offsets[level]
            primary, mirror = self.node_blocks(uid)
            if self.dram.channel_of(primary) == channel:
                bad, good = primary, mirror
            else:
                bad, good = mirror, primary
            if uid not in self.node_written:
                self.write_recovery(bad, self._initial_node_stored(level, index))
                continue
            raw = self.read_recovery(good)
            _, _, corrected = ecp.decode_entries(raw, self._node_layout(level))
            stored = bytes(corrected)
            if geom.is_cached_level(level - 1):
                parent = self.cached_nodes[(level - 1, geom.parent_index(level, index))]
                parent_mac = parent.child_macs[geom.child_slot(level, index)]
            else:
                puid = geom.node_uid(level - 1, geom.parent_index(level, index))
                pnode = self._decode_node(level - 1, rebuilt[puid])
                parent_mac = pnode.child_macs[geom.child_slot(level, index)]
            if not self._node_ok(uid, level, index, stored, parent_mac):
                self.reliability_alarm(
                    f"flag node {uid}: surviving copy corrupt during channel rebuild")
            self.write_recovery(bad, stored)
            rebuilt[uid] = stored

    # ------------------------------------------------------------------
    # fault classification and repair
    # ------------------------------------------------------------------

    def _stuck_diff(self, idx: int, expected: bytes, repair=None) -> list[int]:
        """Re-read after a corrective write; return still-wrong bit positions.

        ``repair`` post-processes the raw re-read (applying the block's
        repair entries) so cells that are already covered do not re-report.
        """
        back = self.dram.read_block(idx)
        self.stats.recovery_reads += 1
        if repair is not None:
            back = repair(back)
        if back == expected:
            return []
        x = int.from_bytes(back, "big") ^ int.from_bytes(expected, "big")
        return [b for b in range(BLOCK_BITS) if (x >> (BLOCK_BITS - 1 - b)) & 1]

    def _classify_block(self, idx: int, corrected: bytes, bucket: int,
                        meta: BucketMetadata | None = None) -> None:
        """Corrected content was written back; re-read to type the fault.

        Already-known fault cells can re-surface between their detection and
        the repair-updating reshuffle; those neither count nor re-queue.
        """
        rel = idx - self.bucket_base(bucket)
        if rel == 0:
            repair = lambda raw: bytes(ecp.decode_entries(raw, BUCKET_ECP_LAYOUT)[2])
        elif meta is not None:
            repair = lambda raw: ecp.apply_entries(raw, meta.ecps, rel * BLOCK_BITS)
        else:
            repair = None
        stuck = self._stuck_diff(idx, corrected, repair)
        if not stuck:
            self.stats.classified["transient"] += 1
            return
        faults = self.bucket_faults.setdefault(bucket, set())
        new = [rel * BLOCK_BITS + bit for bit in stuck
               if rel * BLOCK_BITS + bit not in faults]
        if not new:
            return
        self.stats.classified["permanent"] += 1
        faults.update(new)
        self.pending_reshuffles.add(bucket)

    def _classify_node(self, uid: int, corrected: bytes, level: int, index: int) -> None:
        primary, mirror = self.node_blocks(uid)
        stuck = self._stuck_diff(primary, corrected) + self._stuck_diff(mirror, corrected)
        if not stuck:
            self.stats.classified["transient"] += 1
            return
        faults = self.node_faults.setdefault(uid, set())
        new = [bit for bit in stuck if bit not in faults]
        if not new:
            return
        self.stats.classified["permanent"] += 1
        faults.update(new)
        node = self._decode_node(level, corrected)
        self._rewrite_node(uid, level, index, node)

    def _rewrite_node(self, uid: int, level: int, index: int, node) -> None:
        """Re-solve a node's repair entries and rewrite both copies."""
        geom = self.geom
        faults = self.node_faults.get(uid, set())
        layout = self._node_layout(level)
        solved = ecp.solve(faults, layout, node.roffset)
        if solved is None:
            if len(self.node_spare) >= self.cfg.spare_nodes:
                self.reliability_alarm("flag-node spare area exhausted")
            self.node_spare[uid] = len(self.node_spare)
            self.stats.node_relocations += 1
            self.node_faults.pop(uid, None)
            node.roffset = 0
            node.ecps = [EcpEntry() for _ in node.ecps]
            node.fbit = 0
        else:
            roffset, assign = solved
            node.roffset = roffset
            node.ecps = ecp.entries_from_assignment(assign)
            node.fbit = 1 if any(e.used for e in node.ecps) else 0
        stored = self._encode_node(level, node)
        primary, mirror = self.node_blocks(uid)
        self.write_recovery(primary, stored)
        self.write_recovery(mirror, stored)
        self.node_written.add(uid)
        self.materialized_nodes.add(uid)
        self._node_cache[uid] = (stored, node)
        mac = self.cipher.mac_node(uid, stored)
        self._propagate_node_mac(level, index, mac)

    def _propagate_node_mac(self, level: int, index: int, mac: int) -> None:
        geom = self.geom
        slot = geom.child_slot(level, index)
        plevel, pindex = level - 1, geom.parent_index(level, index)
        if geom.is_cached_level(plevel):
            self.cached_nodes[(plevel, pindex)].child_macs[slot] = mac
            return
        puid = geom.node_uid(plevel, pindex)
        praw = self.read_recovery(self.node_blocks(puid)[0])
        _, _, corrected = ecp.decode_entries(praw, self._node_layout(plevel))
        pnode = self._decode_node(plevel, bytes(corrected))
        pnode.child_macs[slot] = mac
        pstored = self._encode_node(plevel, pnode)
        pp, pm = self.node_blocks(puid)
        self.write_recovery(pp, pstored)
        self.write_recovery(pm, pstored)
        self.node_written.add(puid)
        self._node_cache[puid] = (pstored, pnode)
        self._propagate_node_mac(plevel, pindex, self.cipher.mac_node(puid, pstored))

    def _remap_bucket(self, bucket: int) -> None:
        try:
            self.remap.add(bucket)
        except OverflowError:
            self.reliability_alarm("bucket remap table full")
        self.stats.remaps += 1
        self.bucket_faults.pop(bucket, None)
        self.materialized.discard(bucket)
        self._meta_cache.pop(bucket, None)
        self._init_meta_cache.pop(bucket, None)
        self._ensure_bucket(bucket)

    # ------------------------------------------------------------------
    # bucket image construction
    # ------------------------------------------------------------------

    def _build_bucket_image(self, bucket: int, reals: list[tuple[int, int, bytes]],
                            child_macs: list[int], enc_ctr: int,
                            rng: random.Random, prev_roffset: int = 0):
        """New bucket content after an eviction or reshuffle.

        Returns ``(meta, blocks)`` where ``blocks`` are the 13 stored
        images (metadata first). May remap the bucket when its confirmed
        faults exceed repair capacity.
        """
        reals = sorted(reals, key=lambda t: t[0])[:REAL_SLOTS]
        n = len(reals)

        roffset = 0
        entries = [EcpEntry() for _ in range(BUCKET_ECP_LAYOUT.n_entries)]
        if self.features.replication:
            faults = self.bucket_faults.get(bucket, set())
            solved = ecp.solve(faults, BUCKET_ECP_LAYOUT, prev_roffset)
            if solved is None:
                self._remap_bucket(bucket)
                solved = ecp.solve(set(), BUCKET_ECP_LAYOUT, 0)
            roffset, assign = solved
            entries = ecp.entries_from_assignment(assign)

        channels = self.slot_channels(bucket)
        plan = None
        offsets: list[int] = []
        placed = False
        for _ in range(64):
            offsets = self.permute_slots(rng)[:n]
            if not self.features.replication:
                placed = True
                break
            plan = replication.plan_replicas(
                self.meta_channel(bucket), offsets, channels,
                replication.forbidden_meta_replica_slots(entries))
            if plan is not None:
                placed = True
                break
        if not placed and self.features.replication:
            # No sound replica slot under any permutation: retire the bucket.
            self._remap_bucket(bucket)
            channels = self.slot_channels(bucket)
            roffset, entries = 0, [EcpEntry() for _ in range(BUCKET_ECP_LAYOUT.n_entries)]
            offsets = self.permute_slots(rng)[:n]
            plan = replication.plan_replicas(self.meta_channel(bucket), offsets, channels)
            if plan is None:
                self.reliability_alarm("replica placement infeasible in a fresh bucket")

        meta = BucketMetadata(
            fbit=1 if any(e.used for e in entries) else 0,
            roffset=roffset,
            ecps=entries,
            addresses=[reals[i][0] if i < n else ADDR_NONE for i in range(REAL_SLOTS)],
            path_labels=[reals[i][1] if i < n else 0 for i in range(REAL_SLOTS)],
            real_offsets=[offsets[i] if i < n else 0 for i in range(REAL_SLOTS)],
            replica_meta_offset=plan.meta_slot if plan is not None else 0,
            enc_ctr=enc_ctr,
            child_macs=list(child_macs),
        )

        plain: dict[int, bytes] = {offsets[i]: reals[i][2] for i in range(n)}
        if plan is not None:
            for i, s in enumerate(plan.real_slots):
                plain[s] = reals[i][2]

        blocks: list[bytes | None] = [None] * BUCKET_BLOCKS
        for s in range(BUCKET_SLOTS):
            if plan is not None and s == plan.meta_slot:
                continue
            blocks[1 + s] = self.build_slot_block(bucket, meta, s, plain.get(s, ZERO_DATA))

        if self.features.replication and any(e.used for e in entries):
            prov = self.cipher.crypt_payload(bucket, enc_ctr, plan.meta_slot,
                                             codec.encode_replica_payload(meta))

            def lookup(addr: int) -> int:
                rel, bit = divmod(addr, BLOCK_BITS)
                if rel == 1 + plan.meta_slot:
                    return ecp.get_bit(prov, bit)
                return ecp.get_bit(blocks[rel], bit)

            blocks[0] = self.encode_meta_stored(bucket, meta, lookup)
        else:
            blocks[0] = self.encode_meta_stored(bucket, meta)
        if plan is not None:
            blocks[1 + plan.meta_slot] = self.build_slot_block(
                bucket, meta, plan.meta_slot, codec.encode_replica_payload(meta))
        return meta, blocks

    def _meta_update_images(self, bucket: int, meta: BucketMetadata) -> tuple[bytes, bytes | None]:
        """Stored metadata plus replica images for an in-place field update.

        Data slots other than the replica are unchanged, so repair-entry
        values targeting them are kept; values targeting the metadata block
        or the replica body are refreshed against the new images.
        """
        if not self.features.replication:
            return self.encode_meta_stored(bucket, meta), None
        prov = self.cipher.crypt_payload(bucket, meta.enc_ctr, meta.replica_meta_offset,
                                         codec.encode_replica_payload(meta))

        def lookup(addr: int):
            rel, bit = divmod(addr, BLOCK_BITS)
            if rel == 1 + meta.replica_meta_offset:
                return ecp.get_bit(prov, bit)
            return None

        stored = self.encode_meta_stored(bucket, meta, lookup)
        replica = self.build_slot_block(bucket, meta, meta.replica_meta_offset,
                                        codec.encode_replica_payload(meta))
        return stored, replica

    def _write_bucket_image(self, bucket: int, meta: BucketMetadata,
                            blocks: list[bytes]) -> None:
        """Write data slots first, then the metadata block."""
        base = self.bucket_base(bucket)
        for s in range(BUCKET_SLOTS):
            self._write_block(base + 1 + s, blocks[1 + s], "data")
        self._write_block(base, blocks[0], "meta")
        self.written.add(bucket)
        self.materialized.add(bucket)
        self._meta_cache[bucket] = (blocks[0], meta)

    # ------------------------------------------------------------------
    # protocol operations
    # ------------------------------------------------------------------

    def _initial_leaf(self, addr: int) -> int:
        return self._rng("posmap", addr).randrange(self.cfg.leaves)

    def _guarded(self, fn, *args):
        """Run a protocol op; on a channel failure, recover and retry once."""
        try:
            return fn(*args)
        except _ChannelDown as e:
            self._run_channel_recovery(e.channel)
            try:
                return fn(*args)
            except _ChannelDown:
                self.reliability_alarm("channel failed again after replacement")

    def _run_channel_recovery(self, channel: int) -> None:
        self._in_recovery = True
        self._rebuild_meta = {}
        try:
            replication.recover_channel(self, channel)
        finally:
            self._in_recovery = False
            self._rebuild_meta = {}

    def access(self, addr: int, op: str, data: bytes | None = None) -> bytes:
        """One logical 64-byte access; returns the pre-operation value."""
        if not 0 <= addr < ADDR_NONE:
            raise ValueError("logical address outside the 32-bit space")
        if op not in ("read", "write"):
            raise ValueError("op must be read or write")
        if op == "write" and (data is None or len(data) != DATA_BYTES):
            raise ValueError("write needs a 64-byte payload")

        i = self.access_count
        rng = self._rng("access", i)
        if addr not in self.posmap:
            self.posmap[addr] = self._initial_leaf(addr)
        old_leaf = self.posmap[addr]
        new_leaf = rng.randrange(self.cfg.leaves)
        self.posmap[addr] = new_leaf
        if self.record_leaves:
            self.leaf_log.append(new_leaf)

        found: bytes | None = None
        if addr in self.stash:
            found = self.stash[addr][1]
        else:
            for d in range(self.cfg.cached_levels):
                blocks = self.cached_buckets.get(self.bucket_at(old_leaf, d))
                if blocks:
                    for t, (a, _, content) in enumerate(blocks):
                        if a == addr:
                            found = content
                            blocks.pop(t)
                            break
                if found is not None:
                    break

        target = addr if found is None else None
        from_tree = self._guarded(self._read_path_op, old_leaf, target, "access", i)
        if found is None:
            found = from_tree if from_tree is not None else ZERO_DATA

        prev = found
        if op == "write":
            found = bytes(data)
        self.stash[addr] = (new_leaf, found)
        if len(self.stash) > self.cfg.stash_capacity:
            raise StashOverflow(f"stash exceeded {self.cfg.stash_capacity} blocks")
        self.stats.max_stash = max(self.stats.max_stash, len(self.stash))

        self.access_count += 1
        self.stats.accesses += 1
        self._run_pending_reshuffles()
        if self.access_count % self.cfg.evict_rate == 0:
            self._guarded(self._evict_path_op)
            self._run_pending_reshuffles()
        self._pressure_relief()
        return prev

    def dummy_access(self) -> None:
        """Path read on a random leaf plus an eviction (stash relief)."""
        k = self.pressure_count
        self.pressure_count += 1
        rng = self._rng("pressure", k)
        leaf = rng.randrange(self.cfg.leaves)
        self._guarded(self._read_path_op, leaf, None, "pressure", k)
        self._run_pending_reshuffles()
        self._guarded(self._evict_path_op)
        self._run_pending_reshuffles()
        self.stats.dummy_accesses += 1

    def _pressure_relief(self) -> None:
        if len(self.stash) <= int(self.cfg.stash_high * self.cfg.stash_capacity):
            return
        low = int(self.cfg.stash_low * self.cfg.stash_capacity)
        while len(self.stash) > low:
            self.dummy_access()

    def _run_pending_reshuffles(self) -> None:
        while self.pending_reshuffles:
            bucket = min(self.pending_reshuffles)
            self.pending_reshuffles.discard(bucket)
            self._guarded(self._early_reshuffle_op, bucket)

    # -- path read --------------------------------------------------------

    def _read_path_op(self, leaf: int, target: int | None, tag: str, index: int) -> bytes | None:
        self.timeline.begin_op()
        self.stats.read_paths += 1
        rng = self._rng(tag + "/slots", index)
        path = self.path_buckets(leaf)
        metas = self._fetch_path_metadata(path)
        if self.features.flag_tree:
            pv = self._fetch_vr_path(leaf)
        else:
            pv = _PathVr({d: metas[b].vr_set for d, b in path})

        result: bytes | None = None
        consumed: list[tuple[VRSet, int]] = []
        for d, bucket in path:
            meta = metas[bucket]
            vr = pv.sets[d]
            n = meta.real_count()
            real_slots = set(meta.real_offsets[:n])
            slot = None
            is_target = False
            if target is not None:
                for t in range(n):
                    if meta.addresses[t] == target and vr.is_valid(meta.real_offsets[t]):
                        slot = meta.real_offsets[t]
                        is_target = True
                        break
            if slot is None:
                cands = [s for s in range(BUCKET_SLOTS)
                         if vr.is_valid(s) and s not in real_slots]
                if not cands:
                    # No valid dummy left: any valid non-target slot will do.
                    cands = [s for s in range(BUCKET_SLOTS) if vr.is_valid(s)]
                slot = rng.choice(cands)
            payload = self._fetch_slot_payload(bucket, slot, meta)
            if is_target:
                result = self.cipher.crypt_payload(bucket, meta.enc_ctr, slot, payload)
            consumed.append((vr, slot))

        for vr, slot in consumed:
            vr.consume(slot)

        if self.features.flag_tree:
            self._write_vr_nodes(pv)
        else:
            self._writeback_path_metadata(path, metas)

        for d, bucket in path:
            if pv.sets[d].read_ctr >= DUMMY_SLOTS:
                self.pending_reshuffles.add(bucket)
        self.timeline.end_op()
        return result

    def _writeback_path_metadata(self, path, metas) -> None:
        """Inline-flags schemes: rewrite path metadata leaf-to-root."""
        for d, bucket in reversed(path):
            meta = metas[bucket]
            stored = self.encode_meta_stored(bucket, meta)
            self._write_block(self.bucket_block(bucket, 0), stored, "meta")
            self.written.add(bucket)
            self._meta_cache[bucket] = (stored, meta)
            if not self.features.integrity:
                continue
            mac = self.cipher.mac_meta(self.meta_tag(bucket), stored)
            if d == self.cfg.cached_levels:
                self.anchor_macs[bucket] = mac
            else:
                parent = (bucket - 1) // 2
                metas[parent].child_macs[(bucket - 1) % 2] = mac

    # -- eviction -----------------------------------------------------------

    def _evict_path_op(self) -> None:
        self.timeline.begin_op()
        cfg = self.cfg
        j = self.eviction_count
        rng = self._rng("evict", j)
        leaf = self.reverse_lex_leaf(j)

        path = self.path_buckets(leaf)
        metas = self._fetch_path_metadata(path)
        pv = self._fetch_vr_path(leaf) if self.features.flag_tree else _PathVr(
            {d: metas[b].vr_set for d, b in path})

        # Read Z valid blocks per bucket; collect real contents.
        incoming: list[tuple[int, int, bytes]] = []
        for d, bucket in path:
            meta = metas[bucket]
            vr = pv.sets[d]
            n = meta.real_count()
            valid_reals = [t for t in range(n) if vr.is_valid(meta.real_offsets[t])]
            dummies = sorted(s for s in range(BUCKET_SLOTS)
                             if vr.is_valid(s) and s not in set(meta.real_offsets[:n]))
            pad = rng.sample(dummies, REAL_SLOTS - len(valid_reals))
            for t in valid_reals:
                slot = meta.real_offsets[t]
                payload = self._fetch_slot_payload(bucket, slot, meta)
                plain = self.cipher.crypt_payload(bucket, meta.enc_ctr, slot, payload)
                incoming.append((meta.addresses[t], meta.path_labels[t], plain))
            for slot in pad:
                self._fetch_slot_payload(bucket, slot, meta)

        # Last fallible read is done; move everything into the stash.
        for a, lbl, plain in incoming:
            if a in self.stash:
                raise ReliabilityFailure(f"duplicate live block {a:#x}")
            self.stash[a] = (lbl, plain)
        for d in range(cfg.cached_levels):
            for a, lbl, content in self.cached_buckets.pop(self.bucket_at(leaf, d), []):
                if a in self.stash:
                    raise ReliabilityFailure(f"duplicate live block {a:#x}")
                self.stash[a] = (lbl, content)

        # Greedy placement, deepest bucket first; smaller address wins ties.
        bits = cfg.tree_levels - 1

        def common_depth(a: int, b: int) -> int:
            x = a ^ b
            return bits if x == 0 else bits - x.bit_length()

        assigned: dict[int, list[tuple[int, int, bytes]]] = {}
        for d in range(cfg.tree_levels - 1, -1, -1):
            bucket = self.bucket_at(leaf, d)
            fits = sorted(a for a, (lbl, _) in self.stash.items()
                          if common_depth(lbl, leaf) >= d)
            take = fits[:REAL_SLOTS]
            assigned[bucket] = [(a, *self.stash.pop(a)) for a in take]

        # Plan new images deepest-first so child MACs thread upward.
        images: dict[int, tuple[BucketMetadata, list[bytes]]] = {}
        new_macs: dict[int, int] = {}
        for d in range(cfg.tree_levels - 1, cfg.cached_levels - 1, -1):
            bucket = self.bucket_at(leaf, d)
            old = metas[bucket]
            child_macs = list(old.child_macs)
            if d + 1 < cfg.tree_levels:
                child = self.bucket_at(leaf, d + 1)
                child_macs[(child - 1) % 2] = new_macs.get(child, 0)
            meta, blocks = self._build_bucket_image(
                bucket, assigned[bucket], child_macs, old.enc_ctr + 1, rng, old.roffset)
            images[bucket] = (meta, blocks)
            if self.features.integrity:
                new_macs[bucket] = self.cipher.mac_meta(self.meta_tag(bucket), blocks[0])
            if self.features.flag_tree:
                pv.sets[d].reset()

        for d in range(cfg.cached_levels):
            self.cached_buckets[self.bucket_at(leaf, d)] = assigned[self.bucket_at(leaf, d)]

        # Write children before parents, data slots before metadata.
        for d in range(cfg.tree_levels - 1, cfg.cached_levels - 1, -1):
            bucket = self.bucket_at(leaf, d)
            self._write_bucket_image(bucket, *images[bucket])
            if d == cfg.cached_levels and self.features.integrity:
                self.anchor_macs[bucket] = new_macs[bucket]

        if self.features.flag_tree:
            self._write_vr_nodes(pv)

        self.eviction_count += 1
        self.stats.evictions += 1
        self.timeline.end_op()

    # -- early reshuffle ------------------------------------------------------

    def _early_reshuffle_op(self, bucket: int) -> None:
        self.timeline.begin_op()
        cfg = self.cfg
        r = self.reshuffle_count
        rng = self._rng("reshuffle", r)
        d = self.bucket_level(bucket)

        # Verify the ancestor chain top-down; the bucket's new MAC will be
        # spliced back up the same chain afterwards. Without integrity there
        # is no chain to maintain and only the bucket itself is touched.
        ancestors: list[tuple[int, int]] = []
        metas: dict[int, BucketMetadata] = {}
        if self.features.integrity:
            for lvl in range(cfg.cached_levels, d + 1):
                anc = self._ancestor_at(bucket, d, lvl)
                if lvl == cfg.cached_levels:
                    pm = self.anchor_macs.get(anc, 0)
                else:
                    parent = (anc - 1) // 2
                    pm = metas[parent].child_macs[(anc - 1) % 2]
                meta, _ = self._fetch_metadata(anc, pm)
                metas[anc] = meta
                if lvl < d:
                    ancestors.append((lvl, anc))
        else:
            meta, _ = self._fetch_metadata(bucket, 0)
            metas[bucket] = meta
        meta = metas[bucket]

        # The bucket's valid bits: from the flag tree or the inline field.
        node_chain: list[_NodeCtx] = []
        vr: VRSet | None = None
        if self.features.flag_tree:
            geom = self.geom
            binidx = bucket - ((1 << d) - 1)
            leaf0 = binidx << (cfg.tree_levels - 1 - d)
            k, _, pos = geom.set_position(d, leaf0)
            copy = self._node_toggle
            self._node_toggle ^= 1
            parent_obj = None
            for kk in range(min(k, geom.node_levels - 1) + 1):
                jj = geom.node_index_on_path(kk, leaf0)
                if geom.is_cached_level(kk):
                    parent_obj = self.cached_nodes[(kk, jj)]
                    if kk == k:
                        vr = parent_obj.vr_sets[pos]
                    continue
                node = self._fetch_node(kk, jj, parent_obj, copy)
                node_chain.append(_NodeCtx(kk, jj, geom.node_uid(kk, jj), node,
                                           geom.child_slot(kk, jj)))
                parent_obj = node
                if kk == k:
                    vr = node.vr_sets[pos]
        else:
            vr = meta.vr_set

        # Read the Z valid blocks (reals stay in the bucket, dummies pad).
        n = meta.real_count()
        valid_reals = [t for t in range(n) if vr.is_valid(meta.real_offsets[t])]
        dummies = sorted(s for s in range(BUCKET_SLOTS)
                         if vr.is_valid(s) and s not in set(meta.real_offsets[:n]))
        pad = rng.sample(dummies, REAL_SLOTS - len(valid_reals))
        reals: list[tuple[int, int, bytes]] = []
        for t in valid_reals:
            slot = meta.real_offsets[t]
            payload = self._fetch_slot_payload(bucket, slot, meta)
            plain = self.cipher.crypt_payload(bucket, meta.enc_ctr, slot, payload)
            reals.append((meta.addresses[t], meta.path_labels[t], plain))
        for slot in pad:
            self._fetch_slot_payload(bucket, slot, meta)

        new_meta, blocks = self._build_bucket_image(
            bucket, reals, list(meta.child_macs), meta.enc_ctr + 1, rng, meta.roffset)
        self._write_bucket_image(bucket, new_meta, blocks)
        vr.reset()

        if self.features.integrity:
            self.stats.reshuffle_chain_writes += len(ancestors)
            mac = self.cipher.mac_meta(self.meta_tag(bucket), blocks[0])
            for lvl, anc in reversed(ancestors):
                child = self._ancestor_at(bucket, d, lvl + 1)
                am = metas[anc]
                am.child_macs[(child - 1) % 2] = mac
                stored, replica = self._meta_update_images(anc, am)
                self._write_block(self.bucket_block(anc, 0), stored, "meta")
                self._meta_cache[anc] = (stored, am)
                if replica is not None:
                    self._write_block(
                        self.bucket_block(anc, 1 + am.replica_meta_offset),
                        replica, "data")
                mac = self.cipher.mac_meta(self.meta_tag(anc), stored)
            top = self._ancestor_at(bucket, d, cfg.cached_levels)
            self.anchor_macs[top] = mac

        if self.features.flag_tree and node_chain:
            self._write_vr_nodes(_PathVr({}, node_chain))

        self.reshuffle_count += 1
        self.stats.reshuffles += 1
        self.timeline.end_op()

    @staticmethod
    def _ancestor_at(bucket: int, level: int, target_level: int) -> int:
        b = bucket
        for _ in range(level - target_level):
            b = (b - 1) // 2
        return b

    # ------------------------------------------------------------------
    # introspection
    # ------------------------------------------------------------------

    def stash_size(self) -> int:
        return len(self.stash)
