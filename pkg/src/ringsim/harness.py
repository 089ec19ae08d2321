"""Trace-driven simulation harness.

Wires a scheme configuration to the controller, feeds it a trace (parsed
from file or synthesized), applies scheduled faults and attacks, and
produces a stable, versioned statistics report.

Trace format: one operation per line, ``R <hex-addr>`` or ``W <hex-addr>``,
addresses being 64-byte-block logical addresses.

Schemes: ``baseline`` (plain Ring ORAM), ``ri`` (adds the integrity tree),
``rim`` (adds the packed flag tree), ``rimr`` (adds replication, mirroring
and permanent-fault repair), ``rimre`` (``rimr`` plus periodic error
injection).
"""

from __future__ import annotations

import io
import json
import random
from dataclasses import asdict, dataclass, field, fields

from .codec import ADDR_NONE, BLOCK_BITS, BUCKET_BLOCKS
from .dram import DramGeometry, DramModel, FaultRecord, map_address
from .integrity import IntegrityViolation, ReliabilityFailure
from .oram import SCHEME_FEATURES, OramConfig, OramController

SCHEMA_VERSION = 1

EXIT_CLEAN = 0
EXIT_INTEGRITY = 2
EXIT_RELIABILITY = 3


@dataclass
class SimConfig:
    """Flat run configuration; every field can come from a config file."""

    scheme: str = "rimr"
    seed: int = 0
    tree_levels: int = 23
    cached_levels: int = 7
    evict_rate: int = 5
    stash_capacity: int = 8192
    real_utilization: float = 0.8
    mac_units: int = 4
    block_ticks: int = 32
    leaf_span: int = 5
    nonleaf_span: int = 3
    cached_node_levels: int = 2
    spare_buckets: int = 1084
    spare_nodes: int = 64
    channels: int = 2
    error_interval_ticks: int = 8_000_000

    def __post_init__(self) -> None:
        if self.scheme not in SCHEME_FEATURES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @classmethod
    def from_file(cls, path: str) -> "SimConfig":
        values: dict[str, object] = {}
        types = {f.name: f.type for f in fields(cls)}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, _, val = line.partition("=")
                key, val = key.strip(), val.strip()
                if key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                if key == "scheme":
                    values[key] = val
                elif types[key] == "float":
                    values[key] = float(val)
                else:
                    values[key] = int(val, 0)
        return cls(**values)

    def oram_config(self) -> OramConfig:
        return OramConfig(
            tree_levels=self.tree_levels,
            cached_levels=self.cached_levels,
            evict_rate=self.evict_rate,
            stash_capacity=self.stash_capacity,
            real_utilization=self.real_utilization,
            spare_buckets=self.spare_buckets,
            spare_nodes=self.spare_nodes,
            block_ticks=self.block_ticks,
            mac_units=self.mac_units,
            leaf_span=self.leaf_span,
            nonleaf_span=self.nonleaf_span,
            cached_node_levels=self.cached_node_levels,
        )


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


def parse_trace(text: str) -> list[tuple[str, int]]:
    """Parse ``R <hex>`` / ``W <hex>`` lines; raises with the line number."""
    ops = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("R", "W"):
            raise ValueError(f"trace line {lineno}: expected 'R <hex-addr>' or 'W <hex-addr>'")
        try:
            addr = int(parts[1], 16)
        except ValueError:
            raise ValueError(f"trace line {lineno}: bad address {parts[1]!r}") from None
        if not 0 <= addr < ADDR_NONE:
            raise ValueError(f"trace line {lineno}: address out of range")
        ops.append((parts[0], addr))
    return ops


def format_trace(ops: list[tuple[str, int]]) -> str:
    return "\n".join(f"{op} {addr:x}" for op, addr in ops) + "\n"


def generate_trace(kind: str, n: int, footprint: int, seed: int) -> list[tuple[str, int]]:
    """Reproducible synthetic workload over ``footprint`` distinct blocks."""
    if n <= 0:
        raise ValueError("trace length must be positive")
    if not 0 < footprint < ADDR_NONE:
        raise ValueError("footprint out of range")
    rng = random.Random(seed)
    if kind == "uniform":
        addrs = [rng.randrange(footprint) for _ in range(n)]
    elif kind == "zipfian":
        weights = [1.0 / (k + 1) for k in range(footprint)]
        addrs = rng.choices(range(footprint), weights=weights, k=n)
    else:
        raise ValueError(f"unknown trace kind {kind!r}")
    return [("W" if rng.random() < 0.5 else "R", a) for a in addrs]


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------


@dataclass
class AttackSpec:
    """A scheduled adversarial mutation of DRAM content.

    ``tamper_bit`` flips one bit of a metadata block on the next access's
    path; ``replay_block`` restores a stale (boot-time) image of such a
    block; ``swap_blocks`` exchanges two sibling metadata blocks.
    """

    kind: str
    at_access: int

    def __post_init__(self) -> None:
        if self.kind not in ("tamper_bit", "replay_block", "swap_blocks"):
            raise ValueError(f"unknown attack kind {self.kind!r}")


def parse_attacks(spec: str) -> list[AttackSpec]:
    """Parse ``kind@access[,kind@access...]``."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, at = part.partition("@")
        if not at:
            raise ValueError(f"attack {part!r}: expected kind@access-index")
        out.append(AttackSpec(kind, int(at)))
    return sorted(out, key=lambda a: a.at_access)


def _written_path_buckets(ctrl: OramController, addr: int) -> list[int]:
    leaf = ctrl.posmap.get(addr)
    if leaf is None:
        leaf = ctrl._initial_leaf(addr)
    return [b for _, b in ctrl.path_buckets(leaf) if b in ctrl.written]


def apply_attack(ctrl: OramController, attack: AttackSpec, next_addr: int,
                 rng: random.Random) -> bool:
    """Mutate DRAM ahead of the access to ``next_addr``.

    Targets a metadata block on that access's path so the mutation is
    guaranteed to be read. Returns False when no effective mutation was
    possible yet (nothing written on the path).
    """
    dram = ctrl.dram
    buckets = _written_path_buckets(ctrl, next_addr)
    if not buckets:
        return False
    if attack.kind == "tamper_bit":
        bucket = rng.choice(buckets)
        idx = ctrl.bucket_block(bucket, 0)
        bit = rng.randrange(BLOCK_BITS)
        blk = bytearray(dram.peek(idx))
        blk[bit >> 3] ^= 0x80 >> (bit & 7)
        dram.write_block(idx, bytes(blk))
        return True
    if attack.kind == "replay_block":
        for bucket in rng.sample(buckets, len(buckets)):
            idx = ctrl.bucket_block(bucket, 0)
            stale = ctrl.initial_meta_stored(bucket)
            if dram.peek(idx) != stale:
                dram.write_block(idx, stale)
                return True
        return False
    # swap_blocks: exchange a path metadata block with its sibling's.
    for bucket in rng.sample(buckets, len(buckets)):
        if bucket == 0:
            continue
        sibling = bucket + 1 if bucket % 2 == 1 else bucket - 1
        a, b = ctrl.bucket_block(bucket, 0), ctrl.bucket_block(sibling, 0)
        blk_a, blk_b = dram.peek(a), dram.peek(b)
        if blk_a == blk_b:
            continue
        dram.write_block(a, blk_b)
        dram.write_block(b, blk_a)
        return True
    return False


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class StatsReport:
    """Versioned flat run report; field names are the stable schema."""

    schema_version: int
    scheme: str
    seed: int
    tree_levels: int
    outcome: str
    accesses: int
    dummy_accesses: int
    read_paths: int
    evictions: int
    reshuffles: int
    reshuffle_pct: float
    reads_meta: int
    reads_data: int
    reads_node_primary: int
    reads_node_mirror: int
    reads_total: int
    writes_meta: int
    writes_data: int
    writes_node_primary: int
    writes_node_mirror: int
    writes_total: int
    recovery_reads: int
    recovery_writes: int
    mac_submissions: int
    mac_wait_total: int
    detections_meta: int
    detections_data: int
    detections_node: int
    detections_channel: int
    detections_total: int
    recoveries_case1: int
    recoveries_case2: int
    recoveries_case3: int
    mac_trials: int
    remaps: int
    node_relocations: int
    classified_transient: int
    classified_permanent: int
    alarms: int
    max_stash: int
    final_stash: int
    ticks: int
    events: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def to_csv(self) -> str:
        d = asdict(self)
        d.pop("events")
        buf = io.StringIO()
        buf.write(",".join(d.keys()) + "\n")
        buf.write(",".join(str(v) for v in d.values()) + "\n")
        return buf.getvalue()

    @classmethod
    def csv_columns(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "events"]


# ---------------------------------------------------------------------------
# simulation driver
# ---------------------------------------------------------------------------


class Simulation:
    """One end-to-end run: trace in, report out."""

    def __init__(self, config: SimConfig, trace: list[tuple[str, int]],
                 faults: list[FaultRecord] | None = None,
                 attacks: list[AttackSpec] | None = None):
        self.config = config
        self.trace = trace
        self.faults = sorted(faults or [], key=lambda r: r.tick)
        self.attacks = sorted(attacks or [], key=lambda a: a.at_access)
        self.outcome = "clean"

        cfg = config.oram_config()
        footprint = len({a for _, a in trace})
        if footprint > cfg.logical_capacity:
            raise ValueError(
                f"trace footprint {footprint} exceeds capacity "
                f"{cfg.logical_capacity} at {cfg.real_utilization:.0%} utilization")
        features = SCHEME_FEATURES[config.scheme]
        if config.channels != 2 and features.replication:
            raise ValueError("replication schemes require two channels")
        self.controller = OramController(
            cfg, features, seed=config.seed,
            dram=self._make_dram(cfg, features),
        )
        self._attack_rng = random.Random(config.seed ^ 0xA77AC4)
        self._fault_pos = 0
        self._next_error = config.error_interval_ticks

    def _make_dram(self, cfg: OramConfig, features) -> DramModel:
        from .oram import AddressMap

        amap = AddressMap(cfg, cfg.flag_geometry() if features.flag_tree else None)
        geom = DramGeometry.for_blocks(amap.total_blocks, channels=self.config.channels)
        return DramModel(geom, self.config.seed)

    # -- scheduled interference -----------------------------------------

    def _apply_due_faults(self) -> None:
        ctrl = self.controller
        while (self._fault_pos < len(self.faults)
               and self.faults[self._fault_pos].tick <= ctrl.timeline.clock):
            ctrl.dram.inject_fault(self.faults[self._fault_pos])
            self._fault_pos += 1

    def _apply_error_injection(self) -> None:
        """rimre: one transient error per configured tick interval."""
        ctrl = self.controller
        rng = self._attack_rng
        while ctrl.timeline.clock >= self._next_error:
            self._next_error += self.config.error_interval_ticks
            if not ctrl.materialized:
                continue
            bucket = rng.choice(sorted(ctrl.materialized))
            rel = rng.randrange(BUCKET_BLOCKS)
            idx = ctrl.bucket_block(bucket, rel)
            coords = map_address(idx, ctrl.dram.geometry)
            ctrl.dram.inject_fault(FaultRecord(
                "transient", "bit", (*coords, rng.randrange(BLOCK_BITS))))

    def run(self) -> StatsReport:
        ctrl = self.controller
        attack_pos = 0
        try:
            for i, (op, addr) in enumerate(self.trace):
                self._apply_due_faults()
                if self.config.scheme == "rimre":
                    self._apply_error_injection()
                while (attack_pos < len(self.attacks)
                       and self.attacks[attack_pos].at_access <= i):
                    apply_attack(ctrl, self.attacks[attack_pos], addr, self._attack_rng)
                    attack_pos += 1
                if op == "R":
                    ctrl.access(addr, "read")
                else:
                    ctrl.access(addr, "write", self._write_payload(addr, i))
        except IntegrityViolation:
            self.outcome = "integrity_violation"
        except ReliabilityFailure:
            self.outcome = "reliability_failure"
        return self.report()

    @staticmethod
    def _write_payload(addr: int, i: int) -> bytes:
        return addr.to_bytes(8, "little") + i.to_bytes(8, "little") + bytes(48)

    def report(self) -> StatsReport:
        ctrl = self.controller
        s = ctrl.stats
        rp = s.read_paths
        return StatsReport(
            schema_version=SCHEMA_VERSION,
            scheme=self.config.scheme,
            seed=self.config.seed,
            tree_levels=self.config.tree_levels,
            outcome=self.outcome,
            accesses=s.accesses,
            dummy_accesses=s.dummy_accesses,
            read_paths=s.read_paths,
            evictions=s.evictions,
            reshuffles=s.reshuffles,
            reshuffle_pct=round(s.reshuffles / rp, 6) if rp else 0.0,
            reads_meta=s.reads["meta"],
            reads_data=s.reads["data"],
            reads_node_primary=s.reads["node_primary"],
            reads_node_mirror=s.reads["node_mirror"],
            reads_total=s.total_reads,
            writes_meta=s.writes["meta"],
            writes_data=s.writes["data"],
            writes_node_primary=s.writes["node_primary"],
            writes_node_mirror=s.writes["node_mirror"],
            writes_total=s.total_writes,
            recovery_reads=s.recovery_reads,
            recovery_writes=s.recovery_writes,
            mac_submissions=ctrl.pool.submissions,
            mac_wait_total=ctrl.pool.total_wait,
            detections_meta=s.detections["meta"],
            detections_data=s.detections["data"],
            detections_node=s.detections["node"],
            detections_channel=s.detections["channel"],
            detections_total=s.total_detections,
            recoveries_case1=s.recoveries["case1"],
            recoveries_case2=s.recoveries["case2"],
            recoveries_case3=s.recoveries["case3"],
            mac_trials=s.mac_trials,
            remaps=s.remaps,
            node_relocations=s.node_relocations,
            classified_transient=s.classified["transient"],
            classified_permanent=s.classified["permanent"],
            alarms=s.alarms,
            max_stash=s.max_stash,
            final_stash=len(ctrl.stash),
            ticks=ctrl.timeline.clock,
            events=[{"kind": e.kind, "bucket": e.bucket, "level": e.level,
                     "cause": e.cause} for e in s.events[:100]],
        )

    @property
    def exit_code(self) -> int:
        if self.outcome == "integrity_violation":
            return EXIT_INTEGRITY
        if self.outcome == "reliability_failure":
            return EXIT_RELIABILITY
        return EXIT_CLEAN
