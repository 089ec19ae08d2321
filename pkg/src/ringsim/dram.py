"""Bit-level simulated multi-channel ECC DRAM.

Storage is a sparse map over a flat block address space; unwritten blocks
read as zeros. The address mapping follows a row:bank:column:rank:channel
order, so the channel is the fastest-varying block-level dimension and the
thirteen blocks of one bucket alternate channels. Faults are modeled as

* permanent stuck-at bits (or whole stuck regions for coarse granularities),
  which override stored data on every read,
* one-shot transient corruptions, cleared once the affected block is read,
* whole-channel failures, whose reads return flagged pseudorandom garbage.

No DRAM command timing is modeled here; the latency proxy lives in the
harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import _kernels as kernels
from .codec import BLOCK_BITS, BLOCK_BYTES

GRANULARITIES = ("bit", "word", "column", "row", "bank", "channel")
WORD_BITS = 64
WORDS_PER_BLOCK = BLOCK_BITS // WORD_BITS


class Coords(NamedTuple):
    channel: int
    dimm: int
    rank: int
    bank: int
    row: int
    column: int


@dataclass(frozen=True)
class DramGeometry:
    """Block-granularity DRAM organization; one column holds one 72B block."""

    channels: int = 2
    dimms_per_channel: int = 1
    ranks_per_dimm: int = 2
    banks: int = 8
    rows: int = 2048
    columns: int = 128

    def __post_init__(self) -> None:
        for name in ("channels", "dimms_per_channel", "ranks_per_dimm", "banks", "rows", "columns"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def capacity_blocks(self) -> int:
        return (
            self.channels
            * self.dimms_per_channel
            * self.ranks_per_dimm
            * self.banks
            * self.rows
            * self.columns
        )

    @classmethod
    def for_blocks(cls, n: int, **kw) -> "DramGeometry":
        """Smallest geometry (by row count) covering ``n`` blocks."""
        g = cls(rows=1, **kw)
        per_row = g.capacity_blocks
        rows = max(1, -(-n // per_row))
        return cls(rows=rows, **kw)


def map_address(block_index: int, geometry: DramGeometry) -> Coords:
    """Bijective linear-block-index to physical-coordinate mapping."""
    if not 0 <= block_index < geometry.capacity_blocks:
        raise ValueError(f"block index {block_index} outside capacity {geometry.capacity_blocks}")
    idx, channel = divmod(block_index, geometry.channels)
    idx, dimm = divmod(idx, geometry.dimms_per_channel)
    idx, rank = divmod(idx, geometry.ranks_per_dimm)
    idx, column = divmod(idx, geometry.columns)
    row, bank = divmod(idx, geometry.banks)
    return Coords(channel, dimm, rank, bank, row, column)


def linear_index(coords: Coords, geometry: DramGeometry) -> int:
    idx = coords.row
    idx = idx * geometry.banks + coords.bank
    idx = idx * geometry.columns + coords.column
    idx = idx * geometry.ranks_per_dimm + coords.rank
    idx = idx * geometry.dimms_per_channel + coords.dimm
    idx = idx * geometry.channels + coords.channel
    return idx


@dataclass
class FaultRecord:
    """One injected fault; ``coords`` length depends on granularity.

    Coordinate layout (in order): bit/word take
    ``(channel, dimm, rank, bank, row, column, bit-or-word-index)``; row takes
    ``(channel, dimm, rank, bank, row)``; column takes
    ``(channel, dimm, rank, bank, column)``; bank takes
    ``(channel, dimm, rank, bank)``; channel takes ``(channel,)``.
    """

    kind: str
    granularity: str
    coords: tuple[int, ...]
    stuck_value: int | None = None
    tick: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("transient", "permanent"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")


@dataclass
class _Region:
    granularity: str
    coords: tuple[int, ...]
    salt: int
    consumed: set[int] = field(default_factory=set)

    def matches(self, c: Coords) -> bool:
        ch, dimm, rank, bank, row, col = c
        g = self.granularity
        if g == "channel":
            return ch == self.coords[0]
        if (ch, dimm, rank, bank) != self.coords[:4]:
            return False
        if g == "bank":
            return True
        if g == "row":
            return row == self.coords[4]
        return col == self.coords[4]  # column


class DramModel:
    """One simulated memory system instance. Single-threaded."""

    def __init__(self, geometry: DramGeometry, seed: int = 0):
        self.geometry = geometry
        self._capacity = geometry.capacity_blocks
        self._channels = geometry.channels
        self.seed = seed
        self._store: dict[int, bytes] = {}
        self._stuck: dict[int, list[tuple[int, int]]] = {}
        self._transient: dict[int, int] = {}
        self._perm_regions: list[_Region] = []
        self._trans_regions: list[_Region] = []
        self.failed_channels: set[int] = set()
        self._garbage_key = kernels.prf_block(b"", b"dram-garbage" + seed.to_bytes(8, "little"))[:32]
        self._salt_ctr = 0
        self.reads = 0
        self.writes = 0

    # -- helpers -----------------------------------------------------------

    def channel_of(self, block_index: int) -> int:
        return block_index % self._channels

    def _garbage(self, salt: int, block_index: int) -> bytes:
        msg = salt.to_bytes(8, "little") + block_index.to_bytes(8, "little")
        return (
            kernels.prf_block(self._garbage_key, b"a" + msg)
            + kernels.prf_block(self._garbage_key, b"b" + msg)[:8]
        )

    def channel_failed(self, block_index: int) -> bool:
        return self.channel_of(block_index) in self.failed_channels

    # -- data path ---------------------------------------------------------

    def write_block(self, block_index: int, data: bytes) -> None:
        if len(data) != BLOCK_BYTES:
            raise ValueError("block must be 72 bytes")
        if not 0 <= block_index < self._capacity:
            raise ValueError("block index outside capacity")
        self._store[block_index] = bytes(data)
        self.writes += 1

    def read_block(self, block_index: int) -> bytes:
        """Stored bits with faults applied; garbage if the channel is down."""
        if not 0 <= block_index < self._capacity:
            raise ValueError("block index outside capacity")
        self.reads += 1
        if self.failed_channels and block_index % self._channels in self.failed_channels:
            return self._garbage(0, block_index)
        raw = self._store.get(block_index, b"\x00" * BLOCK_BYTES)
        coords = None

        for region in self._perm_regions:
            coords = coords or map_address(block_index, self.geometry)
            if region.matches(coords):
                # A dead region returns stable garbage: stuck, not noisy.
                raw = self._garbage(region.salt, block_index)
        stuck = self._stuck.get(block_index)
        if stuck:
            x = int.from_bytes(raw, "big")
            for bit, val in stuck:
                pos = BLOCK_BITS - 1 - bit
                if val:
                    x |= 1 << pos
                else:
                    x &= ~(1 << pos)
            raw = x.to_bytes(BLOCK_BYTES, "big")

        mask = self._transient.pop(block_index, 0)
        for region in self._trans_regions:
            if block_index not in region.consumed:
                coords = coords or map_address(block_index, self.geometry)
                if region.matches(coords):
                    region.consumed.add(block_index)
                    mask ^= int.from_bytes(self._garbage(region.salt, block_index), "big")
        if mask:
            x = int.from_bytes(raw, "big") ^ mask
            raw = x.to_bytes(BLOCK_BYTES, "big")
        return raw

    def peek(self, block_index: int) -> bytes:
        """Stored content without fault application or accounting (test aid)."""
        return self._store.get(block_index, b"\x00" * BLOCK_BYTES)

    # -- fault injection ----------------------------------------------------

    def _block_of(self, coords: Iterable[int]) -> int:
        return linear_index(Coords(*coords), self.geometry)

    def inject_fault(self, rec: FaultRecord) -> None:
        g = rec.granularity
        if g == "channel":
            ch = rec.coords[0]
            if rec.kind == "permanent":
                self.fail_channel(ch)
            else:
                self._salt_ctr += 1
                self._trans_regions.append(_Region(g, rec.coords, self._salt_ctr))
            return
        if g in ("bank", "row", "column"):
            self._salt_ctr += 1
            region = _Region(g, rec.coords, self._salt_ctr)
            if rec.kind == "permanent":
                self._perm_regions.append(region)
            else:
                self._trans_regions.append(region)
            return

        block = self._block_of(rec.coords[:6])
        idx = rec.coords[6]
        if g == "bit":
            bits = [idx]
        else:  # word
            bits = range(idx * WORD_BITS, (idx + 1) * WORD_BITS)
        if rec.kind == "permanent":
            stuck = self._stuck.setdefault(block, [])
            for b in bits:
                stuck.append((b, rec.stuck_value if rec.stuck_value is not None else 1))
        else:
            mask = self._transient.get(block, 0)
            for b in bits:
                mask ^= 1 << (BLOCK_BITS - 1 - b)
            self._transient[block] = mask

    def add_stuck_bit(self, block_index: int, bit: int, value: int) -> None:
        """Directly mark one cell permanently stuck (test/controller aid)."""
        self._stuck.setdefault(block_index, []).append((bit, value))

    def stuck_bits(self, block_index: int) -> list[tuple[int, int]]:
        return list(self._stuck.get(block_index, ()))

    def fail_channel(self, channel: int) -> None:
        if not 0 <= channel < self.geometry.channels:
            raise ValueError("no such channel")
        self.failed_channels.add(channel)

    def replace_channel(self, channel: int) -> None:
        """Swap in a replacement DIMM: clears the failure and channel faults."""
        self.failed_channels.discard(channel)
        pred = lambda idx: self.channel_of(idx) == channel
        for d in (self._stuck, self._transient):
            for idx in [i for i in d if pred(i)]:
                del d[idx]
        for idx in [i for i in self._store if pred(i)]:
            del self._store[idx]
        self._perm_regions = [r for r in self._perm_regions if not (r.granularity != "channel" and r.coords[0] == channel)]
        self._trans_regions = [r for r in self._trans_regions if r.coords[0] != channel]

    def sample_permanent_faults(self, rate: float, seed: int,
                                start_block: int = 0, n_blocks: int | None = None) -> int:
        """Mark each bit in the range independently faulty with ``rate``.

        Returns the number of faults placed. Stuck values are sampled 0/1.
        """
        if not 0.0 <= rate <= 1.0:
            raise ValueError("rate must be a probability")
        if n_blocks is None:
            n_blocks = self.geometry.capacity_blocks - start_block
        nbits = n_blocks * BLOCK_BITS
        rng = np.random.default_rng(seed)
        count = int(rng.binomial(nbits, rate)) if rate > 0 else 0
        if count:
            positions = rng.choice(nbits, size=count, replace=False)
            values = rng.integers(0, 2, size=count)
            for pos, val in zip(positions.tolist(), values.tolist()):
                block, bit = divmod(pos, BLOCK_BITS)
                self.add_stuck_bit(start_block + block, bit, int(val))
        return count


def parse_fault_schedule(text: str) -> list[FaultRecord]:
    """Parse the fault schedule file format.

    One record per line::

        <tick> <transient|permanent> <granularity> <coords...> [stuck_value]

    Blank lines and ``#`` comments are ignored. For permanent bit/word
    faults the trailing value is the stuck value (default 1).
    """
    n_coords = {"bit": 7, "word": 7, "column": 5, "row": 5, "bank": 4, "channel": 1}
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            tick = int(parts[0])
            kind, gran = parts[1], parts[2]
            want = n_coords[gran]
            coords = tuple(int(x) for x in parts[3 : 3 + want])
            if len(coords) != want:
                raise ValueError("missing coordinates")
            stuck = int(parts[3 + want]) if len(parts) > 3 + want else None
            records.append(FaultRecord(kind, gran, coords, stuck, tick))
        except (KeyError, ValueError, IndexError) as e:
            raise ValueError(f"fault schedule line {lineno}: {line!r}: {e}") from None
    records.sort(key=lambda r: r.tick)
    return records
