"""Geometry and path arithmetic for the packed flag tree.

Every bucket of the binary ORAM tree owns a 15-bit set of valid bits plus a
read counter. Rewriting a whole metadata block just to flip those bits is
wasteful, so the sets are packed, in binary-tree order, into block-sized
subtree nodes: a leaf node covers the bottom ``leaf_span`` binary levels
(31 sets), a non-leaf node covers ``nonleaf_span`` levels (7 sets) and
stores the MACs of its eight children. One ORAM path then touches exactly
one node per node level, and only the few nodes below the cached boundary
generate DRAM traffic.

Levels here are counted from the top: node level 0 is the root layer. When
the covered span overshoots the top of the tree, the top node layer absorbs
the slack, leaving its highest set positions unused; the arithmetic treats
the real tree as the leftmost subtree of a virtual tree extended upward by
``virtual_pad`` levels.

Set positions inside a node are level-order indices of the node's internal
binary subtree (0 is the subtree root). The entry position of every
non-leaf node on a path is a pure function of which leaf node the path
ends in, so leaf nodes store those ancestor entry positions; geometry
recomputes them here and the stored copies are checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

from .codec import BLOCK_BYTES


@dataclass(frozen=True)
class FlagTreeGeometry:
    """Shape of the packed flag tree for one ORAM tree."""

    oram_levels: int
    cached_oram_levels: int
    leaf_span: int = 5
    nonleaf_span: int = 3
    cached_node_levels: int = 2

    def __post_init__(self) -> None:
        if not 1 <= self.leaf_span <= 5:
            raise ValueError("leaf_span must be in [1, 5] (31 sets per leaf node)")
        if not 1 <= self.nonleaf_span <= 3:
            raise ValueError("nonleaf_span must be in [1, 3] (7 sets per node)")
        if self.leaf_span > self.oram_levels:
            raise ValueError("leaf node span exceeds the tree height")
        if not 0 <= self.cached_oram_levels < self.oram_levels:
            raise ValueError("cached ORAM levels out of range")
        if not 0 <= self.cached_node_levels <= self.node_levels:
            raise ValueError("cached node levels out of range")

    # -- derived shape ------------------------------------------------------

    @cached_property
    def node_levels(self) -> int:
        leaf_root = self.oram_levels - self.leaf_span
        if leaf_root <= self.cached_oram_levels:
            return 1
        return 1 + -(-(leaf_root - self.cached_oram_levels) // self.nonleaf_span)

    @cached_property
    def binary_roots(self) -> tuple[int, ...]:
        """Binary level of each node layer's subtree roots (may start < 0)."""
        leaf_root = self.oram_levels - self.leaf_span
        n = self.node_levels - 1
        top = leaf_root - n * self.nonleaf_span
        return tuple(top + k * self.nonleaf_span for k in range(n)) + (leaf_root,)

    @cached_property
    def spans(self) -> tuple[int, ...]:
        return (self.nonleaf_span,) * (self.node_levels - 1) + (self.leaf_span,)

    @property
    def virtual_pad(self) -> int:
        return max(0, -self.binary_roots[0])

    @cached_property
    def node_counts(self) -> tuple[int, ...]:
        return tuple(1 << max(b, 0) for b in self.binary_roots)

    @cached_property
    def level_offsets(self) -> tuple[int, ...]:
        offs = [0]
        for c in self.node_counts:
            offs.append(offs[-1] + c)
        return tuple(offs)

    @property
    def total_nodes(self) -> int:
        return self.level_offsets[-1]

    @property
    def leaf_count(self) -> int:
        return 1 << (self.oram_levels - 1)

    @property
    def leaves_per_leaf_node(self) -> int:
        return 1 << (self.leaf_span - 1)

    def node_uid(self, level: int, index: int) -> int:
        return self.level_offsets[level] + index

    def is_cached_level(self, level: int) -> bool:
        return level < self.cached_node_levels

    @property
    def dram_path_nodes(self) -> int:
        """DRAM-resident nodes touched per path access."""
        return self.node_levels - self.cached_node_levels

    # -- path arithmetic ----------------------------------------------------

    def node_level_of(self, oram_level: int) -> int:
        """Node layer whose band of binary levels contains ``oram_level``."""
        roots = self.binary_roots
        for k in range(self.node_levels - 1, -1, -1):
            if oram_level >= roots[k]:
                return k
        raise ValueError(f"ORAM level {oram_level} below the covered range")

    def node_index_on_path(self, level: int, leaf: int) -> int:
        b = self.binary_roots[level]
        if b <= 0:
            return 0
        return leaf >> (self.oram_levels - 1 - b)

    def set_position(self, oram_level: int, leaf: int) -> tuple[int, int, int]:
        """Locate the VR set of the path's bucket at ``oram_level``.

        Returns ``(node_level, node_index, internal_position)``.
        """
        k = self.node_level_of(oram_level)
        b = self.binary_roots[k]
        j = self.node_index_on_path(k, leaf)
        depth = oram_level - b
        anc = leaf >> (self.oram_levels - 1 - oram_level)
        within = anc - (j << depth)
        return k, j, (1 << depth) - 1 + within

    def entry_position(self, level: int, leaf: int) -> int:
        """Internal position where the path enters node layer ``level``."""
        bottom = self.binary_roots[level] + self.spans[level] - 1
        return self.set_position(bottom, leaf)[2]

    @staticmethod
    def internal_chain(pos: int) -> list[int]:
        """Level-order positions from an entry up to the subtree root."""
        chain = [pos]
        while pos:
            pos = (pos - 1) >> 1
            chain.append(pos)
        return chain

    def path_for_leaf(self, leaf: int) -> list[tuple[int, int, int]]:
        """Per node layer, root to leaf: ``(level, node_index, entry_pos)``."""
        return [
            (k, self.node_index_on_path(k, leaf), self.entry_position(k, leaf))
            for k in range(self.node_levels)
        ]

    def ancestor_entry_positions(self, leaf_node_index: int) -> list[int]:
        """Entry positions of every non-leaf layer for paths through one leaf node.

        These are the values each leaf node stores, one per non-leaf layer,
        top layer first.
        """
        leaf = leaf_node_index << (self.leaf_span - 1)
        return [self.entry_position(k, leaf) for k in range(self.node_levels - 1)]

    def child_slot(self, level: int, child_index: int) -> int:
        """Position of a node's MAC inside its parent's child-MAC array."""
        if level == 0:
            raise ValueError("the root layer has no parent")
        span = self.spans[level - 1]
        return child_index - ((child_index >> span) << span)

    def parent_index(self, level: int, index: int) -> int:
        if level == 0:
            raise ValueError("the root layer has no parent")
        return index >> self.spans[level - 1]

    # -- reporting ----------------------------------------------------------

    def covered_vr_positions(self, level: int, node_index: int) -> list[tuple[int, int]]:
        """(internal position, ORAM level) pairs that are real DRAM buckets."""
        b = self.binary_roots[level]
        out = []
        for depth in range(self.spans[level]):
            d = b + depth
            if d < max(self.cached_oram_levels, 0):
                continue
            if d >= self.oram_levels:
                continue
            base = (1 << depth) - 1
            for within in range(1 << depth):
                out.append((base + within, d))
        return out

    def storage_report(self) -> dict:
        """Exact node counts and one-copy size from the geometry."""
        counts = list(self.node_counts)
        dram_levels = list(range(self.cached_node_levels, self.node_levels))
        dram_nodes = sum(counts[k] for k in dram_levels)
        dram_nonleaf = sum(counts[k] for k in dram_levels if k != self.node_levels - 1)
        return {
            "node_levels": self.node_levels,
            "node_counts_per_level": counts,
            "total_nodes": self.total_nodes,
            "bytes_one_copy": self.total_nodes * BLOCK_BYTES,
            "cached_nodes": sum(counts[: self.cached_node_levels]),
            "cached_bytes": sum(counts[: self.cached_node_levels]) * BLOCK_BYTES,
            "dram_nodes": dram_nodes,
            "dram_nonleaf_nodes": dram_nonleaf,
            "dram_path_nodes": self.dram_path_nodes,
        }
