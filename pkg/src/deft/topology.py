"""Branched rod structure: one parent branch, child branches bound to
interior parent vertices, and the graph / padded-batch layouts derived
from it.

Vertex numbering
----------------
Global node order is the parent's vertices followed by each child's in
declaration order. Inside a child, local vertex 0 is the junction-side
vertex; it is simulated as its own vertex and held to the parent junction
vertex by the attachment constraint.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class BranchSpec:
    id: str
    n: int
    kind: str = "parent"
    junction_parent_vertex: int | None = None


@dataclass(frozen=True)
class Adjacency:
    a: np.ndarray
    degree: np.ndarray


@dataclass(frozen=True)
class PaddedLayout:
    batch_count: int
    padded_n: int
    mask: np.ndarray  # (batch_count, padded_n) bool
    lengths: np.ndarray  # real vertex count per batch row

    @property
    def edge_mask(self) -> np.ndarray:
        return self.mask[:, 1:] & self.mask[:, :-1]


@dataclass(frozen=True, eq=False)
class BdloTopology:
    branches: tuple[BranchSpec, ...]
    junctions: tuple[tuple[int, str], ...] = field(default=())

    @property
    def parent(self) -> BranchSpec:
        return self.branches[0]

    @property
    def children(self) -> tuple[BranchSpec, ...]:
        return self.branches[1:]

    @property
    def total_vertices(self) -> int:
        return sum(b.n for b in self.branches)

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    def branch_index(self, branch_id: str) -> int:
        for k, b in enumerate(self.branches):
            if b.id == branch_id:
                return k
        raise TopologyError(f"unknown branch {branch_id!r}")

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([b.n for b in self.branches])[:-1]]).astype(int)

    def node(self, branch: int, vertex: int) -> int:
        """Global node index of (branch row, local vertex)."""
        return int(self.offsets[branch]) + vertex

    @cached_property
    def junction_table(self) -> tuple[tuple[int, int], ...]:
        """(parent vertex, child batch row) for every junction, sorted by vertex."""
        rows = [(i, self.branch_index(cid)) for i, cid in self.junctions]
        return tuple(sorted(rows))

    @cached_property
    def junction_at(self) -> dict[int, int]:
        return dict(self.junction_table)

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        return {
            "branches": [{"id": b.id, "n": b.n, "kind": b.kind} for b in self.branches],
            "junctions": [{"parent_vertex": i, "child_id": c} for i, c in self.junctions],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BdloTopology":
        where = {c["child_id"]: c["parent_vertex"] for c in data.get("junctions", [])}
        specs = []
        for b in data["branches"]:
            kind = b.get("kind", "parent")
            specs.append(BranchSpec(str(b["id"]), int(b["n"]), kind,
                                    where.get(b["id"]) if kind == "child" else None))
        dangling = set(where) - {s.id for s in specs}
        if dangling:
            raise TopologyError(f"junction references missing child branch {sorted(dangling)}")
        return build_topology(specs)


def build_topology(specs) -> BdloTopology:
    """Validate branch specs and return an immutable topology."""
    specs = list(specs)
    parents = [s for s in specs if s.kind == "parent"]
    if len(parents) != 1:
        raise TopologyError(f"expected exactly one parent branch, got {len(parents)}")
    bad = [s.kind for s in specs if s.kind not in ("parent", "child")]
    if bad:
        raise TopologyError(f"unknown branch kind {bad[0]!r}")
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        # a repeated id would let a branch reference itself
        raise TopologyError("duplicate branch ids make the branch graph cyclic")
    parent = parents[0]
    children = [s for s in specs if s.kind == "child"]
    seen: set[int] = set()
    for s in specs:
        if s.n < 3:
            raise TopologyError(f"branch {s.id!r} needs at least 3 vertices, got {s.n}")
    for c in children:
        i = c.junction_parent_vertex
        if i is None:
            raise TopologyError(f"child {c.id!r} has no junction vertex")
        if not 0 < i < parent.n - 1:
            raise TopologyError(
                f"child {c.id!r} attaches at parent vertex {i}; junctions must be interior (0 < i < {parent.n - 1})")
        if i in seen:
            raise TopologyError(f"parent vertex {i} already carries a child; only three-edge junctions are supported")
        seen.add(i)
    if parent.junction_parent_vertex is not None:
        raise TopologyError("the parent branch cannot itself be attached")
    branches = (parent, *children)
    junctions = tuple((c.junction_parent_vertex, c.id) for c in children)
    return BdloTopology(branches, junctions)


def adjacency(topo: BdloTopology) -> Adjacency:
    """Vertex adjacency with self-loops: chain edges plus one link per junction."""
    n = topo.total_vertices
    a = np.eye(n)
    for k, b in enumerate(topo.branches):
        idx = topo.offsets[k] + np.arange(b.n - 1)
        a[idx, idx + 1] = 1.0
        a[idx + 1, idx] = 1.0
    for i, row in topo.junction_table:
        p, c = topo.node(0, i), topo.node(row, 0)
        a[p, c] = a[c, p] = 1.0
    return Adjacency(a, a.sum(axis=1))


def pad_layout(topo: BdloTopology) -> PaddedLayout:
    lengths = np.array([b.n for b in topo.branches])
    n_p = lengths[0]
    for b in topo.children:
        if b.n > n_p:
            raise TopologyError(f"child {b.id!r} has {b.n} vertices, more than the parent's {n_p}")
    mask = np.arange(n_p)[None, :] < lengths[:, None]
    return PaddedLayout(len(lengths), int(n_p), mask, lengths)


def single_rod(n: int, branch_id: str = "parent") -> BdloTopology:
    return build_topology([BranchSpec(branch_id, n)])


def load_topology(path) -> BdloTopology:
    return BdloTopology.from_dict(json.loads(Path(path).read_text()))


def save_topology(topo: BdloTopology, path) -> None:
    Path(path).write_text(json.dumps(topo.to_dict(), indent=2) + "\n")
