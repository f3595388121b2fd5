"""Array-backed octree of neurons with per-kind vacant-element weights.

Nodes live in flat numpy arrays (index 0 is the root, children always have a
larger index than their parent).  Each node stores, for both element kinds,
the summed vacant count and the weighted centroid of the neurons below it.
Empty octants are not stored; children are addressed in Morton order
(octant = bx | by << 1 | bz << 2).

Nodes are also identified by a handle ``(depth, ix, iy, iz)``: the cell
coordinates of the node's box at its depth, relative to the global bounds.
Handles are what simulated ranks exchange.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .geometry import Box3
from .population import ElementKind, Neuron, Population, as_population

MAX_DEPTH = 200


class TreeError(ValueError):
    pass


@dataclass
class ExpansionCounter:
    nodes_inspected: int = 0
    stack_pushes: int = 0

    @property
    def work(self) -> int:
        return self.nodes_inspected + self.stack_pushes


@njit(cache=True)
def _split(lo, hi):
    return (lo + hi) * 0.5


@njit(cache=True)
def _build_kernel(pos, ids, root_lo, root_hi, root_depth, root_cell, cap):
    n = pos.shape[0]
    child = np.full((cap, 8), -1, np.int64)
    parent = np.full(cap, -1, np.int64)
    leaf_id = np.full(cap, -1, np.int64)
    leaf_row = np.full(cap, -1, np.int64)
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    depth = np.empty(cap, np.int64)
    cell = np.empty((cap, 3), np.int64)
    count = np.zeros(cap, np.int64)
    start = np.empty(cap, np.int64)
    end = np.empty(cap, np.int64)
    perm = np.arange(n)
    tmp = np.empty(n, np.int64)
    octant = np.empty(n, np.int64)
    stack = np.empty(cap, np.int64)
    mid = np.empty(3)
    per = np.zeros(8, np.int64)
    off = np.zeros(8, np.int64)

    lo[0] = root_lo
    hi[0] = root_hi
    depth[0] = root_depth
    cell[0] = root_cell
    start[0] = 0
    end[0] = n
    nn = 1
    stack[0] = 0
    sp = 1
    status = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = end[node]
        count[node] = e - s
        if e - s == 1:
            leaf_id[node] = ids[perm[s]]
            leaf_row[node] = perm[s]
            continue
        if depth[node] - root_depth >= MAX_DEPTH:
            status = -2
            break
        degenerate = False
        for a in range(3):
            mid[a] = _split(lo[node, a], hi[node, a])
            if not (lo[node, a] < mid[a] < hi[node, a]):
                degenerate = True
        if degenerate:
            status = -2
            break
        per[:] = 0
        for i in range(s, e):
            r = perm[i]
            o = 0
            if pos[r, 0] >= mid[0]:
                o |= 1
            if pos[r, 1] >= mid[1]:
                o |= 2
            if pos[r, 2] >= mid[2]:
                o |= 4
            octant[i] = o
            per[o] += 1
        acc = s
        for o in range(8):
            off[o] = acc
            acc += per[o]
        for i in range(s, e):
            o = octant[i]
            tmp[off[o]] = perm[i]
            off[o] += 1
        for i in range(s, e):
            perm[i] = tmp[i]
        acc = s
        for o in range(8):
            if per[o] == 0:
                continue
            if nn >= cap:
                status = -1
                break
            c = nn
            nn += 1
            child[node, o] = c
            parent[c] = node
            depth[c] = depth[node] + 1
            for a in range(3):
                bit = (o >> a) & 1
                cell[c, a] = 2 * cell[node, a] + bit
                if bit:
                    lo[c, a] = mid[a]
                    hi[c, a] = hi[node, a]
                else:
                    lo[c, a] = lo[node, a]
                    hi[c, a] = mid[a]
            start[c] = acc
            end[c] = acc + per[o]
            acc += per[o]
            stack[sp] = c
            sp += 1
        if status != 0:
            break
    return status, nn, child, parent, leaf_id, leaf_row, lo, hi, depth, cell, count


@njit(cache=True)
def refresh_summaries(child, leaf_row, vacant, positions, weight, centroid, n_nodes):
    """Recompute per-kind weights and centroids bottom-up.

    Leaves (``leaf_row >= 0``) read the population arrays; inner nodes sum
    their children in Morton order.  Nodes with neither children nor a row
    (remote stubs, branch placeholders) keep their preset values.
    Returns the number of nodes touched.
    """
    touched = 0
    for node in range(n_nodes - 1, -1, -1):
        r = leaf_row[node]
        if r >= 0:
            for k in range(2):
                w = vacant[r, k]
                weight[node, k] = w
                for a in range(3):
                    centroid[node, k, a] = positions[r, a] if w > 0 else np.nan
            touched += 1
            continue
        inner = False
        for o in range(8):
            if child[node, o] >= 0:
                inner = True
        if not inner:
            continue
        touched += 1
        for k in range(2):
            w = 0
            ax = 0.0
            ay = 0.0
            az = 0.0
            for o in range(8):
                c = child[node, o]
                if c < 0:
                    continue
                wc = weight[c, k]
                if wc > 0:
                    w += wc
                    ax += wc * centroid[c, k, 0]
                    ay += wc * centroid[c, k, 1]
                    az += wc * centroid[c, k, 2]
            weight[node, k] = w
            if w > 0:
                centroid[node, k, 0] = ax / w
                centroid[node, k, 1] = ay / w
                centroid[node, k, 2] = az / w
            else:
                centroid[node, k, 0] = np.nan
                centroid[node, k, 1] = np.nan
                centroid[node, k, 2] = np.nan
    return touched


class OctreeNode:
    """Read-only view of one node of an :class:`Octree`."""

    __slots__ = ("tree", "index")

    def __init__(self, tree: "Octree", index: int):
        self.tree = tree
        self.index = int(index)

    def __repr__(self):
        kind = f"leaf {self.neuron_id}" if self.is_leaf else "inner"
        return f"OctreeNode({self.index}, {kind}, handle={self.handle})"

    def __eq__(self, other):
        return isinstance(other, OctreeNode) and other.tree is self.tree and other.index == self.index

    def __hash__(self):
        return hash((id(self.tree), self.index))

    @property
    def is_leaf(self) -> bool:
        return bool(self.tree.leaf_id[self.index] >= 0)

    @property
    def neuron_id(self):
        nid = int(self.tree.leaf_id[self.index])
        return nid if nid >= 0 else None

    @property
    def box(self) -> Box3:
        return Box3.from_corners(self.tree.lo[self.index], self.tree.hi[self.index])

    @property
    def max_side(self) -> float:
        return float(self.tree.max_side[self.index])

    @property
    def handle(self) -> tuple[int, int, int, int]:
        return self.tree.handle(self.index)

    @property
    def count(self) -> int:
        return int(self.tree.count[self.index])

    def weight(self, kind: ElementKind) -> int:
        return int(self.tree.weight[self.index, int(kind)])

    def centroid(self, kind: ElementKind):
        """Weighted centroid for ``kind``; ``None`` when the weight is zero."""
        if self.weight(kind) == 0:
            return None
        return self.tree.centroid[self.index, int(kind)].copy()

    @property
    def children(self) -> list["OctreeNode"]:
        return [OctreeNode(self.tree, c) for c in self.tree.child[self.index] if c >= 0]


class Octree:
    """Octree over a fixed population; only vacant counts change after build."""

    def __init__(self, bounds: Box3, n_nodes, child, parent, leaf_id, leaf_row,
                 lo, hi, depth, cell, count, population: Population):
        self.bounds = bounds
        self.n_nodes = int(n_nodes)
        k = self.n_nodes
        self.child = child[:k].copy()
        self.parent = parent[:k].copy()
        self.leaf_id = leaf_id[:k].copy()
        self.leaf_row = leaf_row[:k].copy()
        self.lo = lo[:k].copy()
        self.hi = hi[:k].copy()
        self.depth = depth[:k].copy()
        self.cell = cell[:k].copy()
        self.count = count[:k].copy()
        self.max_side = (self.hi - self.lo).max(axis=1)
        self.loaded = np.ones(k, dtype=np.bool_)
        self.weight = np.zeros((k, 2), dtype=np.int64)
        self.centroid = np.full((k, 2, 3), np.nan)
        self.ids = population.ids.copy()
        self.positions = population.positions.copy()
        self.leaf_of_row = np.full(len(self.ids), -1, dtype=np.int64)
        leaves = np.flatnonzero(self.leaf_row >= 0)
        self.leaf_of_row[self.leaf_row[leaves]] = leaves
        self._id_row = None
        self._handles = None
        self.last_update_work = 0

    # -- construction -----------------------------------------------------
    @classmethod
    def build(cls, neurons: "Population | Sequence[Neuron]", bounds: Box3,
              root_handle: tuple[int, int, int, int] = (0, 0, 0, 0),
              corners=None) -> "Octree":
        """Build over ``neurons``; every position must lie in the half-open ``bounds``.

        ``corners`` (lo, hi) overrides the box corners bit-exactly; subtrees
        built over a cell of a larger tree pass the cell's corners and
        ``root_handle`` so that they reproduce that tree's nodes.
        """
        pop = as_population(neurons)
        n = len(pop)
        if n == 0:
            raise TreeError("cannot build an octree over zero neurons")
        if corners is None:
            lo = np.asarray(bounds.min_corner, dtype=float)
            hi = np.asarray(bounds.max_corner, dtype=float)
        else:
            lo, hi = (np.array(c, dtype=float) for c in corners)
        inside = np.all((pop.positions >= lo) & (pop.positions < hi), axis=1)
        if not inside.all():
            bad = pop.ids[~inside][:5].tolist()
            raise TreeError(f"neurons outside bounds: {bad}")
        uniq = np.unique(pop.positions, axis=0)
        if len(uniq) != n:
            raise TreeError("two or more neurons share a position; subdivision would not terminate")
        d0, *cell0 = root_handle
        cap = 4 * n + 64
        while True:
            out = _build_kernel(pop.positions, pop.ids, lo, hi, int(d0),
                                np.asarray(cell0, dtype=np.int64), cap)
            status = out[0]
            if status == -1:
                cap *= 4
                continue
            if status == -2:
                raise TreeError("subdivision depth exceeded; neurons are too close to separate")
            break
        tree = cls(bounds, *out[1:], population=pop)
        tree.update(pop)
        return tree

    # -- updates -------------------------------------------------------------
    def _aligned_vacant(self, pop: Population) -> np.ndarray:
        if len(pop) == len(self.ids) and np.array_equal(pop.ids, self.ids):
            return pop.vacant
        if self._id_row is None:
            self._id_row = {int(i): r for r, i in enumerate(self.ids)}
        vac = np.zeros((len(self.ids), 2), dtype=np.int64)
        seen = np.zeros(len(self.ids), dtype=bool)
        for nid, v in zip(pop.ids, pop.vacant):
            r = self._id_row.get(int(nid))
            if r is None:
                raise KeyError(f"neuron id {nid} is not in this tree")
            vac[r] = v
            seen[r] = True
        if not seen.all():
            raise KeyError("population is missing neurons present in the tree")
        return vac

    def update(self, neurons: "Population | Sequence[Neuron]") -> int:
        """Refresh leaf counts and all inner summaries; structure is unchanged."""
        vac = self._aligned_vacant(as_population(neurons))
        self.last_update_work = int(refresh_summaries(
            self.child, self.leaf_row, np.ascontiguousarray(vac, dtype=np.int64),
            self.positions, self.weight, self.centroid, self.n_nodes))
        return self.last_update_work

    # -- navigation ----------------------------------------------------------
    @property
    def root(self) -> OctreeNode:
        return OctreeNode(self, 0)

    def node(self, index: int) -> OctreeNode:
        return OctreeNode(self, index)

    def handle(self, index: int) -> tuple[int, int, int, int]:
        c = self.cell[index]
        return (int(self.depth[index]), int(c[0]), int(c[1]), int(c[2]))

    def index_of_handle(self, handle) -> int:
        if self._handles is None:
            self._handles = {self.handle(i): i for i in range(self.n_nodes)}
        try:
            return self._handles[tuple(int(h) for h in handle)]
        except KeyError:
            raise KeyError(f"no node with handle {tuple(handle)}") from None

    def leaf_of(self, neuron_id: int) -> OctreeNode:
        if self._id_row is None:
            self._id_row = {int(i): r for r, i in enumerate(self.ids)}
        return OctreeNode(self, self.leaf_of_row[self._id_row[int(neuron_id)]])

    @property
    def n_leaves(self) -> int:
        return int((self.leaf_id >= 0).sum())

    def height(self) -> int:
        return int(self.depth.max() - self.depth[0])

    def inner_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.leaf_id < 0)


def build(neurons, bounds: Box3) -> Octree:
    return Octree.build(neurons, bounds)


def update_leaves_and_subtree(tree: Octree, neurons) -> int:
    return tree.update(neurons)


def expand(node: OctreeNode, counter: ExpansionCounter,
           kind: ElementKind = ElementKind.DENDRITE) -> list[OctreeNode]:
    """Children of an inner node that carry weight for ``kind``.

    ``counter.nodes_inspected`` grows by the number of children returned.
    """
    if node.is_leaf:
        raise TreeError("cannot expand a leaf")
    tree = node.tree
    out = [OctreeNode(tree, c) for c in tree.child[node.index]
           if c >= 0 and tree.weight[c, int(kind)] > 0]
    counter.nodes_inspected += len(out)
    return out


def check_invariants(tree: Octree, population: Population, centroid_tol: float = 1e-9) -> list[str]:
    """Structural audit; returns human-readable violations (empty when sound).

    Sums are recomputed by walking each neuron up its parent chain, which is
    independent of the child-sum code used to maintain the tree.
    """
    problems = []
    n = len(population)
    leaves = np.flatnonzero(tree.leaf_id >= 0)
    if len(leaves) != n:
        problems.append(f"leaf count {len(leaves)} != neuron count {n}")
    if sorted(tree.leaf_id[leaves].tolist()) != sorted(population.ids.tolist()):
        problems.append("leaf ids are not a bijection onto neuron ids")
    inner = tree.leaf_id < 0
    has_child = (tree.child >= 0).any(axis=1)
    if np.any(inner & ~has_child):
        problems.append("inner node without children")
    if np.any(~inner & has_child):
        problems.append("leaf with children")

    vac = tree._aligned_vacant(population)
    w_sum = np.zeros((tree.n_nodes, 2), dtype=np.int64)
    m_sum = np.zeros((tree.n_nodes, 2, 3))
    node = tree.leaf_of_row.copy()
    pos = tree.positions
    while True:
        live = node >= 0
        if not live.any():
            break
        nodes = node[live]
        p = pos[live]
        lo = tree.lo[nodes]
        hi = tree.hi[nodes]
        if not np.all((p >= lo) & (p < hi)):
            problems.append("neuron outside an ancestor box")
        np.add.at(w_sum, nodes, vac[live])
        for k in range(2):
            np.add.at(m_sum[:, k, :], nodes, vac[live, k][:, None] * p)
        node = np.where(live, tree.parent[np.maximum(node, 0)], -1)
    if not np.array_equal(w_sum, tree.weight):
        problems.append("node weight differs from the sum over contained neurons")
    for k in range(2):
        pos_w = tree.weight[:, k] > 0
        if np.any(~np.isnan(tree.centroid[~pos_w, k])):
            problems.append(f"zero-weight node has a defined centroid (kind {k})")
        c = tree.centroid[pos_w, k]
        ref = m_sum[pos_w, k] / w_sum[pos_w, k][:, None]
        scale = np.maximum(1.0, np.abs(ref))
        if np.any(np.abs(c - ref) > centroid_tol * scale):
            problems.append(f"centroid differs from direct weighted mean (kind {k})")
        if np.any((c < tree.lo[pos_w]) | (c > tree.hi[pos_w])):
            problems.append(f"centroid outside its box (kind {k})")
    # child boxes halve the parent box
    rows, octs = np.nonzero(tree.child >= 0)
    kids = tree.child[rows, octs]
    mid = (tree.lo[rows] + tree.hi[rows]) * 0.5
    for a in range(3):
        high = ((octs >> a) & 1).astype(bool)
        exp_lo = np.where(high, mid[:, a], tree.lo[rows, a])
        exp_hi = np.where(high, tree.hi[rows, a], mid[:, a])
        if not (np.array_equal(tree.lo[kids, a], exp_lo) and np.array_equal(tree.hi[kids, a], exp_hi)):
            problems.append(f"child boxes do not halve the parent along axis {a}")
    return problems
