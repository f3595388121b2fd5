"""Single-process simulation of the rank-parallel target search.

Each simulated rank owns the neurons inside its subdomain and builds octrees
over its *branch cells*: the octree cells at the branch level that fall inside
the subdomain.  Ranks exchange branch-root summaries, assemble the identical
upper portion of the tree, and download children of remote nodes on demand
while searching.  Downloads are discarded at the end of every update step.

Subdomains come from halving the bounds axis by axis (x, y, z, x, ...), once
per factor of two in the rank count.  Branch cells are octree cells, so the
tree every rank sees is node-for-node the tree one process would build over
the whole population.
"""

from __future__ import annotations

import copy
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Box3
from .octree import Octree, refresh_summaries
from .plasticity import (SearchConfig, SynapseProposal, UpdateStats, proposals_from,
                         resolve_proposals, run_searches, search_plan)
from .population import ElementKind, Population, as_population
from .rng import CounterRNG

Handle = tuple  # (depth, ix, iy, iz)


class PartitionError(ValueError):
    pass


class StaleHandleError(KeyError):
    pass


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------

@dataclass
class NodeSummary:
    handle: Handle
    count: int
    leaf_id: int
    weight: np.ndarray      # (2,) int
    centroid: np.ndarray    # (2, 3)
    lo: np.ndarray
    hi: np.ndarray

    @property
    def is_leaf(self) -> bool:
        return self.leaf_id >= 0


@dataclass
class BranchRootMessage:
    rank_id: int
    summary: NodeSummary


@dataclass
class ChildRequest:
    requester: int
    owner: int
    handle: Handle


@dataclass
class ChildReply:
    owner: int
    handle: Handle
    octants: list[int]
    children: list[NodeSummary]


def _summary(tree: Octree, i: int) -> NodeSummary:
    return NodeSummary(tree.handle(i), int(tree.count[i]), int(tree.leaf_id[i]),
                       tree.weight[i].copy(), tree.centroid[i].copy(),
                       tree.lo[i].copy(), tree.hi[i].copy())


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------

def admissible_rank_count(p: int) -> bool:
    return p >= 1 and (p & (p - 1)) == 0


def branch_level(p: int) -> int:
    k = p.bit_length() - 1
    j, r = divmod(k, 3)
    return j + (1 if r else 0)


def _cells_at_level(positions: np.ndarray, lo, hi, level: int) -> np.ndarray:
    """Cell coordinates at ``level`` by repeated halving (same arithmetic as the octree)."""
    n = len(positions)
    cell = np.zeros((n, 3), dtype=np.int64)
    lo = np.broadcast_to(np.asarray(lo, float), (n, 3)).copy()
    hi = np.broadcast_to(np.asarray(hi, float), (n, 3)).copy()
    for _ in range(level):
        mid = (lo + hi) * 0.5
        up = positions >= mid
        cell = 2 * cell + up
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    return cell


def _cell_corners(lo, hi, handle: Handle):
    """Exact corners of a cell, halving from the root like the octree does."""
    depth, *c = handle
    lo = np.array(lo, float)
    hi = np.array(hi, float)
    for lvl in range(depth - 1, -1, -1):
        mid = (lo + hi) * 0.5
        for a in range(3):
            if (c[a] >> lvl) & 1:
                lo[a] = mid[a]
            else:
                hi[a] = mid[a]
    return lo, hi


def _rank_of_cells(cells: np.ndarray, p: int, level: int) -> np.ndarray:
    k = p.bit_length() - 1
    rank = np.zeros(len(cells), dtype=np.int64)
    for t in range(k):
        bit = (cells[:, t % 3] >> (level - 1 - t // 3)) & 1
        rank = (rank << 1) | bit
    return rank


def _rank_box(lo, hi, rank: int, p: int) -> Box3:
    k = p.bit_length() - 1
    lo = np.array(lo, float)
    hi = np.array(hi, float)
    for t in range(k):
        a = t % 3
        mid = (lo[a] + hi[a]) * 0.5
        if (rank >> (k - 1 - t)) & 1:
            lo[a] = mid
        else:
            hi[a] = mid
    return Box3.from_corners(lo, hi)


@dataclass
class RankCounters:
    messages_sent: int = 0
    nodes_downloaded: int = 0
    local_work: int = 0
    search_work: int = 0
    update_work: int = 0
    upper_work: int = 0
    child_requests: int = 0
    child_replies: int = 0
    exchange_pairwise: int = 0
    exchange_broadcast: int = 0
    proposal_messages: int = 0


@dataclass
class RankState:
    rank_id: int
    p: int
    subdomain: Box3
    local_neurons: Population
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    level: int
    local_trees: dict = field(default_factory=dict)   # branch handle -> Octree
    branch_rows: dict = field(default_factory=dict)   # branch handle -> rows of local_neurons
    remote_cache: dict = field(default_factory=dict)  # (owner, handle) -> ChildReply
    counters: RankCounters = field(default_factory=RankCounters)
    history: list = field(default_factory=list)
    upper: Optional["UpperTree"] = None
    view: Optional["RankView"] = None
    step: int = 0

    @property
    def n_local(self) -> int:
        return len(self.local_neurons)

    def _build_local_trees(self):
        self.local_trees = {}
        self.branch_rows = {}
        if self.n_local == 0:
            return
        cells = _cells_at_level(self.local_neurons.positions, self.bounds_lo, self.bounds_hi,
                                self.level)
        keys = cells[:, 0] * (1 << 42) + cells[:, 1] * (1 << 21) + cells[:, 2]
        for key in np.unique(keys):
            rows = np.flatnonzero(keys == key)
            handle = (self.level, *(int(v) for v in cells[rows[0]]))
            lo, hi = _cell_corners(self.bounds_lo, self.bounds_hi, handle)
            self.branch_rows[handle] = rows
            self.local_trees[handle] = Octree.build(
                self.local_neurons.subset(rows), Box3.from_corners(lo, hi),
                root_handle=handle, corners=(lo, hi))

    def update_local(self) -> int:
        work = 0
        for h, tree in self.local_trees.items():
            work += tree.update(self.local_neurons.subset(self.branch_rows[h]))
        self.counters.update_work += work
        self.counters.local_work += work
        return work

    def branch_messages(self) -> list[BranchRootMessage]:
        return [BranchRootMessage(self.rank_id, _summary(self.local_trees[h], 0))
                for h in sorted(self.local_trees)]

    def _tree_with(self, handle: Handle) -> tuple[Octree, int]:
        handle = tuple(int(h) for h in handle)
        if handle[0] < self.level:
            raise StaleHandleError(f"rank {self.rank_id} owns no node {handle}")
        branch = (self.level, *(c >> (handle[0] - self.level) for c in handle[1:]))
        tree = self.local_trees.get(branch)
        if tree is None:
            raise StaleHandleError(f"rank {self.rank_id} owns no node {handle}")
        try:
            return tree, tree.index_of_handle(handle)
        except KeyError:
            raise StaleHandleError(f"rank {self.rank_id} owns no node {handle}") from None

    def serve(self, request: ChildRequest) -> ChildReply:
        """Answer a child request from another rank with copied summaries."""
        tree, i = self._tree_with(request.handle)
        octants, kids = [], []
        for o, c in enumerate(tree.child[i]):
            if c >= 0:
                octants.append(o)
                kids.append(_summary(tree, c))
        self.counters.child_replies += 1
        self.counters.messages_sent += 1
        return ChildReply(self.rank_id, tuple(request.handle), octants, kids)

    def close_step(self):
        row = dict(vars(self.counters))
        row.update(rank=self.rank_id, step=self.step, p=self.p)
        self.history.append(row)
        self.counters = RankCounters()


def partition(neurons, bounds: Box3, p: int) -> list[RankState]:
    """Split the population over ``p`` simulated ranks (``p`` a power of two)."""
    pop = as_population(neurons)
    if not admissible_rank_count(p):
        raise PartitionError(f"rank count must be a power of two (1, 2, 4, 8, 16, ...), got {p}")
    if len(pop) < p:
        raise PartitionError(f"need at least as many neurons as ranks ({len(pop)} < {p})")
    lo = np.asarray(bounds.min_corner, float)
    hi = np.asarray(bounds.max_corner, float)
    if not np.all((pop.positions >= lo) & (pop.positions < hi)):
        raise PartitionError("neurons outside the simulation bounds")
    level = branch_level(p)
    cells = _cells_at_level(pop.positions, lo, hi, level)
    owner = _rank_of_cells(cells, p, level)
    ranks = []
    for r in range(p):
        rows = np.flatnonzero(owner == r)
        state = RankState(r, p, _rank_box(lo, hi, r, p), pop.subset(rows), lo, hi, level)
        state._build_local_trees()
        ranks.append(state)
    return ranks


# ---------------------------------------------------------------------------
# upper tree
# ---------------------------------------------------------------------------

class _Table:
    """Growable node table with the octree array layout."""

    def __init__(self, cap: int):
        self.n = 0
        self._alloc(max(cap, 8))

    def _alloc(self, cap):
        self.child = np.full((cap, 8), -1, np.int64)
        self.leaf_id = np.full(cap, -1, np.int64)
        self.leaf_row = np.full(cap, -1, np.int64)
        self.weight = np.zeros((cap, 2), np.int64)
        self.centroid = np.full((cap, 2, 3), np.nan)
        self.lo = np.zeros((cap, 3))
        self.hi = np.zeros((cap, 3))
        self.max_side = np.zeros(cap)
        self.count = np.zeros(cap, np.int64)
        self.loaded = np.ones(cap, np.bool_)
        self.owner = np.full(cap, -1, np.int64)
        self.handles: list = []

    def _grow(self, need):
        cap = self.child.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap)
        old = {k: getattr(self, k) for k in ("child", "leaf_id", "leaf_row", "weight", "centroid",
                                             "lo", "hi", "max_side", "count", "loaded", "owner")}
        handles = self.handles
        self._alloc(new)
        self.handles = handles
        for k, v in old.items():
            getattr(self, k)[:cap] = v

    def add(self, s: NodeSummary, owner: int = -1, loaded: bool = True) -> int:
        self._grow(self.n + 1)
        i = self.n
        self.n += 1
        self.leaf_id[i] = s.leaf_id
        self.weight[i] = s.weight
        self.centroid[i] = s.centroid
        self.lo[i] = s.lo
        self.hi[i] = s.hi
        self.max_side[i] = float(np.max(s.hi - s.lo))
        self.count[i] = s.count
        self.owner[i] = owner
        self.loaded[i] = loaded
        self.handles.append(tuple(s.handle))
        return i


class UpperTree(_Table):
    """Common upper portion assembled from all branch-root messages."""

    def __init__(self, messages: list[BranchRootMessage], lo, hi, level: int):
        super().__init__(4 * len(messages) + 8)
        self.level = level
        msgs = sorted(messages, key=lambda m: m.summary.handle)
        self.branch_of: dict = {}
        below: dict = {}
        for m in msgs:
            h = tuple(m.summary.handle)
            if h[0] != level:
                raise PartitionError(f"branch {h} is not at branch level {level}")
            if h in self.branch_of:
                raise PartitionError(f"branch {h} advertised twice; subdomains overlap")
            self.branch_of[h] = m
            a = h
            while True:
                below.setdefault(a, []).append(m)
                if a[0] == 0:
                    break
                a = (a[0] - 1, a[1] >> 1, a[2] >> 1, a[3] >> 1)
        self.index: dict = {}
        if not msgs:
            return
        queue = [((0, 0, 0, 0), np.asarray(lo, float), np.asarray(hi, float), -1, -1)]
        head = 0
        while head < len(queue):
            h, clo, chi, parent, octant = queue[head]
            head += 1
            group = below[h]
            total = sum(m.summary.count for m in group)
            if h[0] == level:
                s = group[0].summary
                i = self.add(s, owner=group[0].rank_id, loaded=s.is_leaf)
            elif total == 1:
                # a single neuron below: the monolithic tree has a leaf here
                s = group[0].summary
                i = self.add(NodeSummary(h, 1, s.leaf_id, s.weight.copy(), s.centroid.copy(),
                                         clo, chi), owner=group[0].rank_id)
            else:
                i = self.add(NodeSummary(h, total, -1, np.zeros(2, np.int64),
                                         np.full((2, 3), np.nan), clo, chi))
                mid = (clo + chi) * 0.5
                for o in range(8):
                    bits = np.array([(o >> a) & 1 for a in range(3)], dtype=bool)
                    ch = (h[0] + 1, *(2 * h[1 + a] + int(bits[a]) for a in range(3)))
                    if ch in below:
                        queue.append((ch, np.where(bits, mid, clo), np.where(bits, chi, mid), i, o))
            self.index[h] = i
            if parent >= 0:
                self.child[parent, octant] = i
        self.work = int(refresh_summaries(self.child, self.leaf_row, np.zeros((1, 2), np.int64),
                                          np.zeros((1, 3)), self.weight, self.centroid, self.n))

    @property
    def n_nodes(self) -> int:
        return self.n

    def arrays_equal(self, other: "UpperTree") -> bool:
        k = self.n
        if other.n != k or self.handles != other.handles:
            return False
        return (np.array_equal(self.child[:k], other.child[:k])
                and np.array_equal(self.weight[:k], other.weight[:k])
                and np.array_equal(self.centroid[:k], other.centroid[:k], equal_nan=True)
                and np.array_equal(self.leaf_id[:k], other.leaf_id[:k]))


@dataclass
class ExchangeReport:
    p: int
    pairwise_messages: int
    broadcast_messages: int
    upper_nodes: int
    branch_roots: int


def exchange_and_build_upper(ranks: list[RankState]) -> UpperTree:
    """All-to-all of branch roots; every rank assembles its own upper tree."""
    if not ranks:
        raise PartitionError("no ranks")
    p = len(ranks)
    lo, hi, level = ranks[0].bounds_lo, ranks[0].bounds_hi, ranks[0].level
    outbox = {r.rank_id: r.branch_messages() for r in ranks}
    for r in ranks:
        r.counters.exchange_pairwise += p - 1
        r.counters.exchange_broadcast += 1
        r.counters.messages_sent += p - 1
    check = [(r.subdomain.volume) for r in ranks]
    total_volume = float(np.prod(hi - lo))
    if not math.isclose(sum(check), total_volume, rel_tol=1e-9):
        raise PartitionError("subdomains do not tile the bounds")
    for r in ranks:
        received = []
        for src in sorted(outbox):
            received.extend(copy.deepcopy(outbox[src]))
        r.upper = UpperTree(received, lo, hi, level)
        r.counters.upper_work += r.upper.work
    return ranks[0].upper


# ---------------------------------------------------------------------------
# per-rank view: upper tree + own subtrees + downloaded nodes
# ---------------------------------------------------------------------------

class RankView(_Table):
    def __init__(self, rank: RankState):
        up = rank.upper
        extra = sum(t.n_nodes for t in rank.local_trees.values())
        super().__init__(up.n + extra + 64)
        self.rank = rank
        for i in range(up.n):
            j = self.add(NodeSummary(up.handles[i], int(up.count[i]), int(up.leaf_id[i]),
                                     up.weight[i], up.centroid[i], up.lo[i], up.hi[i]),
                         owner=int(up.owner[i]), loaded=bool(up.loaded[i]))
            self.child[j] = up.child[i]
        self.index = {h: i for i, h in enumerate(self.handles)}
        for h, tree in rank.local_trees.items():
            slot = self.index.get(h)
            if slot is None or self.leaf_id[slot] >= 0:
                continue
            self._graft(slot, tree)
        for i in range(len(self.index), self.n):
            self.index[self.handles[i]] = i

    def _graft(self, slot: int, tree: Octree):
        """Attach a local tree below its branch placeholder (which stands in for its root)."""
        k = tree.n_nodes - 1
        base = self.n - 1
        self._grow(self.n + k)
        new = slice(self.n, self.n + k)
        remap = np.where(tree.child >= 0, tree.child + base, -1)
        self.child[slot] = remap[0]
        self.child[new] = remap[1:]
        self.leaf_id[new] = tree.leaf_id[1:]
        self.weight[new] = tree.weight[1:]
        self.centroid[new] = tree.centroid[1:]
        self.lo[new] = tree.lo[1:]
        self.hi[new] = tree.hi[1:]
        self.max_side[new] = tree.max_side[1:]
        self.count[new] = tree.count[1:]
        self.owner[new] = self.rank.rank_id
        self.loaded[new] = True
        self.handles.extend(tree.handle(i) for i in range(1, tree.n_nodes))
        self.n += k
        self.loaded[slot] = True

    def insert_reply(self, slot: int, reply: ChildReply):
        for o, s in zip(reply.octants, reply.children):
            i = self.add(s, owner=reply.owner, loaded=s.is_leaf)
            self.index[tuple(s.handle)] = i
            self.child[slot, o] = i
        self.loaded[slot] = True


def fetch_children(requester: RankState, owner: RankState, handle: Handle) -> list[NodeSummary]:
    """Download the children of ``handle`` from ``owner`` (cached for the step)."""
    key = (owner.rank_id, tuple(int(h) for h in handle))
    cached = requester.remote_cache.get(key)
    if cached is not None:
        return cached.children
    reply = owner.serve(ChildRequest(requester.rank_id, owner.rank_id, key[1]))
    reply = copy.deepcopy(reply)
    requester.remote_cache[key] = reply
    requester.counters.child_requests += 1
    requester.counters.messages_sent += 1
    requester.counters.nodes_downloaded += len(reply.children)
    return reply.children


def end_of_step_discard(ranks: list[RankState]) -> None:
    for r in ranks:
        r.remote_cache.clear()
        r.view = None


# ---------------------------------------------------------------------------
# the update step
# ---------------------------------------------------------------------------

@dataclass
class DistributedResult:
    proposals: list[SynapseProposal]
    formed: list[SynapseProposal]
    unmatched: list[SynapseProposal]
    stats: UpdateStats
    counters: list[dict]
    exchange: ExchangeReport
    downloads: list = field(default_factory=list)   # (rank, NodeSummary) when recorded


def _owner_map(ranks) -> dict:
    return {int(i): r.rank_id for r in ranks for i in r.local_neurons.ids}


def distributed_connectivity_update(ranks: list[RankState], config: SearchConfig,
                                    step: int = 0, resolve: bool = True,
                                    record_downloads: bool = False) -> DistributedResult:
    """One bulk-synchronous update step over all simulated ranks.

    Phases (each a barrier, ranks driven round-robin in rank order): local tree
    update, branch-root exchange, searches with on-demand downloads, proposal
    routing and owner-side resolution, end-of-step discard.
    """
    p = len(ranks)
    by_id = {r.rank_id: r for r in ranks}
    for r in ranks:
        r.step = step
        r.update_local()
    upper = exchange_and_build_upper(ranks)
    exchange = ExchangeReport(p, sum(r.counters.exchange_pairwise for r in ranks),
                              sum(r.counters.exchange_broadcast for r in ranks),
                              upper.n, len(upper.branch_of))

    parts = []
    for r in ranks:
        view = RankView(r)
        r.view = view

        def on_miss(slots, r=r, view=view):
            for slot in slots:
                owner = by_id[int(view.owner[slot])]
                fetch_children(r, owner, view.handles[slot])
                view.insert_reply(int(slot), r.remote_cache[(owner.rank_id, view.handles[slot])])

        rows, idx = search_plan(r.local_neurons)
        if len(rows) == 0 or view.n == 0:
            continue
        stats = run_searches(view, 0, r.local_neurons.positions[rows],
                             r.local_neurons.ids[rows], idx, config, step, on_miss=on_miss)
        stats.update_work = r.counters.update_work
        r.counters.search_work += stats.total_work
        r.counters.local_work += stats.total_work
        parts.append(stats)
    stats = UpdateStats.concat(parts) if parts else None
    proposals = proposals_from(stats) if stats is not None else []

    formed, unmatched = [], []
    if resolve and proposals:
        owner_of = _owner_map(ranks)
        inbox: dict = {r.rank_id: [] for r in ranks}
        for r in ranks:
            dests = set()
            for pr in proposals:
                if owner_of[pr.source_id] == r.rank_id:
                    inbox[owner_of[pr.target_id]].append(pr)
                    dests.add(owner_of[pr.target_id])
            dests.discard(r.rank_id)
            r.counters.proposal_messages += len(dests)
            r.counters.messages_sent += len(dests)
        rng = CounterRNG(config.rng_seed, step)
        for r in ranks:
            # owner arbitrates its dendrites; sources are debited from their own rank
            mine = inbox[r.rank_id]
            if not mine:
                continue
            f, u = _resolve_at_owner(mine, r, by_id, owner_of, rng)
            formed.extend(f)
            unmatched.extend(u)
    downloads = []
    if record_downloads:
        for r in ranks:
            for key in sorted(r.remote_cache):
                downloads.extend((r.rank_id, s) for s in r.remote_cache[key].children)
    end_of_step_discard(ranks)
    counters = []
    for r in ranks:
        r.close_step()
        counters.append(r.history[-1])
    if stats is None:
        stats = UpdateStats.concat([])
    return DistributedResult(proposals, formed, unmatched, stats, counters, exchange, downloads)


def _resolve_at_owner(proposals, owner: RankState, by_id, owner_of, rng):
    den, ax = int(ElementKind.DENDRITE), int(ElementKind.AXON)
    # resolve against a scratch population holding the targets' dendrites and
    # the sources' axons, then write the decrements back to their ranks
    ids = sorted({p.target_id for p in proposals} | {p.source_id for p in proposals})
    vac = np.zeros((len(ids), 2), np.int64)
    for k, nid in enumerate(ids):
        holder = by_id[owner_of[nid]].local_neurons
        vac[k] = holder.vacant[holder.row_of(nid)]
    scratch = Population(ids, np.zeros((len(ids), 3)), vac)
    formed, unmatched = resolve_proposals(proposals, scratch, rng)
    for pr in formed:
        t = owner.local_neurons
        t.vacant[t.row_of(pr.target_id), den] -= 1
        s = by_id[owner_of[pr.source_id]].local_neurons
        s.vacant[s.row_of(pr.source_id), ax] -= 1
    return formed, unmatched


def proposal_multiset(proposals) -> Counter:
    return Counter((p.source_id, p.target_id, p.search_index) for p in proposals)
