"""Barnes-Hut target search for new synapses, instrumented with work counters.

A search starts at the global root, gathers candidate nodes breadth-first
(a child is a candidate when it is an actual neuron or passes the acceptance
criterion, otherwise it is queued for expansion), picks one candidate with
probability proportional to its attraction, and re-roots at the pick until an
actual neuron is chosen.  Each gather is one *descent*.

The kernels work on any node table with the octree's array layout, so the
same code serves the monolithic tree and the per-rank views of the
distributed simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from .geometry import Theta
from .octree import ExpansionCounter, Octree, OctreeNode
from .population import ElementKind, Neuron, Population
from .rng import STREAM_RESOLVE, STREAM_SEARCH, CounterRNG, key_uniform

DEFAULT_SIGMA = 750.0

# kernel status codes
_DONE = 0
_MISS = 1
_DETAIL_FULL = 2


@dataclass
class SearchConfig:
    theta: Theta = field(default_factory=lambda: Theta(0.25))
    kernel_sigma: float = DEFAULT_SIGMA
    rng_seed: int = 0
    oracle_mode: bool = False
    record_detail: bool = False

    def __post_init__(self):
        if not isinstance(self.theta, Theta):
            self.theta = Theta(self.theta)
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be positive")


@dataclass
class DescentStats:
    first_descent: ExpansionCounter = field(default_factory=ExpansionCounter)
    subsequent_descents: list = field(default_factory=list)
    chosen_path_length: int = 0


@dataclass(frozen=True, order=True)
class SynapseProposal:
    source_id: int
    target_id: int
    search_index: int = 0

    def __post_init__(self):
        if self.source_id == self.target_id:
            raise ValueError(f"autapse proposal for neuron {self.source_id}")


@dataclass
class UpdateStats:
    """Per-search counters of one update step (arrays indexed by search)."""

    source_ids: np.ndarray
    search_index: np.ndarray
    target_ids: np.ndarray
    first_inspected: np.ndarray
    first_pushes: np.ndarray
    sub_count: np.ndarray
    sub_inspected: np.ndarray
    sub_pushes: np.ndarray
    sub_max_inspected: np.ndarray
    sub_max_pushes: np.ndarray
    path_length: np.ndarray
    detail: Optional[np.ndarray] = None  # rows: search, descent, inspected, pushes
    update_work: int = 0

    @property
    def n_searches(self) -> int:
        return len(self.source_ids)

    @property
    def first_work(self) -> int:
        return int(self.first_inspected.sum() + self.first_pushes.sum())

    @property
    def subsequent_work(self) -> int:
        return int(self.sub_inspected.sum() + self.sub_pushes.sum())

    @property
    def total_work(self) -> int:
        return self.first_work + self.subsequent_work

    @property
    def mean_first(self) -> float:
        return float(self.first_inspected.mean()) if self.n_searches else 0.0

    @property
    def mean_subsequent(self) -> float:
        """Mean nodes inspected per subsequent descent."""
        k = int(self.sub_count.sum())
        return float(self.sub_inspected.sum()) / k if k else 0.0

    @property
    def max_subsequent_inspected(self) -> int:
        return int(self.sub_max_inspected.max()) if self.n_searches else 0

    @property
    def max_subsequent_pushes(self) -> int:
        return int(self.sub_max_pushes.max()) if self.n_searches else 0

    def descent_stats(self, i: int) -> DescentStats:
        """Per-descent counters of search ``i`` (needs ``record_detail``)."""
        if self.detail is None:
            raise ValueError("per-descent detail was not recorded")
        rows = self.detail[self.detail[:, 0] == i]
        rows = rows[np.argsort(rows[:, 1])]
        counters = [ExpansionCounter(int(r[2]), int(r[3])) for r in rows]
        return DescentStats(counters[0], counters[1:], len(counters))

    @staticmethod
    def concat(parts: Sequence["UpdateStats"]) -> "UpdateStats":
        names = ["source_ids", "search_index", "target_ids", "first_inspected", "first_pushes",
                 "sub_count", "sub_inspected", "sub_pushes", "sub_max_inspected",
                 "sub_max_pushes", "path_length"]
        merged = {k: np.concatenate([getattr(p, k) for p in parts]) if parts
                  else np.zeros(0, np.int64) for k in names}
        detail = None
        if parts and all(p.detail is not None for p in parts):
            chunks, offset = [], 0
            for p in parts:
                d = p.detail.copy()
                d[:, 0] += offset
                offset += p.n_searches
                chunks.append(d)
            detail = np.concatenate(chunks)
        return UpdateStats(**merged, detail=detail,
                           update_work=sum(p.update_work for p in parts))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _gather(child, leaf_id, weight, centroid, max_side, loaded, start, qx, qy, qz,
            searcher, kind, theta, oracle, queue, cand, cand_d2, misses):
    """One breadth-first candidate gather from ``start``.

    Returns (n_candidates, inspected, pushes, n_misses).  A miss is a queued
    node whose children are not present in the table.
    """
    nc = 0
    insp = 0
    push = 0
    nmiss = 0
    qh = 0
    qt = 1
    queue[0] = start
    while qh < qt:
        node = queue[qh]
        qh += 1
        if not loaded[node]:
            misses[nmiss] = node
            nmiss += 1
            continue
        for o in range(8):
            c = child[node, o]
            if c < 0 or weight[c, kind] == 0:
                continue
            insp += 1
            dx = centroid[c, kind, 0] - qx
            dy = centroid[c, kind, 1] - qy
            dz = centroid[c, kind, 2] - qz
            d2 = dx * dx + dy * dy + dz * dz
            lid = leaf_id[c]
            if lid >= 0:
                if lid == searcher:
                    continue
                cand[nc] = c
                cand_d2[nc] = d2
                nc += 1
                continue
            accept = False
            if not oracle:
                d = math.sqrt(d2)
                if d > 0.0 and max_side[c] / d < theta:
                    accept = True
            if accept:
                cand[nc] = c
                cand_d2[nc] = d2
                nc += 1
            else:
                queue[qt] = c
                qt += 1
                push += 1
    return nc, insp, push, nmiss


@njit(cache=True)
def _attraction(w, d2, inv_sigma2):
    return w * math.exp(-d2 * inv_sigma2)


@njit(cache=True)
def _choose_index(att, n, u):
    """Index i with probability att[i] / sum(att); -1 when the sum is zero."""
    total = 0.0
    for i in range(n):
        total += att[i]
    if not total > 0.0:
        return -1
    target = u * total
    acc = 0.0
    last = -1
    for i in range(n):
        if att[i] > 0.0:
            last = i
            acc += att[i]
            if acc > target:
                return i
    return last


@njit(cache=True)
def _search_batch(child, leaf_id, weight, centroid, max_side, loaded, root,
                  qpos, searcher_ids, search_idx, kind, theta, inv_sigma2, oracle,
                  seed, step, first_search,
                  o_target, o_first_insp, o_first_push, o_sub_count, o_sub_insp,
                  o_sub_push, o_sub_max_insp, o_sub_max_push, o_path,
                  record_detail, detail, detail_n, misses):
    """Run searches ``first_search..`` in order.

    Returns (status, search reached, n_misses).  On a miss or a full detail
    buffer the search at ``search reached`` must be rerun from scratch.
    """
    n_table = child.shape[0]
    queue = np.empty(n_table, np.int64)
    cand = np.empty(n_table, np.int64)
    cand_d2 = np.empty(n_table)
    att = np.empty(n_table)
    m = qpos.shape[0]
    for s in range(first_search, m):
        qx = qpos[s, 0]
        qy = qpos[s, 1]
        qz = qpos[s, 2]
        sid = searcher_ids[s]
        o_target[s] = -1
        o_first_insp[s] = 0
        o_first_push[s] = 0
        o_sub_count[s] = 0
        o_sub_insp[s] = 0
        o_sub_push[s] = 0
        o_sub_max_insp[s] = 0
        o_sub_max_push[s] = 0
        o_path[s] = 0
        detail_mark = detail_n[0]
        cur = root
        if weight[cur, kind] == 0:
            continue
        if leaf_id[cur] >= 0:
            if leaf_id[cur] != sid:
                o_target[s] = leaf_id[cur]
            continue
        descent = 0
        while leaf_id[cur] < 0:
            nc, insp, push, nmiss = _gather(child, leaf_id, weight, centroid, max_side, loaded,
                                            cur, qx, qy, qz, sid, kind, theta, oracle,
                                            queue, cand, cand_d2, misses)
            if nmiss > 0:
                detail_n[0] = detail_mark
                return _MISS, s, nmiss
            if record_detail:
                k = detail_n[0]
                if k >= detail.shape[0]:
                    detail_n[0] = detail_mark
                    return _DETAIL_FULL, s, 0
                detail[k, 0] = s
                detail[k, 1] = descent
                detail[k, 2] = insp
                detail[k, 3] = push
                detail_n[0] = k + 1
            o_path[s] += 1
            if descent == 0:
                o_first_insp[s] = insp
                o_first_push[s] = push
            else:
                o_sub_count[s] += 1
                o_sub_insp[s] += insp
                o_sub_push[s] += push
                if insp > o_sub_max_insp[s]:
                    o_sub_max_insp[s] = insp
                if push > o_sub_max_push[s]:
                    o_sub_max_push[s] = push
            for i in range(nc):
                att[i] = _attraction(float(weight[cand[i], kind]), cand_d2[i], inv_sigma2)
            u = key_uniform(np.uint64(seed), np.uint64(STREAM_SEARCH), np.uint64(step), np.uint64(sid),
                            np.uint64(search_idx[s]), np.uint64(descent))
            pick = _choose_index(att, nc, u)
            if pick < 0:
                break
            cur = cand[pick]
            descent += 1
        if leaf_id[cur] >= 0 and leaf_id[cur] != sid:
            o_target[s] = leaf_id[cur]
    return _DONE, m, 0


# ---------------------------------------------------------------------------
# table-level driver shared with the distributed simulation
# ---------------------------------------------------------------------------

def run_searches(table, root: int, qpos, searcher_ids, search_idx, config: SearchConfig,
                 step: int, kind: ElementKind = ElementKind.DENDRITE,
                 on_miss: Optional[Callable[[np.ndarray], None]] = None) -> UpdateStats:
    """Run a batch of searches over ``table`` (an object with octree arrays).

    ``on_miss`` receives table indices whose children are absent; it must make
    them present (and may reallocate the table arrays) before the batch resumes.
    """
    m = len(searcher_ids)
    qpos = np.ascontiguousarray(qpos, dtype=np.float64).reshape(-1, 3)
    searcher_ids = np.ascontiguousarray(searcher_ids, dtype=np.int64)
    search_idx = np.ascontiguousarray(search_idx, dtype=np.int64)
    outs = [np.zeros(m, np.int64) for _ in range(9)]
    detail = np.zeros((max(16, 8 * m) if config.record_detail else 1, 4), np.int64)
    detail_n = np.zeros(1, np.int64)
    theta = 0.0 if config.oracle_mode else float(config.theta)
    inv_s2 = 1.0 / (config.kernel_sigma ** 2)
    pos = 0
    while True:
        misses = np.empty(table.child.shape[0], np.int64)
        status, pos, nmiss = _search_batch(
            table.child, table.leaf_id, table.weight, table.centroid, table.max_side,
            table.loaded, root, qpos, searcher_ids, search_idx, int(kind), theta, inv_s2,
            bool(config.oracle_mode), np.uint64(config.rng_seed & (2**64 - 1)),
            np.uint64(step), pos, *outs, bool(config.record_detail), detail, detail_n, misses)
        if status == _DONE:
            break
        if status == _MISS:
            if on_miss is None:
                raise RuntimeError("search reached nodes whose children are not loaded")
            on_miss(misses[:nmiss].copy())
        elif status == _DETAIL_FULL:
            grown = np.zeros((2 * detail.shape[0], 4), np.int64)
            grown[: detail.shape[0]] = detail
            detail = grown
    (target, f_insp, f_push, s_cnt, s_insp, s_push, s_max_i, s_max_p, path) = outs
    return UpdateStats(
        source_ids=searcher_ids, search_index=search_idx, target_ids=target,
        first_inspected=f_insp, first_pushes=f_push, sub_count=s_cnt,
        sub_inspected=s_insp, sub_pushes=s_push, sub_max_inspected=s_max_i,
        sub_max_pushes=s_max_p, path_length=path,
        detail=detail[: detail_n[0]].copy() if config.record_detail else None,
    )


def search_plan(population: Population) -> tuple[np.ndarray, np.ndarray]:
    """(rows, search_index): one search per vacant axonal element."""
    counts = population.vacant[:, int(ElementKind.AXON)]
    rows = np.repeat(np.arange(len(population)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    return rows, np.arange(len(rows)) - starts


def proposals_from(stats: UpdateStats) -> list[SynapseProposal]:
    ok = stats.target_ids >= 0
    return [SynapseProposal(int(s), int(t), int(k)) for s, t, k in
            zip(stats.source_ids[ok], stats.target_ids[ok], stats.search_index[ok])]


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _q(q) -> tuple[float, float, float]:
    x, y, z = (float(c) for c in q)
    return x, y, z


def gather_candidates(root: OctreeNode, q, searcher_id: int, kind: ElementKind, theta,
                      counter: ExpansionCounter, oracle: bool = False) -> list[OctreeNode]:
    """Candidate nodes below ``root`` for a searcher at ``q`` (one descent)."""
    tree = root.tree
    if root.is_leaf:
        return []
    n = tree.n_nodes
    queue = np.empty(n, np.int64)
    cand = np.empty(n, np.int64)
    cand_d2 = np.empty(n)
    misses = np.empty(n, np.int64)
    nc, insp, push, _ = _gather(tree.child, tree.leaf_id, tree.weight, tree.centroid,
                                tree.max_side, tree.loaded, root.index, *_q(q),
                                int(searcher_id), int(kind), 0.0 if oracle else float(theta),
                                bool(oracle), queue, cand, cand_d2, misses)
    counter.nodes_inspected += int(insp)
    counter.stack_pushes += int(push)
    return [OctreeNode(tree, c) for c in cand[:nc]]


def attraction_weight(q, candidate_centroid, candidate_weight: float, kernel_sigma: float) -> float:
    """Gaussian attraction ``weight * exp(-|q - c|^2 / sigma^2)``."""
    if candidate_weight < 0:
        raise ValueError("candidate weight must be >= 0")
    if candidate_weight == 0:
        return 0.0
    d2 = float(np.sum((np.asarray(q, float) - np.asarray(candidate_centroid, float)) ** 2))
    return float(_attraction(float(candidate_weight), d2, 1.0 / kernel_sigma ** 2))


def choose(nodes: Sequence, weights: Sequence[float], rng):
    """Pick ``nodes[i]`` with probability proportional to ``weights[i]``.

    Draws exactly one uniform from ``rng`` (anything with ``random()``).
    Returns ``None`` when every weight is zero.
    """
    if len(nodes) != len(weights):
        raise ValueError("nodes and weights differ in length")
    att = np.asarray(weights, dtype=float)
    if np.any(att < 0):
        raise ValueError("weights must be nonnegative")
    u = float(rng.random())
    i = _choose_index(att, len(att), u)
    return None if i < 0 else nodes[i]


def _plan_for(searcher: Neuron, search_index: int):
    return (np.array([searcher.position], float), np.array([searcher.id], np.int64),
            np.array([search_index], np.int64))


def find_target(searcher: Neuron, tree: Octree, config: SearchConfig,
                stats_out: Optional[DescentStats] = None, step: int = 0,
                search_index: int = 0) -> Optional[SynapseProposal]:
    """Search a dendrite partner for one vacant axon of ``searcher``."""
    qpos, ids, idx = _plan_for(searcher, search_index)
    cfg = SearchConfig(config.theta, config.kernel_sigma, config.rng_seed,
                       config.oracle_mode, record_detail=True)
    stats = run_searches(tree, 0, qpos, ids, idx, cfg, step)
    if stats_out is not None:
        if stats.detail is not None and len(stats.detail):
            ds = stats.descent_stats(0)
        else:
            ds = DescentStats()
        stats_out.first_descent = ds.first_descent
        stats_out.subsequent_descents = ds.subsequent_descents
        stats_out.chosen_path_length = ds.chosen_path_length
    t = int(stats.target_ids[0])
    return SynapseProposal(searcher.id, t, search_index) if t >= 0 else None


def connectivity_update(population: Population, tree: Octree, config: SearchConfig,
                        step: int = 0) -> tuple[list[SynapseProposal], UpdateStats]:
    """One update step's search phase: refresh the tree, then one search per
    vacant axonal element of every neuron."""
    update_work = tree.update(population)
    rows, idx = search_plan(population)
    stats = run_searches(tree, 0, population.positions[rows], population.ids[rows], idx,
                         config, step)
    stats.update_work = update_work
    return proposals_from(stats), stats


def resolve_proposals(proposals: Sequence[SynapseProposal], population: Population,
                      rng: CounterRNG) -> tuple[list[SynapseProposal], list[SynapseProposal]]:
    """Grant proposals per target in random order while dendrites remain.

    Priorities are keyed draws, so the outcome does not depend on the order in
    which proposals arrive.  Mutates ``population.vacant``; returns
    ``(formed, unmatched)``.
    """
    by_target: dict[int, list[SynapseProposal]] = {}
    for p in proposals:
        by_target.setdefault(p.target_id, []).append(p)
    formed, unmatched = [], []
    ax, den = int(ElementKind.AXON), int(ElementKind.DENDRITE)
    for target in sorted(by_target):
        t_row = population.row_of(target)
        queue = sorted(by_target[target], key=lambda p: (
            rng.draw(p.source_id, p.search_index, stream=STREAM_RESOLVE), p.source_id, p.search_index))
        for p in queue:
            s_row = population.row_of(p.source_id)
            if population.vacant[t_row, den] > 0 and population.vacant[s_row, ax] > 0:
                population.vacant[t_row, den] -= 1
                population.vacant[s_row, ax] -= 1
                formed.append(p)
            else:
                unmatched.append(p)
    return formed, unmatched


def target_distribution(tree: Octree, searcher: Neuron, config: SearchConfig,
                        kind: ElementKind = ElementKind.DENDRITE) -> dict[int, float]:
    """Exact probability of each final target under the Barnes-Hut search.

    Follows every branch of the descent with its choice probability instead
    of sampling; used to measure the approximation error against the naive
    all-pairs distribution.
    """
    out: dict[int, float] = {}
    inv_s2 = 1.0 / config.kernel_sigma ** 2
    q = np.asarray(searcher.position, float)

    def visit(node: OctreeNode, prob: float):
        cands = gather_candidates(node, q, searcher.id, kind, config.theta, ExpansionCounter(),
                                  oracle=config.oracle_mode)
        if not cands:
            return
        att = np.array([_attraction(float(tree.weight[c.index, int(kind)]),
                                    float(np.sum((tree.centroid[c.index, int(kind)] - q) ** 2)),
                                    inv_s2) for c in cands])
        total = att.sum()
        if not total > 0:
            return
        for c, a in zip(cands, att):
            if a <= 0:
                continue
            pc = prob * a / total
            if c.is_leaf:
                out[c.neuron_id] = out.get(c.neuron_id, 0.0) + pc
            else:
                visit(c, pc)

    root = tree.root
    if root.is_leaf:
        if root.neuron_id != searcher.id and root.weight(kind) > 0:
            out[root.neuron_id] = 1.0
        return out
    if root.weight(kind) > 0:
        visit(root, 1.0)
    return out
