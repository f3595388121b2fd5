import numpy as np
import pytest

from plastree.distributed import (ChildRequest, PartitionError, StaleHandleError,
                                  admissible_rank_count, branch_level,
                                  distributed_connectivity_update, end_of_step_discard,
                                  exchange_and_build_upper, fetch_children, partition,
                                  proposal_multiset)
from plastree.octree import Octree
from plastree.plasticity import SearchConfig, connectivity_update, resolve_proposals
from plastree.population import default_bounds, uniform_cube
from plastree.rng import CounterRNG

BOUNDS = default_bounds()


@pytest.fixture(scope="module")
def pop():
    return uniform_cube(2 ** 12, 31)


@pytest.fixture(scope="module")
def mono(pop):
    return Octree.build(pop, BOUNDS)


def assert_matches_tree(summaries, tree):
    """Integer fields exactly, centroids within 1e-9, against the node of the same handle."""
    idx = np.array([tree.index_of_handle(s.handle) for s in summaries])
    np.testing.assert_array_equal([s.count for s in summaries], tree.count[idx])
    np.testing.assert_array_equal([s.leaf_id for s in summaries], tree.leaf_id[idx])
    np.testing.assert_array_equal(np.stack([s.weight for s in summaries]), tree.weight[idx])
    np.testing.assert_allclose(np.stack([s.centroid for s in summaries]), tree.centroid[idx],
                               rtol=0, atol=1e-9)
    np.testing.assert_array_equal(np.stack([s.lo for s in summaries]), tree.lo[idx])
    np.testing.assert_array_equal(np.stack([s.hi for s in summaries]), tree.hi[idx])


@pytest.mark.parametrize("p,level", [(1, 0), (2, 1), (4, 1), (8, 1), (16, 2), (64, 2), (128, 3)])
def test_branch_level(p, level):
    assert branch_level(p) == level


def test_rank_count_must_be_power_of_two(pop):
    assert admissible_rank_count(8) and not admissible_rank_count(6)
    with pytest.raises(PartitionError):
        partition(pop, BOUNDS, 6)
    with pytest.raises(PartitionError):
        partition(uniform_cube(3, 0), BOUNDS, 4)


@pytest.mark.parametrize("p", [1, 2, 4, 8, 16, 64])
def test_partition_covers_population(pop, p):
    ranks = partition(pop, BOUNDS, p)
    ids = np.concatenate([r.local_neurons.ids for r in ranks])
    assert sorted(ids.tolist()) == pop.ids.tolist()
    assert sum(r.subdomain.volume for r in ranks) == pytest.approx(BOUNDS.volume)
    for r in ranks:
        for x in r.local_neurons.positions[:20]:
            assert r.subdomain.contains(x)
    sizes = [r.n_local for r in ranks]
    assert max(sizes) < 1.5 * len(pop) / p


@pytest.mark.parametrize("p", [1, 2, 8, 64])
def test_upper_tree_matches_monolithic(pop, mono, p):
    ranks = partition(pop, BOUNDS, p)
    for r in ranks:
        r.update_local()
    upper = exchange_and_build_upper(ranks)
    for i, h in enumerate(upper.handles):
        j = mono.index_of_handle(h)
        np.testing.assert_array_equal(upper.weight[i], mono.weight[j])
        np.testing.assert_allclose(upper.centroid[i], mono.centroid[j], rtol=0, atol=1e-9)
        assert upper.count[i] == mono.count[j]
    # every rank assembled the same table
    assert all(r.upper.arrays_equal(ranks[0].upper) for r in ranks)


@pytest.mark.parametrize("p", [2, 8, 64])
def test_exchange_is_linear_in_p(pop, p):
    ranks = partition(pop, BOUNDS, p)
    res = distributed_connectivity_update(ranks, SearchConfig(0.3), resolve=False)
    assert res.exchange.pairwise_messages == p * (p - 1)
    assert res.exchange.broadcast_messages == p
    per_rank = [c["exchange_pairwise"] for c in res.counters]
    assert per_rank == [p - 1] * p


def test_fetch_is_cached_within_a_step(pop):
    ranks = partition(pop, BOUNDS, 8)
    for r in ranks:
        r.update_local()
    exchange_and_build_upper(ranks)
    a, b = ranks[0], ranks[5]
    handle = next(iter(b.local_trees))
    first = fetch_children(a, b, handle)
    again = fetch_children(a, b, handle)
    assert first is again
    assert a.counters.child_requests == 1 and b.counters.child_replies == 1
    end_of_step_discard(ranks)
    fetch_children(a, b, handle)
    assert a.counters.child_requests == 2


def test_serve_rejects_unknown_handles(pop):
    ranks = partition(pop, BOUNDS, 8)
    with pytest.raises(StaleHandleError):
        ranks[0].serve(ChildRequest(1, 0, (0, 0, 0, 0)))
    foreign = next(iter(ranks[3].local_trees))
    with pytest.raises(StaleHandleError):
        ranks[0].serve(ChildRequest(1, 0, foreign))


@pytest.mark.parametrize("p", [1, 2, 8, 64])
def test_proposals_match_single_process(pop, mono, p):
    cfg = SearchConfig(0.25, rng_seed=3)
    ref, ref_stats = connectivity_update(pop.copy(), mono, cfg)
    res = distributed_connectivity_update(partition(pop, BOUNDS, p), cfg, record_downloads=True)
    assert proposal_multiset(res.proposals) == proposal_multiset(ref)
    assert res.stats.total_work == ref_stats.total_work
    if p > 1:
        assert_matches_tree([s for _, s in res.downloads], mono)


def test_downloads_are_fresh_after_weight_change(pop):
    ranks = partition(pop.copy(), BOUNDS, 8)
    cfg = SearchConfig(0.25, rng_seed=1)
    distributed_connectivity_update(ranks, cfg, step=0, resolve=False)
    # raise dendrite counts on every rank's own copy, then rerun
    for r in ranks:
        r.local_neurons.vacant[::3, 1] += 2
    truth = pop.copy()
    for r in ranks:
        truth.vacant[r.local_neurons.ids] = r.local_neurons.vacant   # ids are 0..n-1
    tree = Octree.build(truth, BOUNDS)
    res = distributed_connectivity_update(ranks, cfg, step=1, resolve=False,
                                          record_downloads=True)
    assert_matches_tree([s for _, s in res.downloads], tree)
    ref, _ = connectivity_update(truth, tree, cfg, step=1)
    assert proposal_multiset(res.proposals) == proposal_multiset(ref)


@pytest.mark.parametrize("p", [2, 8])
def test_multi_step_with_resolution(p):
    base = uniform_cube(1500, 8, axons=2)
    cfg = SearchConfig(0.3, rng_seed=6)
    single = base.copy()
    tree = Octree.build(single, BOUNDS)
    ranks = partition(base.copy(), BOUNDS, p)
    for step in range(3):
        props, _ = connectivity_update(single, tree, cfg, step)
        formed, _ = resolve_proposals(props, single, CounterRNG(cfg.rng_seed, step))
        res = distributed_connectivity_update(ranks, cfg, step)
        assert proposal_multiset(res.proposals) == proposal_multiset(props)
        assert sorted(res.formed) == sorted(formed)
    vac = {int(i): tuple(v) for r in ranks for i, v in zip(r.local_neurons.ids,
                                                            r.local_neurons.vacant)}
    assert vac == {int(i): tuple(v) for i, v in zip(single.ids, single.vacant)}


def test_counters_history(pop):
    ranks = partition(pop, BOUNDS, 4)
    for step in range(2):
        distributed_connectivity_update(ranks, SearchConfig(0.3), step)
    for r in ranks:
        assert [h["step"] for h in r.history] == [0, 1]
        assert all(h["local_work"] >= h["search_work"] > 0 for h in r.history)
        assert all(h["messages_sent"] >= h["exchange_pairwise"] for h in r.history)
