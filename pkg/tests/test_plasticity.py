import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plastree.octree import ExpansionCounter, Octree
from plastree.oracle import naive_distribution, total_variation
from plastree.plasticity import (DescentStats, SearchConfig, SynapseProposal, attraction_weight,
                                 choose, connectivity_update, find_target, gather_candidates,
                                 resolve_proposals, target_distribution)
from plastree.population import ElementKind, Population, default_bounds, uniform_cube
from plastree.rng import CounterRNG, key_uniform

DEN = ElementKind.DENDRITE


class FixedDraw:
    def __init__(self, u):
        self.u = u

    def random(self):
        return self.u


@pytest.fixture(scope="module")
def pop4k():
    return uniform_cube(4096, 21)


@pytest.fixture(scope="module")
def tree4k(pop4k):
    return Octree.build(pop4k, default_bounds())


def test_attraction_weight():
    assert attraction_weight((0, 0, 0), (750, 0, 0), 2, 750.0) == pytest.approx(2 * math.exp(-1))
    assert attraction_weight((0, 0, 0), (1, 1, 1), 0, 750.0) == 0.0
    with pytest.raises(ValueError):
        attraction_weight((0, 0, 0), (1, 1, 1), -1, 750.0)


def test_choose_is_a_cumulative_scan():
    nodes = ["a", "b", "c"]
    w = [1.0, 3.0, 0.0]
    assert choose(nodes, w, FixedDraw(0.1)) == "a"
    assert choose(nodes, w, FixedDraw(0.26)) == "b"
    assert choose(nodes, w, FixedDraw(0.999999)) == "b"
    assert choose(nodes, [0.0, 0.0, 0.0], FixedDraw(0.5)) is None
    with pytest.raises(ValueError):
        choose(nodes, [1.0], FixedDraw(0.5))


def test_choose_frequencies():
    rng = random.Random(4)
    w = np.array([1.0, 2.0, 3.0, 4.0])
    draws = 40_000
    counts = np.zeros(4)
    for _ in range(draws):
        counts[choose(range(4), w, rng)] += 1
    expected = draws * w / w.sum()
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < 16.3      # 3 dof, p = 0.001


def test_autapse_forbidden():
    with pytest.raises(ValueError):
        SynapseProposal(3, 3)


def test_oracle_gather_returns_every_weighted_leaf(pop4k, tree4k):
    searcher = pop4k.neuron(10)
    counter = ExpansionCounter()
    cands = gather_candidates(tree4k.root, searcher.position, searcher.id, DEN, 0.25, counter,
                              oracle=True)
    ids = sorted(c.neuron_id for c in cands)
    assert ids == sorted(set(pop4k.ids.tolist()) - {searcher.id})
    assert counter.nodes_inspected == tree4k.n_nodes - 1


def test_gather_candidates_are_leaves_or_accepted(pop4k, tree4k):
    searcher = pop4k.neuron(0)
    q = np.asarray(searcher.position)
    cands = gather_candidates(tree4k.root, q, searcher.id, DEN, 0.25, ExpansionCounter())
    total = 0
    for c in cands:
        total += c.weight(DEN)
        if not c.is_leaf:
            assert c.max_side / np.linalg.norm(c.centroid(DEN) - q) < 0.25
        assert c.neuron_id != searcher.id
    # the candidate set partitions every other weighted neuron
    assert total == tree4k.root.weight(DEN) - 1


def test_find_target_records_descents(pop4k, tree4k):
    stats = DescentStats()
    prop = find_target(pop4k.neuron(5), tree4k, SearchConfig(0.25, rng_seed=3), stats)
    assert prop is not None and prop.source_id == 5 and prop.target_id != 5
    assert stats.first_descent.nodes_inspected > 0
    assert stats.chosen_path_length == len(stats.subsequent_descents) + 1
    for d in stats.subsequent_descents:
        assert d.nodes_inspected <= 8 and d.stack_pushes == 0


def test_lonely_searcher_finds_nothing():
    pop = Population([0, 1], [(1, 1, 1), (900, 900, 900)], [(1, 1), (1, 0)])
    tree = Octree.build(pop, default_bounds())
    assert find_target(pop.neuron(0), tree, SearchConfig()) is None


@pytest.mark.parametrize("theta,bound", [(0.25, 8), (0.4, 64), (0.5, 512)])
def test_subsequent_descent_bound(pop4k, tree4k, theta, bound):
    _, st = connectivity_update(pop4k, tree4k, SearchConfig(theta, rng_seed=1))
    assert st.max_subsequent_inspected <= bound
    if theta <= 0.25:
        assert st.max_subsequent_pushes == 0
    assert len(set(st.target_ids.tolist())) > 100
    assert not np.any(st.target_ids == st.source_ids)


def test_connectivity_update_deterministic(pop4k, tree4k):
    a, sa = connectivity_update(pop4k, tree4k, SearchConfig(0.3, rng_seed=8), step=2)
    b, sb = connectivity_update(pop4k.copy(), tree4k, SearchConfig(0.3, rng_seed=8), step=2)
    c, _ = connectivity_update(pop4k, tree4k, SearchConfig(0.3, rng_seed=9), step=2)
    assert a == b and sa.total_work == sb.total_work
    assert a != c


def test_find_target_matches_batch(pop4k, tree4k):
    cfg = SearchConfig(0.25, rng_seed=5)
    props, _ = connectivity_update(pop4k, tree4k, cfg, step=1)
    for p in props[:50]:
        one = find_target(pop4k.neuron(pop4k.row_of(p.source_id)), tree4k, cfg, step=1,
                          search_index=p.search_index)
        assert one == p


def test_multiple_axons_get_independent_searches():
    pop = uniform_cube(300, 2, axons=3)
    tree = Octree.build(pop, default_bounds())
    props, st = connectivity_update(pop, tree, SearchConfig(rng_seed=0))
    assert len(props) == 900
    assert sorted({p.search_index for p in props}) == [0, 1, 2]


def test_oracle_mode_distribution_is_naive():
    pop = uniform_cube(400, 17)
    pop.vacant[:, 1] = np.random.default_rng(0).integers(0, 3, 400)
    tree = Octree.build(pop, default_bounds())
    s = pop.neuron(7)
    got = target_distribution(tree, s, SearchConfig(oracle_mode=True))
    ref = naive_distribution(s, pop, DEN, 750.0)
    assert got.keys() == ref.keys()
    assert max(abs(got[k] - ref[k]) for k in ref) <= 1e-12


def test_approximation_close_to_naive(pop4k, tree4k):
    s = pop4k.neuron(100)
    induced = target_distribution(tree4k, s, SearchConfig(0.25))
    assert sum(induced.values()) == pytest.approx(1.0)
    assert total_variation(induced, naive_distribution(s, pop4k, DEN, 750.0)) < 0.02


def test_resolve_conserves_elements():
    pop = uniform_cube(500, 3, axons=2, dendrites=1)
    tree = Octree.build(pop, default_bounds())
    props, _ = connectivity_update(pop, tree, SearchConfig(0.3, rng_seed=2))
    before = pop.vacant.copy()
    formed, unmatched = resolve_proposals(props, pop, CounterRNG(2, 0))
    assert len(formed) + len(unmatched) == len(props)
    assert np.all(pop.vacant >= 0)
    used = before - pop.vacant
    assert used[:, 0].sum() == used[:, 1].sum() == len(formed)
    for p in formed:
        assert p.source_id != p.target_id
    # a target with spare dendrites never turns a proposal away
    rejected_targets = {p.target_id for p in unmatched}
    for t in rejected_targets:
        assert pop.vacant[pop.row_of(t), 1] == 0


def test_resolve_is_order_independent():
    pop = uniform_cube(400, 6, axons=2)
    tree = Octree.build(pop, default_bounds())
    props, _ = connectivity_update(pop, tree, SearchConfig(0.25, rng_seed=4))
    shuffled = list(props)
    random.Random(1).shuffle(shuffled)
    a = resolve_proposals(props, pop.copy(), CounterRNG(4, 0))
    b = resolve_proposals(shuffled, pop.copy(), CounterRNG(4, 0))
    assert sorted(a[0]) == sorted(b[0])


@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 2 ** 40), st.integers(0, 2 ** 20))
@settings(max_examples=200, deadline=None)
def test_counter_rng_range_and_determinism(seed, neuron, step):
    r = CounterRNG(seed, step)
    u = r.draw(neuron, 1, 2)
    assert 0.0 <= u < 1.0
    assert u == CounterRNG(seed, step).draw(neuron, 1, 2)


def test_counter_rng_uniform_and_keyed():
    u = np.array([key_uniform(np.uint64(9), np.uint64(1), np.uint64(0), np.uint64(i),
                              np.uint64(0), np.uint64(0)) for i in range(20_000)])
    hist, _ = np.histogram(u, bins=10, range=(0, 1))
    assert np.all(np.abs(hist - 2000) < 200)
    r = CounterRNG(1, 0)
    assert r.draw(5, 0, 0) != r.draw(5, 0, 1) != r.draw(5, 1, 0)
    assert r.at_step(1).draw(5) != r.draw(5)
