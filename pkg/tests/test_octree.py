import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plastree.geometry import Box3
from plastree.octree import ExpansionCounter, Octree, TreeError, check_invariants, expand
from plastree.population import (ElementKind, Neuron, Population, default_bounds,
                                 read_population, uniform_cube, write_population)

DEN = ElementKind.DENDRITE


def two_neurons():
    return [Neuron(0, (100, 100, 100), {ElementKind.AXON: 1, DEN: 2}),
            Neuron(1, (900, 900, 900), {ElementKind.AXON: 0, DEN: 1})]


def test_two_neurons_split_at_root():
    tree = Octree.build(two_neurons(), default_bounds())
    root = tree.root
    assert not root.is_leaf and root.count == 2
    kids = root.children
    assert len(kids) == 2 and all(k.is_leaf for k in kids)
    assert {k.handle for k in kids} == {(1, 0, 0, 0), (1, 1, 1, 1)}
    assert root.weight(DEN) == 3
    np.testing.assert_allclose(root.centroid(DEN), [(2 * 100 + 900) / 3] * 3)
    assert tree.leaf_of(1).box.min_corner == (500.0, 500.0, 500.0)


def test_single_neuron_tree_is_a_leaf():
    tree = Octree.build([Neuron(5, (1, 2, 3), {DEN: 1})], default_bounds())
    assert tree.root.is_leaf and tree.root.neuron_id == 5
    assert tree.height() == 0


def test_zero_weight_centroid_is_nan():
    pop = uniform_cube(50, 0, dendrites=0)
    tree = Octree.build(pop, default_bounds())
    assert tree.root.weight(DEN) == 0
    assert tree.root.centroid(DEN) is None
    assert np.all(np.isnan(tree.centroid[:, int(DEN)]))
    assert check_invariants(tree, pop) == []


def test_rejects_duplicates_and_outside_points():
    dup = [Neuron(0, (1, 1, 1), {}), Neuron(1, (1, 1, 1), {})]
    with pytest.raises(TreeError):
        Octree.build(dup, default_bounds())
    with pytest.raises((TreeError, ValueError)):
        Octree.build([Neuron(0, (1000, 1, 1), {})], default_bounds())


def test_expand_counts_inspection():
    tree = Octree.build(uniform_cube(64, 1), default_bounds())
    counter = ExpansionCounter()
    kids = expand(tree.root, counter)
    assert counter.nodes_inspected == len(kids) == len(tree.root.children)
    with pytest.raises(ValueError):
        expand(kids[0] if kids[0].is_leaf else tree.leaf_of(0), counter)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.integers(0, 2 ** 31 - 1))
def test_invariants_random(n, seed):
    rng = np.random.default_rng(seed)
    pop = uniform_cube(n, seed)
    pop.vacant[:] = rng.integers(0, 4, size=(n, 2))
    tree = Octree.build(pop, default_bounds())
    assert check_invariants(tree, pop) == []


def test_clustered_population():
    # tight cluster forces deep refinement
    rng = np.random.default_rng(3)
    pos = 500 + rng.random((300, 3)) * 1e-3
    pop = Population(np.arange(300), pos, np.ones((300, 2), int))
    tree = Octree.build(pop, default_bounds())
    assert check_invariants(tree, pop) == []
    assert tree.height() > 15


def _height_bound(pop: Population, bounds: Box3) -> int:
    from scipy.spatial import cKDTree
    d, _ = cKDTree(pop.positions).query(pop.positions, k=2)
    smin = d[:, 1].min()
    return math.floor(math.log2(bounds.diagonal / smin)) + 1


@pytest.mark.parametrize("seed", range(5))
def test_height_bound(seed):
    pop = uniform_cube(2000, seed)
    bounds = default_bounds()
    tree = Octree.build(pop, bounds)
    assert tree.height() <= _height_bound(pop, bounds)


def test_update_touches_only_the_changed_path():
    pop = uniform_cube(500, 2)
    tree = Octree.build(pop, default_bounds())
    before_w = tree.weight.copy()
    before_c = tree.centroid.copy()
    pop.vacant[pop.row_of(123), DEN] += 3
    tree.update(pop)
    changed = np.flatnonzero(np.any(tree.weight != before_w, axis=1)
                             | np.any(tree.centroid != before_c, axis=(1, 2)))
    path = []
    node = tree.leaf_of(123).index
    while node >= 0:
        path.append(node)
        node = tree.parent[node]
    assert set(changed) == set(path)
    assert check_invariants(tree, pop) == []


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 300), st.integers(0, 10 ** 6))
def test_rebuild_equals_update(n, seed):
    rng = np.random.default_rng(seed)
    pop = uniform_cube(n, seed)
    tree = Octree.build(pop, default_bounds())
    pop.vacant[:] = rng.integers(0, 5, size=(n, 2))
    tree.update(pop)
    fresh = Octree.build(pop, default_bounds())
    np.testing.assert_array_equal(tree.weight, fresh.weight)
    np.testing.assert_array_equal(tree.centroid, fresh.centroid)   # bitwise, NaN-aware
    np.testing.assert_array_equal(tree.child, fresh.child)


def test_update_rejects_unknown_ids():
    pop = uniform_cube(10, 0)
    tree = Octree.build(pop, default_bounds())
    other = Population(np.arange(1, 11), pop.positions, pop.vacant)
    with pytest.raises(KeyError):
        tree.update(other)


def test_update_work_counts_nodes():
    pop = uniform_cube(300, 9)
    tree = Octree.build(pop, default_bounds())
    assert tree.update(pop) == tree.n_nodes


def test_handles_round_trip():
    tree = Octree.build(uniform_cube(200, 4), default_bounds())
    for i in range(tree.n_nodes):
        assert tree.index_of_handle(tree.handle(i)) == i


def test_build_is_deterministic():
    pop = uniform_cube(1000, 12)
    a = Octree.build(pop, default_bounds())
    b = Octree.build(pop.copy(), default_bounds())
    np.testing.assert_array_equal(a.centroid, b.centroid)
    np.testing.assert_array_equal(a.child, b.child)


def test_population_file_round_trip(tmp_path):
    pop = uniform_cube(20, 5, axons=2, dendrites=3)
    path = tmp_path / "pop.txt"
    write_population(pop, path)
    text = path.read_text()
    path.write_text("# header comment\n" + text)
    back = read_population(path)
    np.testing.assert_array_equal(back.ids, pop.ids)
    np.testing.assert_array_equal(back.positions, pop.positions)
    np.testing.assert_array_equal(back.vacant, pop.vacant)


@given(arrays(np.int64, (30, 3), elements=st.integers(0, 999_999)))
@settings(max_examples=30, deadline=None)
def test_arbitrary_positions(grid):
    # millesimal grid: adversarial clustering without denormal separations
    pos = np.unique(grid, axis=0) / 1000.0
    pop = Population(np.arange(len(pos)), pos, np.ones((len(pos), 2), int))
    tree = Octree.build(pop, default_bounds())
    assert check_invariants(tree, pop) == []
