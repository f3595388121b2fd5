"""Naive all-pairs partner selection, the ground truth for the tree search.

Works only on the flat population arrays and never touches an octree.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .population import ElementKind, Neuron, Population


def naive_distribution(searcher: Neuron, population: Population, kind: ElementKind,
                       kernel_sigma: float) -> dict[int, float]:
    """P(j) proportional to vacant_j(kind) * exp(-|q - x_j|^2 / sigma^2), searcher excluded."""
    if len(population) == 0:
        return {}
    q = np.asarray(searcher.position, dtype=float)
    w = population.vacant[:, int(kind)].astype(float)
    d2 = np.sum((population.positions - q) ** 2, axis=1)
    att = w * np.exp(-d2 / kernel_sigma ** 2)
    att[population.ids == searcher.id] = 0.0
    total = att.sum()
    if not total > 0:
        return {}
    keep = att > 0
    return dict(zip(population.ids[keep].tolist(), (att[keep] / total).tolist()))


def naive_pick(searcher: Neuron, population: Population, kind: ElementKind,
               kernel_sigma: float, rng) -> Optional[int]:
    """Sample ``naive_distribution`` with one uniform draw from ``rng``."""
    dist = naive_distribution(searcher, population, kind, kernel_sigma)
    if not dist:
        return None
    ids = np.fromiter(dist.keys(), dtype=np.int64)
    cdf = np.cumsum(np.fromiter(dist.values(), dtype=float))
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(ids[min(i, len(ids) - 1)])


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def empirical_distribution(samples) -> dict[int, float]:
    vals, counts = np.unique(np.asarray(list(samples), dtype=np.int64), return_counts=True)
    total = counts.sum()
    return {int(v): c / total for v, c in zip(vals, counts)} if total else {}
