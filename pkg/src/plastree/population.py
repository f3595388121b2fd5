"""Neuron populations: in-memory arrays, generators and the text file format."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box3


class ElementKind(enum.IntEnum):
    AXON = 0
    DENDRITE = 1

    @property
    def opposite(self) -> "ElementKind":
        return ElementKind(1 - int(self))


@dataclass
class Neuron:
    id: int
    position: tuple[float, float, float]
    vacant: dict[ElementKind, int]

    def __post_init__(self):
        self.position = tuple(float(c) for c in self.position)
        self.vacant = {ElementKind.AXON: int(self.vacant.get(ElementKind.AXON, 0)),
                       ElementKind.DENDRITE: int(self.vacant.get(ElementKind.DENDRITE, 0))}
        if min(self.vacant.values()) < 0:
            raise ValueError(f"neuron {self.id}: vacant counts must be >= 0")


class Population:
    """Column store of neurons: ``ids`` (n,), ``positions`` (n, 3), ``vacant`` (n, 2).

    ``vacant[:, ElementKind.AXON]`` and ``vacant[:, ElementKind.DENDRITE]`` are the
    vacant element counts used as Barnes-Hut weights.
    """

    def __init__(self, ids, positions, vacant):
        self.ids = np.ascontiguousarray(ids, dtype=np.int64)
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        self.vacant = np.ascontiguousarray(vacant, dtype=np.int64).reshape(-1, 2)
        n = len(self.ids)
        if self.positions.shape[0] != n or self.vacant.shape[0] != n:
            raise ValueError("ids, positions and vacant must have the same length")
        if len(np.unique(self.ids)) != n:
            raise ValueError("neuron ids must be unique")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if np.any(self.vacant < 0):
            raise ValueError("vacant counts must be >= 0")
        self._row = None

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_neurons(cls, neurons: Iterable[Neuron]) -> "Population":
        neurons = list(neurons)
        return cls(
            [nr.id for nr in neurons],
            np.array([nr.position for nr in neurons], dtype=float).reshape(-1, 3),
            [[nr.vacant[ElementKind.AXON], nr.vacant[ElementKind.DENDRITE]] for nr in neurons],
        )

    def copy(self) -> "Population":
        return Population(self.ids.copy(), self.positions.copy(), self.vacant.copy())

    def subset(self, rows) -> "Population":
        rows = np.asarray(rows)
        return Population(self.ids[rows], self.positions[rows], self.vacant[rows])

    def row_of(self, neuron_id: int) -> int:
        if self._row is None:
            self._row = {int(i): r for r, i in enumerate(self.ids)}
        try:
            return self._row[int(neuron_id)]
        except KeyError:
            raise KeyError(f"unknown neuron id {neuron_id}") from None

    def neuron(self, row: int) -> Neuron:
        return Neuron(
            int(self.ids[row]), tuple(self.positions[row]),
            {ElementKind.AXON: int(self.vacant[row, 0]),
             ElementKind.DENDRITE: int(self.vacant[row, 1])},
        )

    def neurons(self) -> list[Neuron]:
        return [self.neuron(r) for r in range(len(self))]

    def total_vacant(self) -> int:
        return int(self.vacant.sum())


def uniform_cube(n: int, seed: int, side: float = 1000.0,
                 axons: int = 1, dendrites: int = 1) -> Population:
    """``n`` neurons uniform in ``[0, side)^3`` with a fixed vacancy profile."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    pos = rng.random((n, 3)) * side
    while True:
        _, first = np.unique(pos, axis=0, return_index=True)
        if len(first) == n:
            break
        dup = np.setdiff1d(np.arange(n), first)
        pos[dup] = rng.random((len(dup), 3)) * side
    vacant = np.empty((n, 2), dtype=np.int64)
    vacant[:, 0] = axons
    vacant[:, 1] = dendrites
    return Population(np.arange(n), pos, vacant)


def default_bounds(side: float = 1000.0) -> Box3:
    return Box3.cube(side)


def read_population(path) -> Population:
    """Parse ``id x y z vacant_axons vacant_dendrites`` records; ``#`` lines are skipped."""
    ids, pos, vac = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        ids.append(int(parts[0]))
        pos.append([float(v) for v in parts[1:4]])
        vac.append([int(parts[4]), int(parts[5])])
    return Population(ids, np.array(pos).reshape(-1, 3), np.array(vac).reshape(-1, 2))


def write_population(pop: Population, path) -> None:
    with open(path, "w") as fh:
        fh.write("# id x y z vacant_axons vacant_dendrites\n")
        for i, (x, y, z), (a, d) in zip(pop.ids, pop.positions, pop.vacant):
            fh.write(f"{i} {float(x)!r} {float(y)!r} {float(z)!r} {a} {d}\n")


def as_population(neurons: "Population | Sequence[Neuron]") -> Population:
    if isinstance(neurons, Population):
        return neurons
    return Population.from_neurons(neurons)
