"""Acceptance-criterion geometry and the closed-form descent bounds.

Everything here is a pure function of its arguments.  The randomized
counterexample searches are vectorized with numpy and draw from generators
derived deterministically from the caller's seed, so shards of trials can be
replayed independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

SQRT3 = math.sqrt(3.0)
THETA_MAX = 1.0 / SQRT3
#: Largest theta for which every child of an accepted node is accepted too.
THETA_CHILD = 1.0 / (2.0 * SQRT3)

_GENERATION_NAMES = {0: "Self", 1: "Children", 2: "Grandchildren", 3: "Great-Grandchildren"}


class DegenerateGeometryError(ValueError):
    """The query point coincides with a centroid (distance 0)."""


class SingularityError(ValueError):
    """The subdivision bound diverges (theta >= 1/sqrt(3))."""


@dataclass(frozen=True)
class Theta:
    """Opening angle of the acceptance criterion, restricted to (0, 1/sqrt(3)]."""

    value: float

    def __post_init__(self):
        v = float(self.value)
        if not math.isfinite(v) or not (0.0 < v <= THETA_MAX):
            raise ValueError(f"theta must lie in (0, 1/sqrt(3)] = (0, {THETA_MAX:.6f}], got {v}")
        object.__setattr__(self, "value", v)

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box given by its minimum corner and side lengths."""

    min_corner: tuple[float, float, float]
    side_lengths: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(c) for c in self.min_corner)
        sides = tuple(float(s) for s in self.side_lengths)
        if len(lo) != 3 or len(sides) != 3:
            raise ValueError("Box3 needs three coordinates and three side lengths")
        if not all(math.isfinite(c) for c in lo + sides):
            raise ValueError("Box3 components must be finite")
        if min(sides) <= 0.0:
            raise ValueError(f"side lengths must be positive, got {sides}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "side_lengths", sides)

    @classmethod
    def cube(cls, side: float, origin=(0.0, 0.0, 0.0)) -> "Box3":
        return cls(tuple(origin), (side, side, side))

    @classmethod
    def from_corners(cls, lo, hi) -> "Box3":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls(tuple(lo), tuple(hi - lo))

    @property
    def max_corner(self) -> tuple[float, float, float]:
        return tuple(a + s for a, s in zip(self.min_corner, self.side_lengths))

    @property
    def max_side(self) -> float:
        return max(self.side_lengths)

    @property
    def diagonal(self) -> float:
        return math.sqrt(sum(s * s for s in self.side_lengths))

    @property
    def volume(self) -> float:
        l1, l2, l3 = self.side_lengths
        return l1 * l2 * l3

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.min_corner) + 0.5 * np.asarray(self.side_lengths)

    def contains(self, point) -> bool:
        """Half-open containment: min <= x < min + side on every axis."""
        x = np.asarray(point, dtype=float)
        lo = np.asarray(self.min_corner)
        return bool(np.all(x >= lo) and np.all(x < lo + np.asarray(self.side_lengths)))


@dataclass(frozen=True)
class SubdivisionGuarantee:
    m: float
    depth: int
    node_bound: int

    @property
    def generation(self) -> str:
        return _GENERATION_NAMES.get(self.depth, f"depth-{self.depth} descendants")


def _theta_value(theta) -> float:
    return float(theta)


def acceptance(max_side: float, distance: float, theta) -> bool:
    """Acceptance criterion ``max_side / distance < theta`` (strict)."""
    if distance == 0:
        raise DegenerateGeometryError("query point coincides with the centroid")
    if max_side <= 0 or distance < 0:
        raise ValueError("max_side and distance must be positive")
    return (max_side / distance) < _theta_value(theta)


def child_ac_guaranteed(theta) -> bool:
    return _theta_value(theta) <= THETA_CHILD


def required_m(theta) -> float:
    """Per-axis refinement factor 1 / (1 - theta*sqrt(3)) after which every
    descendant of an accepted node is accepted."""
    t = _theta_value(theta)
    denom = 1.0 - t * SQRT3
    if t <= 0:
        raise ValueError("theta must be positive")
    if denom <= 0:
        raise SingularityError(f"refinement bound diverges for theta >= 1/sqrt(3) (got {t})")
    return 1.0 / denom


def subdivision_guarantee(theta) -> SubdivisionGuarantee:
    m = required_m(theta)
    # tolerance keeps theta = 1/(2 sqrt 3) (m == 2 up to rounding) at depth 1
    depth = max(0, math.ceil(math.log2(m) - 1e-12))
    return SubdivisionGuarantee(m=m, depth=depth, node_bound=8 ** depth)


def epsilon_bound(box: Box3, centered: bool = False) -> float:
    """Largest centroid displacement between a node and one of its children.

    ``centered`` assumes centroids stay near box centers (quarter diagonal).
    """
    factor = 0.25 if centered else 1.0
    return factor * box.diagonal


# ---------------------------------------------------------------------------
# randomized theorem checks
# ---------------------------------------------------------------------------

Placement = Literal["anywhere", "centered_quarter"]


@dataclass
class Counterexample:
    theta: float
    side_lengths: np.ndarray
    box_min: np.ndarray
    parent_centroid: np.ndarray
    child_centroid: np.ndarray
    query: np.ndarray
    child_side: float
    parent_ratio: float
    child_ratio: float
    trial: int
    notes: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "theta": self.theta,
            "trial": self.trial,
            "box_min": self.box_min.tolist(),
            "side_lengths": self.side_lengths.tolist(),
            "parent_centroid": self.parent_centroid.tolist(),
            "child_centroid": self.child_centroid.tolist(),
            "query": self.query.tolist(),
            "child_side": self.child_side,
            "parent_ratio": self.parent_ratio,
            "child_ratio": self.child_ratio,
            **self.notes,
        }


_BATCH = 1 << 17


def _unit_vectors(rng: np.random.Generator, k: int) -> np.ndarray:
    v = rng.normal(size=(k, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ball(rng: np.random.Generator, k: int, radius: np.ndarray) -> np.ndarray:
    r = radius * rng.random(k) ** (1.0 / 3.0)
    return _unit_vectors(rng, k) * r[:, None]


def _sample_accepted_parents(rng, k, theta, placement):
    """Boxes, parent centroids and queries with the parent AC satisfied."""
    sides = rng.uniform(0.1, 10.0, size=(k, 3))
    lo = rng.uniform(-100.0, 100.0, size=(k, 3))
    lmax = sides.max(axis=1)
    diag = np.linalg.norm(sides, axis=1)
    if placement == "anywhere":
        p = lo + rng.random((k, 3)) * sides
    else:
        center = lo + 0.5 * sides
        p = center + _ball(rng, k, 0.25 * diag)
    # q at distance (lmax/theta)*u, u in (1, 3]
    u = 3.0 - 2.0 * rng.random(k)
    q = p + _unit_vectors(rng, k) * ((lmax / theta) * u)[:, None]
    return sides, lo, lmax, diag, p, q


def _closest_point(lo, sides, q):
    return np.clip(q, lo, lo + sides)


def _child_centroids(rng, placement, lo, sides, diag, p, q):
    """Random and worst-case child centroids allowed by the placement model."""
    k = len(p)
    if placement == "anywhere":
        rand = lo + rng.random((k, 3)) * sides
        worst = _closest_point(lo, sides, q)
    else:
        radius = 0.25 * diag
        rand = p + _ball(rng, k, radius)
        toward = q - p
        toward /= np.linalg.norm(toward, axis=1, keepdims=True)
        worst = p + toward * radius[:, None]
    return rand, worst


def _search(theta, trials, rng_seed, placement, scale_of, label):
    if trials <= 0:
        raise ValueError("trials must be positive")
    if placement not in ("anywhere", "centered_quarter"):
        raise ValueError(f"unknown centroid placement {placement!r}")
    theta = _theta_value(theta)
    if theta <= 0:
        raise ValueError("theta must be positive")
    seeds = np.random.SeedSequence(rng_seed).spawn((trials + _BATCH - 1) // _BATCH)
    done = 0
    for shard in seeds:
        rng = np.random.default_rng(shard)
        k = min(_BATCH, trials - done)
        sides, lo, lmax, diag, p, q = _sample_accepted_parents(rng, k, theta, placement)
        parent_ratio = lmax / np.linalg.norm(p - q, axis=1)
        ok_parent = parent_ratio < theta
        child_side = lmax * scale_of
        for pc in _child_centroids(rng, placement, lo, sides, diag, p, q):
            dist = np.linalg.norm(pc - q, axis=1)
            with np.errstate(divide="ignore"):
                child_ratio = np.where(dist > 0, child_side / dist, np.inf)
            bad = np.flatnonzero(ok_parent & ~(child_ratio < theta))
            if bad.size:
                i = bad[0]
                return Counterexample(
                    theta=theta, side_lengths=sides[i], box_min=lo[i],
                    parent_centroid=p[i], child_centroid=pc[i], query=q[i],
                    child_side=float(child_side[i]), parent_ratio=float(parent_ratio[i]),
                    child_ratio=float(child_ratio[i]), trial=done + int(i),
                    notes={"placement": placement, "check": label},
                )
        done += k
    return None


def find_ac_counterexample(theta, trials: int, rng_seed: int,
                           centroid_placement: Placement = "anywhere",
                           child_scale: float = 0.5) -> Optional[Counterexample]:
    """Search for an accepted parent whose child fails the criterion.

    ``theta`` is a plain positive number here (not a :class:`Theta`) because the
    centered-centroid refinement is meaningful up to theta = 1.  Each trial
    checks a random child centroid and the worst admissible one (closest to the
    query).  ``child_scale`` is the child-to-parent side ratio; anything other
    than 0.5 is a deliberately broken tree used for mutation testing.
    """
    return _search(theta, trials, rng_seed, centroid_placement, child_scale, "children")


def find_subdivision_counterexample(theta, trials: int, rng_seed: int,
                                    depth: Optional[int] = None) -> Optional[Counterexample]:
    """Check that descendants ``depth`` levels below an accepted node are all
    accepted, centroids anywhere in the parent box.  Depth defaults to the
    guaranteed one for ``theta``."""
    if depth is None:
        depth = subdivision_guarantee(theta).depth
    return _search(theta, trials, rng_seed, "anywhere", 0.5 ** depth, f"depth-{depth}")
