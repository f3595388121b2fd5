"""Barnes-Hut octree search for synapse formation in structural plasticity."""

from .geometry import (THETA_CHILD, THETA_MAX, Box3, DegenerateGeometryError, SingularityError,
                       SubdivisionGuarantee, Theta, acceptance, child_ac_guaranteed,
                       epsilon_bound, required_m, subdivision_guarantee)
from .octree import ExpansionCounter, Octree, OctreeNode, check_invariants
from .plasticity import (SearchConfig, SynapseProposal, UpdateStats, connectivity_update,
                         find_target, resolve_proposals)
from .population import ElementKind, Neuron, Population, uniform_cube
from .rng import CounterRNG

__version__ = "0.1.0"

__all__ = [
    "THETA_CHILD", "THETA_MAX", "Box3", "DegenerateGeometryError", "SingularityError",
    "SubdivisionGuarantee", "Theta", "acceptance", "child_ac_guaranteed", "epsilon_bound",
    "required_m", "subdivision_guarantee", "ExpansionCounter", "Octree", "OctreeNode",
    "check_invariants", "SearchConfig", "SynapseProposal", "UpdateStats",
    "connectivity_update", "find_target", "resolve_proposals", "ElementKind", "Neuron",
    "Population", "uniform_cube", "CounterRNG",
]
