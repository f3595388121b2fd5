"""Counter-based random numbers.

Every draw is a pure function of an integer key, so results do not depend on
the order in which neurons (or ranks) are processed.
"""

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1

# stream tags keep search draws and resolution priorities apart
STREAM_SEARCH = 1
STREAM_RESOLVE = 2
STREAM_POPULATION = 3


@njit(cache=True)
def _mix(z):
    # splitmix64 finalizer
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def key_uniform(seed, stream, step, neuron_id, search_index, descent):
    """Uniform double in [0, 1) determined entirely by the key tuple."""
    golden = np.uint64(0x9E3779B97F4A7C15)
    h = _mix(np.uint64(seed) + golden)
    h = _mix(h ^ (np.uint64(stream) + golden))
    h = _mix(h ^ (np.uint64(step) + golden))
    h = _mix(h ^ (np.uint64(neuron_id) + golden))
    h = _mix(h ^ (np.uint64(search_index) + golden))
    h = _mix(h ^ (np.uint64(descent) + golden))
    return float(h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


class CounterRNG:
    """Keyed generator bound to a seed and an update step.

    ``draw`` never advances hidden state; two calls with the same key agree.
    """

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed) & _MASK
        self.step = int(step)

    def at_step(self, step: int) -> "CounterRNG":
        return CounterRNG(self.seed, step)

    def draw(self, neuron_id: int, search_index: int = 0, descent: int = 0,
             stream: int = STREAM_SEARCH) -> float:
        return key_uniform(np.uint64(self.seed), np.uint64(stream),
                           np.uint64(self.step & _MASK), np.uint64(neuron_id & _MASK),
                           np.uint64(search_index & _MASK), np.uint64(descent & _MASK))

    def generator(self, *key: int) -> np.random.Generator:
        """A numpy Generator seeded from (seed, *key), for bulk non-search sampling."""
        return np.random.default_rng([self.seed, *[int(k) & _MASK for k in key]])
