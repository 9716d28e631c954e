"""
Random Stream Factory
Counter-based random streams keyed on (replicate, time index, purpose)
"""
from enum import Enum

import numpy as np


class StreamPurpose(Enum):
    """What a stream is used for; part of the stream key"""
    INIT = 0
    ANCESTOR = 1
    KERNEL = 2
    GRAPH = 3
    OBSERVATION = 4


class StreamFactory:
    """
    Derives independent Philox streams from one root seed.

    A stream is identified by (replicate, t, purpose). Particle i always
    consumes position i of a vectorised draw from its stream, so every
    draw is a fixed function of (root_seed, replicate, t, i, purpose)
    no matter how replicates are scheduled across workers.
    """

    def __init__(self, root_seed: int, replicate: int = 0):
        if root_seed < 0:
            raise ValueError(f"Root seed must be non-negative, got {root_seed}")
        if replicate < 0:
            raise ValueError(f"Replicate index must be non-negative, got {replicate}")
        self.root_seed = int(root_seed)
        self.replicate = int(replicate)

    def stream(self, t: int, purpose: StreamPurpose) -> np.random.Generator:
        """Return the generator for time index t and the given purpose"""
        if t < 0:
            raise ValueError(f"Time index must be non-negative, got {t}")
        sequence = np.random.SeedSequence(
            self.root_seed,
            spawn_key=(self.replicate, int(t), purpose.value),
        )
        return np.random.Generator(np.random.Philox(sequence))

    def for_replicate(self, replicate: int) -> 'StreamFactory':
        """Factory sharing the root seed but keyed on another replicate"""
        return StreamFactory(self.root_seed, replicate)


def seeded_stream(seed: int, purpose: StreamPurpose = StreamPurpose.GRAPH) -> np.random.Generator:
    """Stand-alone stream for a user-supplied seed (graph_seed, observation_seed)"""
    return StreamFactory(seed).stream(0, purpose)
