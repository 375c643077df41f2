"""Deterministic RNG derivation from structured integer keys.

Every randomized routine takes (tag, base_seed, *context) so that reruns
with the same config reproduce bit-identical draws while distinct call
sites never share a stream.
"""
import numpy as np

_MASK = (1 << 63) - 1

TAG_PARTITION = 1
TAG_SUBGRAPH = 2
TAG_DROPOUT = 3
TAG_NEGSAMPLE = 4
TAG_EMBED = 5
TAG_BFS = 6
TAG_EVALNEG = 7
TAG_PARAM_INIT = 8
TAG_COLD = 9
TAG_FIXTURE = 10


def derived_rng(*keys):
    entries = [int(k) & _MASK for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entries))


def mix(*keys):
    """Collapse structured keys into one stable integer seed."""
    entries = [int(k) & _MASK for k in keys]
    return int(np.random.SeedSequence(entries).generate_state(1, np.uint64)[0])
