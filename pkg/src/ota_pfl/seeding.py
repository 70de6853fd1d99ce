"""Deterministic substream derivation for every source of randomness.

Every stochastic component draws from its own generator keyed by
(base seed, stream tag, *indices).  Identical keys reproduce identical
draws on any platform and under any execution order, which is what makes
runs bit-reproducible regardless of client scheduling or worker count.
"""

import numpy as np

# Stream tags.  Each consumer of randomness gets a distinct namespace so
# that e.g. adding channel draws never perturbs batch sampling.
CHANNEL = 1
GLOBAL_BATCH = 2
LOCAL_BATCH = 3
MODEL_GEN = 4
SYNTH_DATA = 5
PARTITION = 6
LABEL_NOISE = 7
INIT = 8
SYNTH_MULTI = 9


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return a Generator keyed by (seed, *key); nonnegative integers only."""
    parts = [int(seed), *[int(k) for k in key]]
    if any(p < 0 for p in parts):
        raise ValueError(f"substream keys must be nonnegative, got {parts}")
    return np.random.default_rng(np.random.SeedSequence(parts))
