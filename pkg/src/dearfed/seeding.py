"""Deterministic, purpose-keyed random streams.

Every stochastic step in the framework draws from its own stream derived
from (experiment seed, purpose id, extra keys). Streams never interleave,
so e.g. swapping the aggregation policy cannot shift client selection or
local-training shuffles.
"""

import numpy as np

FLEET = 0
SELECT = 1
LOCAL_SHUFFLE = 2
DIA = 3
DEFECT_SET = 4
MODEL_INIT = 5
QEEN_INIT = 6
QEEN_TRAIN = 7
AGENT_INIT = 8
AGENT_SAMPLE = 9
REPLAY = 10
CENTRAL = 11
KMEANS = 12


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in key)]))
