"""Counter-style random substreams derived from one master seed.

Every random draw in the package goes through :func:`substream` with a key
that names *what* is being drawn (user, realization, round...). Work can then
be split or reordered without changing a single sample.
"""

import numpy as np

# Stream tags; the first element of every spawn key.
BS_IRS = 1
USER_CHANNEL = 2
MEASUREMENT = 3
INIT = 4
ROUND_MASK = 5
DOWNLINK = 6
UPLINK = 7
LOCAL_BATCH = 8
SHUFFLE = 9
TEST_CHANNEL = 10
TEST_MEASUREMENT = 11


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))
