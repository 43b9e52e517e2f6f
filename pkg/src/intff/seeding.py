"""Deterministic per-subsystem RNG streams derived from one master seed.

Each subsystem draws from its own stream so that, e.g., changing the noise
seed never perturbs weight initialization.  A stream is identified by a
fixed domain constant combined with the master seed.
"""

import numpy as np

DOMAIN_INIT = 0
DOMAIN_SHUFFLE = 1
DOMAIN_NEGATIVES = 2
DOMAIN_NOISE = 3
DOMAIN_SPLIT = 4
DOMAIN_READOUT = 5


def stream(master_seed: int, domain: int) -> np.random.Generator:
    """Generator for one subsystem, deterministic in (master_seed, domain)."""
    return np.random.default_rng([domain, master_seed])
