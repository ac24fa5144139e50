"""Single source of randomness: Philox, a counter-based bit generator."""

from __future__ import annotations

import numpy as np


def generator(seed) -> np.random.Generator:
    """``seed`` may be an int or a ``SeedSequence``."""
    return np.random.Generator(np.random.Philox(seed))
