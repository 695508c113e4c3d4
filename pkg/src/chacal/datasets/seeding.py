from __future__ import annotations

import numpy as np


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` under master ``seed``.

    SeedSequence hashes (seed, index) so any sample can be generated alone,
    in any order or worker, and still come out identical.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
