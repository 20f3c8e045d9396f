"""
Wall-clock scaling of one DEFEND detection pass over the cohort size M.

The output layer is wide so the per-client work (deltas, norms, GMM passes)
outweighs the fixed cost of a call; doubling M should then roughly double
the time.
"""

import logging
import time
from typing import List, Sequence

import numpy as np
import pandas as pd

from fldefend.defend import DefendParams, DefendServer
from fldefend.nn import ModelParams, init_params

logger = logging.getLogger(__name__)

COHORT_SIZES = (10, 20, 40, 80)
LAYER_SIZES = (8, 4096, 5)
REPEATS = 15
WARMUP = 2
POISONED_SHARE = 0.3


def synthetic_cohort(global_params: ModelParams, size: int, seed: int) -> List[ModelParams]:
    """
    Local models around the global one; the first 30% share a planted 1->4 shift.

    Args:
        global_params: Model the deltas are taken against
        size: Number of clients in the cohort
        seed: Seed for the perturbations

    Returns:
        List of local models, one per client
    """
    rng = np.random.default_rng(seed)
    flat = global_params.flatten()
    models = []
    for i in range(size):
        local = global_params.unflatten(flat + rng.normal(0.0, 0.01, size=flat.shape))
        if i < int(POISONED_SHARE * size):
            local.weights[-1][0] -= 0.5
            local.weights[-1][3] += 0.5
        models.append(local)
    return models


def time_detection(size: int, layer_sizes: Sequence[int] = LAYER_SIZES, repeats: int = REPEATS) -> float:
    """Median wall-clock seconds of one detection pass for a cohort of the given size."""
    global_params = init_params(list(layer_sizes), seed=0)
    models = synthetic_cohort(global_params, size, seed=size)
    ids = list(range(size))
    server = DefendServer(ids, DefendParams(validation_enabled=False), server_val=None, seed=0)

    for _ in range(WARMUP):
        server.detect(global_params, models, ids, round=1)
    durations = []
    for _ in range(repeats):
        started = time.perf_counter()
        server.detect(global_params, models, ids, round=1)
        durations.append(time.perf_counter() - started)
    return float(np.median(durations))


def detection_timings(
    sizes: Sequence[int] = COHORT_SIZES, layer_sizes: Sequence[int] = LAYER_SIZES, repeats: int = REPEATS
) -> pd.DataFrame:
    """One row per cohort size: median seconds and the ratio to the previous size."""
    rows = []
    for size in sizes:
        seconds = time_detection(size, layer_sizes, repeats)
        logger.info("M=%d: %.3f ms per detection", size, seconds * 1000)
        rows.append({"cohort_size": size, "median_seconds": seconds})
    df = pd.DataFrame(rows)
    df["ratio_to_previous"] = df["median_seconds"] / df["median_seconds"].shift(1)
    return df
