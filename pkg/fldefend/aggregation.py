"""
Global aggregation strategies.

FedAvg with uniform weights 1/M, plus the baseline robust aggregators the
defense is compared against: Krum, coordinatewise trimmed mean and median,
and FoolsGold reweighting on accumulated output-layer updates.

All functions take value inputs and return new ModelParams.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics.pairwise import cosine_similarity

from fldefend.errors import ConfigurationError, RoundSkipped
from fldefend.nn import ModelParams, OutputDelta

logger = logging.getLogger(__name__)


class AggregatorKind(str, Enum):
    FEDAVG = "fedavg"
    KRUM = "krum"
    TMEAN = "tmean"
    MEDIAN = "median"
    FOOLSGOLD = "foolsgold"
    DEFEND = "defend"


@dataclass(frozen=True)
class AggregatorSpec:
    """Which aggregator to run and its parameters.

    trim_count / byzantine_count default to the expected number of malicious
    cohort members (malicious_rate * M), clamped to what M allows.
    """

    kind: AggregatorKind = AggregatorKind.FEDAVG
    trim_count: Optional[int] = None
    byzantine_count: Optional[int] = None
    foolsgold_kappa: float = 1.0

    def resolved_trim_count(self, cohort_size: int, malicious_rate: float) -> int:
        limit = max(0, (cohort_size // 2) - 1)
        if self.trim_count is not None:
            return self.trim_count
        return min(int(round(malicious_rate * cohort_size)), limit)

    def resolved_byzantine_count(self, cohort_size: int, malicious_rate: float) -> int:
        limit = max(0, cohort_size - 3)
        if self.byzantine_count is not None:
            return self.byzantine_count
        return min(int(round(malicious_rate * cohort_size)), limit)

    def validate(self, cohort_size: int) -> None:
        if self.kind == AggregatorKind.TMEAN and self.trim_count is not None:
            if not 0 <= self.trim_count < cohort_size // 2:
                raise ConfigurationError(
                    f"tmean trim_count must be in [0, {cohort_size // 2}) for M={cohort_size}, got {self.trim_count}"
                )
        if self.kind == AggregatorKind.KRUM:
            byzantine = self.byzantine_count if self.byzantine_count is not None else 0
            if byzantine < 0 or cohort_size < byzantine + 3:
                raise ConfigurationError(f"krum needs M >= f + 3, got M={cohort_size}, f={byzantine}")
        if self.foolsgold_kappa <= 0:
            raise ConfigurationError(f"foolsgold_kappa must be > 0, got {self.foolsgold_kappa}")


def _stack(models: Sequence[ModelParams]) -> Tuple[ModelParams, np.ndarray]:
    """Template model and an (M, P) matrix of flattened parameters."""
    if len(models) == 0:
        raise RoundSkipped("no models to aggregate")
    template = models[0]
    for i, model in enumerate(models[1:], start=1):
        if not model.same_architecture(template):
            raise ConfigurationError(f"model {i} has architecture {model.layer_sizes}, expected {template.layer_sizes}")
    return template, np.vstack([m.flatten() for m in models])


def fedavg(models: Sequence[ModelParams]) -> ModelParams:
    """Coordinatewise mean with q_k = 1/M."""
    template, matrix = _stack(models)
    return template.unflatten(matrix.mean(axis=0))


def weighted_average(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Mean with normalized non-negative weights; all-zero weights skip the round."""
    template, matrix = _stack(models)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (matrix.shape[0],) or np.any(weights < 0):
        raise ConfigurationError(f"need {matrix.shape[0]} non-negative weights, got {weights}")
    total = weights.sum()
    if total <= 0:
        raise RoundSkipped("every aggregation weight is zero")
    return template.unflatten((weights / total) @ matrix)


def krum_scores(models: Sequence[ModelParams], byzantine: int) -> np.ndarray:
    """Sum of squared distances to the M - f - 2 nearest other models."""
    _, matrix = _stack(models)
    num_models = matrix.shape[0]
    if byzantine < 0 or num_models < byzantine + 3:
        raise ConfigurationError(f"krum needs M >= f + 3, got M={num_models}, f={byzantine}")
    diffs = matrix[:, None, :] - matrix[None, :, :]
    sq_dist = np.einsum("ijk,ijk->ij", diffs, diffs)
    neighbours = num_models - byzantine - 2
    scores = np.empty(num_models)
    for i in range(num_models):
        others = np.delete(sq_dist[i], i)
        scores[i] = np.sort(others)[:neighbours].sum()
    return scores


def krum_select(models: Sequence[ModelParams], byzantine: int) -> int:
    """Index of the Krum choice; ties go to the lowest index."""
    return int(np.argmin(krum_scores(models, byzantine)))


def krum(models: Sequence[ModelParams], byzantine: int) -> ModelParams:
    return models[krum_select(models, byzantine)].copy()


def trimmed_mean(models: Sequence[ModelParams], trim_count: int) -> ModelParams:
    """Drop the b smallest and b largest values per coordinate, average the rest."""
    template, matrix = _stack(models)
    num_models = matrix.shape[0]
    if trim_count < 0 or num_models <= 2 * trim_count:
        raise ConfigurationError(f"trimmed mean needs M > 2b, got M={num_models}, b={trim_count}")
    if trim_count == 0:
        return fedavg(models)
    ordered = np.sort(matrix, axis=0)
    return template.unflatten(ordered[trim_count:num_models - trim_count].mean(axis=0))


def coordinate_median(models: Sequence[ModelParams]) -> ModelParams:
    """Per-coordinate median; even M takes the mean of the two middle values."""
    template, matrix = _stack(models)
    return template.unflatten(np.median(matrix, axis=0))


def foolsgold_weights(histories: np.ndarray, kappa: float = 1.0) -> np.ndarray:
    """FoolsGold client weights in [0, 1] from per-client update histories.

    Pairwise cosine similarity, per-client max similarity, pardoning of
    clients less similar than their peers, rescale, logit squashing, clamp.
    Zero-norm histories have similarity 0 to everyone.
    """
    histories = np.atleast_2d(np.asarray(histories, dtype=np.float64))
    num_clients = histories.shape[0]
    cs = cosine_similarity(histories) - np.eye(num_clients)
    maxcs = np.max(cs, axis=1)

    # pardoning
    for i in range(num_clients):
        for j in range(num_clients):
            if i == j:
                continue
            if maxcs[i] < maxcs[j] and maxcs[j] > 0:
                cs[i][j] = cs[i][j] * maxcs[i] / maxcs[j]

    wv = 1.0 - np.max(cs, axis=1)
    wv = np.clip(wv, 0.0, 1.0)
    if np.max(wv) <= 0:
        return np.zeros(num_clients)
    wv = wv / np.max(wv)
    wv[wv == 1.0] = 0.99

    # logit
    nonzero = wv != 0
    with np.errstate(divide="ignore"):
        wv[nonzero] = kappa * (np.log(wv[nonzero] / (1.0 - wv[nonzero])) + 0.5)
    wv[np.isinf(wv) | (wv > 1.0)] = 1.0
    wv[wv < 0.0] = 0.0
    return wv


class FoolsGoldHistory:
    """Accumulated flattened output-layer deltas per client, across rounds."""

    def __init__(self):
        self._histories: Dict[int, np.ndarray] = {}

    def update(self, deltas: Sequence[OutputDelta]) -> None:
        for delta in deltas:
            flat = delta.rows.ravel()
            if delta.client_id in self._histories:
                self._histories[delta.client_id] = self._histories[delta.client_id] + flat
            else:
                self._histories[delta.client_id] = flat.copy()

    def matrix(self, client_ids: Sequence[int]) -> np.ndarray:
        missing = [c for c in client_ids if c not in self._histories]
        if missing:
            raise ConfigurationError(f"no FoolsGold history for clients {missing}")
        return np.vstack([self._histories[c] for c in client_ids])

    def weights(self, client_ids: Sequence[int], kappa: float = 1.0) -> np.ndarray:
        return foolsgold_weights(self.matrix(client_ids), kappa)


def foolsgold(
    models: Sequence[ModelParams],
    client_ids: Sequence[int],
    history: FoolsGoldHistory,
    kappa: float = 1.0,
) -> Tuple[ModelParams, np.ndarray]:
    """FoolsGold-weighted average of the cohort; returns (model, weights)."""
    weights = history.weights(client_ids, kappa)
    logger.debug("FoolsGold weights: %s", dict(zip(client_ids, np.round(weights, 4))))
    return weighted_average(models, weights), weights
