"""
DEFEND server pipeline.

Per round the server:
  1. takes each client's output-layer change and its per-neuron l2 norms,
  2. sums the norms over the cohort and calls the two largest neurons the
     attack goal (f', g'), f' < g',
  3. clusters the clients' unit-scaled f'/g' rows with a 2-component GMM
     and drops the denser cluster when it is clearly the tighter one,
  4. averages the rest, then rolls back to the previous global model if
     SRec/ASR for (f', g') on the server's validation split degrade past
     the thresholds,
  5. rewards clean clients, penalizes flagged ones and blacklists anyone
     whose rating hits the floor.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np
from sklearn.preprocessing import normalize

from fldefend import gmm
from fldefend.aggregation import fedavg
from fldefend.data import Dataset
from fldefend.errors import ConfigurationError, RoundSkipped, UninformativeClusteringError
from fldefend.metrics import evaluate
from fldefend.nn import ModelParams, OutputDelta, output_layer_delta
from fldefend.utils import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DefendParams:
    """Defense constants: validation thresholds, rating bounds and steps, GMM limits."""

    srec_threshold: float = 0.1
    asr_threshold: float = 0.1
    rating_min: float = 0.0
    rating_max: float = 1.0
    rating_init_fraction: float = 0.8
    reward: float = 0.05
    penalty: float = 0.20
    gmm_max_iter: int = 200
    gmm_tol: float = 1e-8
    max_spread_ratio: float = 0.5
    detection_enabled: bool = True
    validation_enabled: bool = True

    @property
    def initial_rating(self) -> float:
        return round(self.rating_init_fraction * (self.rating_max - self.rating_min), 10)

    def validate(self) -> None:
        if not self.rating_min < self.rating_max:
            raise ConfigurationError("rating_min must be below rating_max")
        if not 0.0 <= self.rating_init_fraction <= 1.0:
            raise ConfigurationError(f"rating_init_fraction must be in [0, 1], got {self.rating_init_fraction}")
        for name in ("reward", "penalty"):
            value = getattr(self, name)
            if not 0.0 < value <= self.rating_max:
                raise ConfigurationError(f"{name} must be in (0, rating_max], got {value}")
        if self.srec_threshold < 0 or self.asr_threshold < 0:
            raise ConfigurationError("validation thresholds must be >= 0")
        if self.gmm_max_iter < 1 or self.gmm_tol <= 0:
            raise ConfigurationError("gmm_max_iter must be >= 1 and gmm_tol > 0")
        if not 0.0 < self.max_spread_ratio <= 1.0:
            raise ConfigurationError(f"max_spread_ratio must be in (0, 1], got {self.max_spread_ratio}")


@dataclass(frozen=True)
class MagnitudeTable:
    client_ids: Tuple[int, ...]
    per_client: np.ndarray  # (M, E)
    accumulated: np.ndarray  # (E,)


@dataclass(frozen=True)
class AttackGoal:
    source: int
    target: int
    round: int = 0

    def __post_init__(self):
        if not self.source < self.target:
            raise ConfigurationError(f"attack goal needs source < target, got ({self.source}, {self.target})")

    @property
    def pair(self) -> Tuple[int, int]:
        return (self.source, self.target)


@dataclass(frozen=True)
class FeatureMatrix:
    client_ids: Tuple[int, ...]
    values: np.ndarray  # (M, 2 * (d_l + 1)), f' row then g' row


@dataclass(frozen=True)
class ClusteringResult:
    outliers: FrozenSet[int]
    labels: Optional[np.ndarray] = None
    responsibilities: Optional[np.ndarray] = None
    bad_component: Optional[int] = None
    degenerate: bool = False
    model: Optional[gmm.GmmModel] = None
    spread_ratio: Optional[float] = None


@dataclass(frozen=True)
class ValidationState:
    srec_old: float = 0.0
    asr_old: float = 1.0
    srec_threshold: float = 0.1
    asr_threshold: float = 0.1
    pair: Optional[Tuple[int, int]] = None


@dataclass(frozen=True)
class RatingTable:
    ratings: Dict[int, float]
    rating_min: float = 0.0
    rating_max: float = 1.0
    reward: float = 0.05
    penalty: float = 0.20

    @classmethod
    def initial(cls, client_ids: Iterable[int], params: DefendParams) -> "RatingTable":
        return cls(
            ratings={int(c): params.initial_rating for c in client_ids},
            rating_min=params.rating_min,
            rating_max=params.rating_max,
            reward=params.reward,
            penalty=params.penalty,
        )

    def __getitem__(self, client_id: int) -> float:
        return self.ratings[client_id]


@dataclass(frozen=True)
class Blacklist:
    members: FrozenSet[int] = field(default_factory=frozenset)

    def __contains__(self, client_id: int) -> bool:
        return client_id in self.members

    def __len__(self) -> int:
        return len(self.members)

    def with_members(self, client_ids: Iterable[int]) -> "Blacklist":
        return Blacklist(self.members | frozenset(client_ids))


@dataclass(frozen=True)
class DetectionReport:
    round: int
    magnitudes: MagnitudeTable
    goal: AttackGoal
    features: FeatureMatrix
    clustering: ClusteringResult
    duration_seconds: float

    @property
    def outliers(self) -> FrozenSet[int]:
        return self.clustering.outliers


def compute_magnitudes(deltas: Sequence[OutputDelta]) -> MagnitudeTable:
    """Per-client, per-neuron l2 norms and their sums over the cohort.

    Rows are reduced in ascending client-id order.
    """
    if len(deltas) == 0:
        raise ConfigurationError("need at least one output delta")
    num_classes = deltas[0].num_classes
    if any(d.num_classes != num_classes for d in deltas):
        raise ConfigurationError("output deltas disagree on the number of classes")

    ordered = sorted(deltas, key=lambda d: d.client_id)
    per_client = np.vstack([np.sqrt(np.sum(d.rows * d.rows, axis=1)) for d in ordered])
    return MagnitudeTable(
        client_ids=tuple(d.client_id for d in ordered),
        per_client=per_client,
        accumulated=per_client.sum(axis=0),
    )


def identify_goal(table: MagnitudeTable, round: int = 0) -> AttackGoal:
    """Top-2 neurons by accumulated magnitude; the smaller class id is f'."""
    accumulated = np.asarray(table.accumulated)
    if accumulated.shape[0] < 2:
        raise ConfigurationError("need at least two output neurons to identify a goal")
    top = np.argsort(-accumulated, kind="stable")[:2]
    return AttackGoal(source=int(top.min()) + 1, target=int(top.max()) + 1, round=round)


def extract_features(deltas: Sequence[OutputDelta], goal: AttackGoal) -> FeatureMatrix:
    """One row per client (ascending id): Δ row of f' followed by Δ row of g'."""
    ordered = sorted(deltas, key=lambda d: d.client_id)
    if ordered and goal.target > ordered[0].num_classes:
        raise ConfigurationError(f"goal {goal.pair} outside classes 1..{ordered[0].num_classes}")
    values = np.vstack([np.concatenate([d.row(goal.source), d.row(goal.target)]) for d in ordered])
    return FeatureMatrix(client_ids=tuple(d.client_id for d in ordered), values=values)


def cluster_features(
    features: FeatureMatrix,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-8,
    max_spread_ratio: float = 0.5,
) -> ClusteringResult:
    """GMM clustering of the feature rows; the denser cluster are the outliers.

    Rows are scaled to unit length first: poisoned updates agree in
    direction while their size follows the shard size. The denser cluster
    is only excluded when it has at least two members and its spread is at
    most max_spread_ratio times the other cluster's. Any uninformative
    outcome (too few rows, degenerate fit, empty cluster, no clear
    separation) excludes nobody.
    """
    if len(features.client_ids) < 2:
        logger.warning("only %d client(s) in the cohort, skipping GMM detection", len(features.client_ids))
        return ClusteringResult(outliers=frozenset(), degenerate=True)

    points = normalize(features.values)
    model = gmm.fit(points, seed=seed, max_iter=max_iter, tol=tol)
    if model.degenerate:
        logger.warning("degenerate GMM fit, no clients excluded this round")
        return ClusteringResult(outliers=frozenset(), degenerate=True, model=model)

    labels, resp = gmm.assign(model, points)
    try:
        bad = gmm.denser_cluster(model, points, labels)
    except UninformativeClusteringError as e:
        logger.warning("uninformative clustering (%s), no clients excluded this round", e)
        return ClusteringResult(outliers=frozenset(), labels=labels, responsibilities=resp, degenerate=True, model=model)

    spreads, sizes = gmm.cluster_spreads(model, points, labels)
    other = 1 - bad
    ratio = float(spreads[bad] / spreads[other]) if spreads[other] > 0 else 1.0
    if sizes[bad] < 2 or ratio > max_spread_ratio:
        logger.info(
            "no clear compact group (size %d, spread ratio %.3f), no clients excluded this round",
            sizes[bad], ratio,
        )
        return ClusteringResult(
            outliers=frozenset(), labels=labels, responsibilities=resp, model=model, spread_ratio=ratio
        )

    outliers = frozenset(c for c, label in zip(features.client_ids, labels) if label == bad)
    return ClusteringResult(
        outliers=outliers, labels=labels, responsibilities=resp, bad_component=bad, model=model, spread_ratio=ratio
    )


def detect_poisoned(
    features: FeatureMatrix,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-8,
    max_spread_ratio: float = 0.5,
) -> FrozenSet[int]:
    """Client ids deemed poisoned this round."""
    return cluster_features(
        features, seed=seed, max_iter=max_iter, tol=tol, max_spread_ratio=max_spread_ratio
    ).outliers


def filtered_aggregate(
    models: Sequence[ModelParams], client_ids: Sequence[int], outliers: Iterable[int]
) -> ModelParams:
    """Uniform FedAvg over clients not in outliers."""
    excluded = set(outliers)
    survivors = [m for m, c in zip(models, client_ids) if c not in excluded]
    if not survivors:
        raise RoundSkipped(f"all {len(models)} cohort models were flagged")
    return fedavg(survivors)


def apply_validation_gate(
    srec_new: float, asr_new: float, state: ValidationState
) -> Tuple[bool, ValidationState]:
    """Reject when SRec drops by more than its threshold or ASR rises by more than its.

    Accepting moves the baseline to the new metrics; rejecting keeps the
    last accepted ones.
    """
    delta_srec = srec_new - state.srec_old
    delta_asr = asr_new - state.asr_old
    if delta_srec < -state.srec_threshold or delta_asr > state.asr_threshold:
        return False, state
    return True, replace(state, srec_old=srec_new, asr_old=asr_new)


def validate_global(
    candidate: ModelParams,
    goal: AttackGoal,
    server_val: Dataset,
    state: ValidationState,
    previous: Optional[ModelParams] = None,
) -> Tuple[bool, ValidationState]:
    """Accept or roll back a freshly aggregated global model.

    When the goal differs from the pair the stored metrics belong to and the
    previously deployed model is given, the baseline is re-measured on it.
    """
    if len(server_val) == 0 or not np.any(server_val.labels == goal.source):
        logger.warning("server validation split has no samples of class %d, accepting without validation", goal.source)
        return True, state

    if state.pair is not None and state.pair != goal.pair and previous is not None:
        baseline = evaluate(previous, server_val, goal.pair)
        state = replace(state, srec_old=baseline.srec, asr_old=baseline.asr, pair=goal.pair)
    elif state.pair is None:
        state = replace(state, pair=goal.pair)

    snapshot = evaluate(candidate, server_val, goal.pair)
    accepted, new_state = apply_validation_gate(snapshot.srec, snapshot.asr, state)
    if not accepted:
        logger.info(
            "rolling back: SRec %.3f -> %.3f, ASR %.3f -> %.3f for goal %s",
            state.srec_old, snapshot.srec, state.asr_old, snapshot.asr, goal.pair,
        )
    return accepted, new_state


def update_ratings(
    cohort: Iterable[int], outliers: Iterable[int], ratings: RatingTable, blacklist: Blacklist
) -> Tuple[RatingTable, Blacklist]:
    """Reward clean participants, penalize flagged ones, blacklist at the floor."""
    flagged = set(outliers)
    updated = dict(ratings.ratings)
    newly_blacklisted = []
    for client_id in cohort:
        if client_id not in updated:
            raise ConfigurationError(f"client {client_id} has no rating entry")
        if client_id in flagged:
            value = max(updated[client_id] - ratings.penalty, ratings.rating_min)
        else:
            value = min(updated[client_id] + ratings.reward, ratings.rating_max)
        # Ratings move on a fixed decimal grid so repeated steps land exactly on the bounds.
        updated[client_id] = round(value, 10)
        if updated[client_id] <= ratings.rating_min and client_id not in blacklist:
            newly_blacklisted.append(client_id)

    if newly_blacklisted:
        logger.info("blacklisting clients %s", sorted(newly_blacklisted))
    return replace(ratings, ratings=updated), blacklist.with_members(newly_blacklisted)


@dataclass(frozen=True)
class DefendRoundResult:
    model: ModelParams
    accepted: bool
    skipped: bool
    report: DetectionReport


class DefendServer:
    """Server-side DEFEND state: ratings, blacklist and the validation baseline."""

    def __init__(self, client_ids: Iterable[int], params: DefendParams, server_val: Dataset, seed: int = 0):
        params.validate()
        self.params = params
        self.server_val = server_val
        self.seed = seed
        self.ratings = RatingTable.initial(client_ids, params)
        self.blacklist = Blacklist()
        self.validation = ValidationState(
            srec_threshold=params.srec_threshold, asr_threshold=params.asr_threshold
        )

    def detect(self, global_params: ModelParams, models: Sequence[ModelParams], client_ids: Sequence[int], round: int) -> DetectionReport:
        started = time.perf_counter()
        deltas = [output_layer_delta(m, global_params, c, round) for m, c in zip(models, client_ids)]
        table = compute_magnitudes(deltas)
        goal = identify_goal(table, round)
        features = extract_features(deltas, goal)
        if self.params.detection_enabled:
            clustering = cluster_features(
                features,
                seed=derive_seed(self.seed, "gmm", round),
                max_iter=self.params.gmm_max_iter,
                tol=self.params.gmm_tol,
                max_spread_ratio=self.params.max_spread_ratio,
            )
        else:
            clustering = ClusteringResult(outliers=frozenset())
        duration = time.perf_counter() - started
        logger.debug("round %d magnitudes %s, goal %s", round, np.round(table.accumulated, 4), goal.pair)
        return DetectionReport(round, table, goal, features, clustering, duration)

    def aggregate_round(
        self, global_params: ModelParams, models: Sequence[ModelParams], client_ids: Sequence[int], round: int
    ) -> DefendRoundResult:
        """Run the whole per-round pipeline and update the server state."""
        report = self.detect(global_params, models, client_ids, round)

        skipped = False
        accepted = True
        try:
            candidate = filtered_aggregate(models, client_ids, report.outliers)
        except RoundSkipped as e:
            logger.warning("round %d skipped: %s", round, e)
            candidate, skipped, accepted = None, True, False

        if candidate is not None and self.params.validation_enabled:
            accepted, self.validation = validate_global(
                candidate, report.goal, self.server_val, self.validation, previous=global_params
            )

        self.ratings, self.blacklist = update_ratings(client_ids, report.outliers, self.ratings, self.blacklist)
        model = candidate if (candidate is not None and accepted) else global_params
        return DefendRoundResult(model=model, accepted=accepted, skipped=skipped, report=report)
