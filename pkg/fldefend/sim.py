"""
Round orchestration: client selection, local training, aggregation, logging.

Every random draw comes from a stream derived from (master seed, round,
purpose), so a run is reproducible bit for bit and extra logging or extra
draws in one place never shift another.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fldefend.aggregation import (
    AggregatorKind,
    AggregatorSpec,
    FoolsGoldHistory,
    coordinate_median,
    fedavg,
    foolsgold,
    krum,
    trimmed_mean,
)
from fldefend.data import AttackSpec, Dataset, TaskSpec, apply_tlfa, dirichlet_partition, generate_task
from fldefend.defend import Blacklist, DefendParams, DefendServer, DetectionReport
from fldefend.errors import ConfigurationError, EmptyShardError, RoundSkipped, SimulationHalted
from fldefend.metrics import MetricSnapshot, evaluate
from fldefend.nn import ModelParams, TrainConfig, init_params, output_layer_delta, train_local
from fldefend.utils import derive_seed, rng_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """Full experiment configuration. Defaults are the reference benchmark setup (K=100, M=20, T=60)."""

    num_clients: int = 100
    clients_per_round: int = 20
    rounds: int = 60
    malicious_rate: float = 0.3
    dirichlet_alpha: float = 1.0
    hidden_units: Tuple[int, ...] = (64,)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    defend: DefendParams = field(default_factory=DefendParams)
    eval_pair: Optional[Tuple[int, int]] = None
    seed: int = 0
    workers: int = 1

    @property
    def num_malicious(self) -> int:
        return int(round(self.malicious_rate * self.num_clients))

    @property
    def layer_sizes(self) -> List[int]:
        return [self.task.num_features, *self.hidden_units, self.task.num_classes]

    def resolved_eval_pair(self, round: Optional[int] = None) -> Tuple[int, int]:
        """Pair used for SRec/ASR on the test set: the active attack pair, else the configured one."""
        if round is not None:
            active = self.attack.active_pair(round)
            if active is not None:
                return (active.source, active.target)
        if self.eval_pair is not None:
            return tuple(self.eval_pair)
        if self.attack.pairs:
            return (self.attack.pairs[0].source, self.attack.pairs[0].target)
        return (1, 2)

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigurationError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigurationError(
                f"clients_per_round must be in [1, num_clients={self.num_clients}], got {self.clients_per_round}"
            )
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if not 0.0 <= self.malicious_rate <= 1.0:
            raise ConfigurationError(f"malicious_rate must be in [0, 1], got {self.malicious_rate}")
        if self.num_malicious > self.num_clients / 2:
            raise ConfigurationError(
                f"at most half of the clients may be malicious, got {self.num_malicious} of {self.num_clients}"
            )
        if not self.dirichlet_alpha > 0:
            raise ConfigurationError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")
        if any(h < 1 for h in self.hidden_units):
            raise ConfigurationError(f"hidden_units must be positive, got {self.hidden_units}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        self.task.validate()
        self.train.validate()
        self.attack.validate(self.task.num_classes)
        self.defend.validate()
        self.aggregator.validate(self.clients_per_round)
        if self.aggregator.kind == AggregatorKind.KRUM:
            f = self.aggregator.resolved_byzantine_count(self.clients_per_round, self.malicious_rate)
            if self.clients_per_round < f + 3:
                raise ConfigurationError(f"krum needs M >= f + 3, got M={self.clients_per_round}, f={f}")
        if self.eval_pair is not None:
            source, target = self.eval_pair
            if not 1 <= source <= self.task.num_classes or not 1 <= target <= self.task.num_classes:
                raise ConfigurationError(f"eval_pair {self.eval_pair} outside classes 1..{self.task.num_classes}")


@dataclass(frozen=True)
class ClientRecord:
    """A simulated client: its identity, private shard and attack behaviour.

    Ratings and blacklist membership are server-side state (DefendServer),
    keyed by client_id; a client never sees them.
    """

    client_id: int
    shard: Dataset
    attack: AttackSpec
    malicious: bool = False

    def local_update(self, global_params: ModelParams, round: int, cfg: TrainConfig, num_classes: int) -> ModelParams:
        shard = self.shard
        if self.malicious:
            shard = apply_tlfa(shard, self.attack, round, num_classes=num_classes, seed=cfg.rng_seed)
        return train_local(global_params, shard, cfg)


@dataclass
class RoundLog:
    round: int
    cohort: Tuple[int, ...]
    malicious_in_cohort: Tuple[int, ...]
    outliers: Tuple[int, ...]
    goal: Optional[Tuple[int, int]]
    accepted: bool
    skipped: bool
    snapshot: MetricSnapshot
    ratings: Dict[int, float]
    blacklist: Tuple[int, ...]
    detection_seconds: float
    server_seconds: float
    report: Optional[DetectionReport] = field(default=None, repr=False)


@dataclass
class ExperimentResult:
    config: SimConfig
    final_model: ModelParams
    logs: List[RoundLog]
    malicious_ids: Tuple[int, ...]
    halted: bool = False

    @property
    def final_snapshot(self) -> Optional[MetricSnapshot]:
        return self.logs[-1].snapshot if self.logs else None

    def goal_identification_rate(self, after_round: int = 3, min_malicious: int = 2) -> Optional[float]:
        """Share of eligible rounds where the identified goal equals the planted pair."""
        hits, total = 0, 0
        for log in self.logs:
            if log.round <= after_round or log.goal is None or len(log.malicious_in_cohort) < min_malicious:
                continue
            planted = self.config.attack.active_pair(log.round)
            if planted is None:
                continue
            total += 1
            hits += int(log.goal == (planted.source, planted.target))
        return hits / total if total else None

    def exclusion_counts(self) -> Tuple[int, int]:
        """(malicious blacklisted, benign blacklisted) at the end of the run."""
        final = set(self.logs[-1].blacklist) if self.logs else set()
        malicious = set(self.malicious_ids)
        return len(final & malicious), len(final - malicious)


def select_clients(
    client_ids: Sequence[int], blacklist: Blacklist, cohort_size: int, rng: np.random.Generator
) -> List[int]:
    """Uniform sample without replacement from the non-blacklisted clients, sorted by id."""
    available = [c for c in client_ids if c not in blacklist]
    if not available:
        raise SimulationHalted("every client is blacklisted")
    size = min(cohort_size, len(available))
    chosen = rng.choice(np.asarray(available), size=size, replace=False)
    return sorted(int(c) for c in chosen)


class Simulation:
    """One federated run: builds the task and clients, then steps rounds."""

    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.train, self.server_val, self.test = generate_task(config.task)

        shards = dirichlet_partition(
            self.train, config.num_clients, config.dirichlet_alpha, derive_seed(config.seed, "partition")
        )
        malicious = rng_for(config.seed, "malicious").choice(config.num_clients, config.num_malicious, replace=False)
        self.malicious_ids = tuple(sorted(int(c) for c in malicious))
        self.clients = [
            ClientRecord(client_id=i, shard=shard, attack=config.attack, malicious=i in self.malicious_ids)
            for i, shard in enumerate(shards)
        ]
        self.client_ids = [c.client_id for c in self.clients]
        self.global_params = init_params(config.layer_sizes, derive_seed(config.seed, "init"))

        kind = config.aggregator.kind
        self.defend_server = (
            DefendServer(self.client_ids, config.defend, self.server_val, seed=derive_seed(config.seed, "defend"))
            if kind == AggregatorKind.DEFEND
            else None
        )
        self.foolsgold_history = FoolsGoldHistory() if kind == AggregatorKind.FOOLSGOLD else None
        logger.info(
            "simulation ready: %d clients (%d malicious), M=%d, T=%d, aggregator=%s",
            config.num_clients, len(self.malicious_ids), config.clients_per_round, config.rounds, kind.value,
        )

    @property
    def blacklist(self) -> Blacklist:
        return self.defend_server.blacklist if self.defend_server is not None else Blacklist()

    def _train_one(self, client: ClientRecord, round: int) -> Optional[ModelParams]:
        cfg = self.config.train.with_seed(derive_seed(self.config.seed, "round", round, "train", client.client_id))
        try:
            return client.local_update(self.global_params, round, cfg, self.config.task.num_classes)
        except EmptyShardError:
            logger.warning("round %d: client %d has an empty shard, skipped", round, client.client_id)
            return None

    def _local_training(self, cohort: Sequence[int], round: int) -> Tuple[List[int], List[ModelParams]]:
        clients = [self.clients[c] for c in cohort]
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = list(pool.map(lambda c: self._train_one(c, round), clients))
        else:
            results = [self._train_one(c, round) for c in clients]
        # Results stay in cohort (ascending id) order regardless of scheduling.
        kept = [(c, m) for c, m in zip(cohort, results) if m is not None]
        return [c for c, _ in kept], [m for _, m in kept]

    def _aggregate_baseline(self, models: Sequence[ModelParams], ids: Sequence[int], round: int) -> ModelParams:
        spec = self.config.aggregator
        rate = self.config.malicious_rate
        n = len(models)
        if spec.kind == AggregatorKind.FEDAVG:
            return fedavg(models)
        if spec.kind == AggregatorKind.KRUM:
            if n < 3:
                raise RoundSkipped(f"krum needs at least 3 models, got {n}")
            byzantine = min(spec.resolved_byzantine_count(self.config.clients_per_round, rate), n - 3)
            return krum(models, byzantine)
        if spec.kind == AggregatorKind.TMEAN:
            trim = min(spec.resolved_trim_count(self.config.clients_per_round, rate), (n - 1) // 2)
            return trimmed_mean(models, trim)
        if spec.kind == AggregatorKind.MEDIAN:
            return coordinate_median(models)
        if spec.kind == AggregatorKind.FOOLSGOLD:
            deltas = [output_layer_delta(m, self.global_params, c, round) for m, c in zip(models, ids)]
            self.foolsgold_history.update(deltas)
            model, _ = foolsgold(models, ids, self.foolsgold_history, spec.foolsgold_kappa)
            return model
        raise ConfigurationError(f"unknown aggregator {spec.kind}")

    def run_round(self, round: int) -> RoundLog:
        """Select, train, aggregate and evaluate one round; updates the deployed model."""
        cohort = select_clients(
            self.client_ids, self.blacklist, self.config.clients_per_round, rng_for(self.config.seed, "round", round, "select")
        )
        ids, models = self._local_training(cohort, round)

        started = time.perf_counter()
        report = None
        accepted, skipped = True, False
        outliers: Tuple[int, ...] = ()
        detection_seconds = 0.0
        previous = self.global_params

        if not models:
            logger.warning("round %d: no local models received, keeping the global model", round)
            accepted, skipped = False, True
        elif self.defend_server is not None:
            result = self.defend_server.aggregate_round(self.global_params, models, ids, round)
            report = result.report
            accepted, skipped = result.accepted, result.skipped
            outliers = tuple(sorted(report.outliers))
            detection_seconds = report.duration_seconds
            self.global_params = result.model
        else:
            try:
                self.global_params = self._aggregate_baseline(models, ids, round)
            except RoundSkipped as e:
                logger.warning("round %d skipped: %s", round, e)
                accepted, skipped = False, True
        server_seconds = time.perf_counter() - started

        if not accepted:
            self.global_params = previous

        snapshot = evaluate(self.global_params, self.test, self.config.resolved_eval_pair(round))
        ratings = dict(self.defend_server.ratings.ratings) if self.defend_server is not None else {}
        log = RoundLog(
            round=round,
            cohort=tuple(cohort),
            malicious_in_cohort=tuple(c for c in cohort if c in self.malicious_ids),
            outliers=outliers,
            goal=report.goal.pair if report is not None else None,
            accepted=accepted,
            skipped=skipped,
            snapshot=snapshot,
            ratings=ratings,
            blacklist=tuple(sorted(self.blacklist.members)),
            detection_seconds=detection_seconds,
            server_seconds=server_seconds,
            report=report,
        )
        logger.info(
            "round %d: cohort=%d malicious=%d outliers=%s goal=%s accepted=%s GAcc=%.3f SRec=%s ASR=%s",
            round, len(cohort), len(log.malicious_in_cohort), list(outliers), log.goal, accepted,
            snapshot.gacc, _fmt(snapshot.srec), _fmt(snapshot.asr),
        )
        return log

    def run(self) -> ExperimentResult:
        logs: List[RoundLog] = []
        halted = False
        for t in range(1, self.config.rounds + 1):
            try:
                logs.append(self.run_round(t))
            except SimulationHalted as e:
                logger.error("simulation halted at round %d: %s", t, e)
                halted = True
                break
        return ExperimentResult(
            config=self.config,
            final_model=self.global_params,
            logs=logs,
            malicious_ids=self.malicious_ids,
            halted=halted,
        )


def run_experiment(config: SimConfig) -> ExperimentResult:
    """Run all T rounds and return the final deployed model plus the round logs."""
    return Simulation(config).run()


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"
