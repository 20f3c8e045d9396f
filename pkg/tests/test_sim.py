from dataclasses import fields, replace

import numpy as np
import pytest

from fldefend.aggregation import AggregatorKind, AggregatorSpec, fedavg
from fldefend.data import AttackSpec, Dataset, FlipPair, TaskSpec
from fldefend.defend import Blacklist, DefendParams
from fldefend.errors import ConfigurationError, SimulationHalted
from fldefend.nn import TrainConfig, init_params
from fldefend.sim import ClientRecord, SimConfig, Simulation, run_experiment, select_clients
from fldefend.utils import derive_seed, rng_for


def test_full_cohort_when_nothing_is_blacklisted():
    cohort = select_clients(list(range(6)), Blacklist(), 6, np.random.default_rng(0))
    assert cohort == list(range(6))


def test_blacklisted_clients_are_never_selected():
    rng = np.random.default_rng(1)
    blacklist = Blacklist(frozenset({0, 3, 7}))
    for _ in range(1000):
        cohort = select_clients(list(range(10)), blacklist, 4, rng)
        assert not set(cohort) & blacklist.members
        assert cohort == sorted(cohort)


def test_cohort_shrinks_to_available_clients():
    assert select_clients([0, 1, 2], Blacklist(frozenset({1})), 5, np.random.default_rng(0)) == [0, 2]


def test_selection_is_seeded():
    a = [select_clients(list(range(20)), Blacklist(), 5, rng_for(3, "round", t, "select")) for t in range(1, 6)]
    b = [select_clients(list(range(20)), Blacklist(), 5, rng_for(3, "round", t, "select")) for t in range(1, 6)]
    assert a == b


def test_everyone_blacklisted_halts():
    with pytest.raises(SimulationHalted):
        select_clients([0, 1], Blacklist(frozenset({0, 1})), 2, np.random.default_rng(0))


def test_derived_seeds_are_independent_of_draw_order():
    assert derive_seed(7, "round", 3, "select") == derive_seed(7, "round", 3, "select")
    assert derive_seed(7, "round", 3, "select") != derive_seed(7, "round", 4, "select")
    assert derive_seed(7, "round", 3, "select") != derive_seed(8, "round", 3, "select")


def test_config_validation(tiny_config):
    with pytest.raises(ConfigurationError):
        replace(tiny_config, malicious_rate=0.6).validate()
    with pytest.raises(ConfigurationError):
        replace(tiny_config, clients_per_round=9).validate()
    with pytest.raises(ConfigurationError):
        replace(tiny_config, rounds=0).validate()
    with pytest.raises(ConfigurationError):
        replace(tiny_config, aggregator=AggregatorSpec(kind=AggregatorKind.KRUM, byzantine_count=2)).validate()
    with pytest.raises(ConfigurationError):
        replace(tiny_config, eval_pair=(1, 9)).validate()


def test_eval_pair_follows_active_attack():
    config = SimConfig(
        attack=AttackSpec(mode="adaptive", pairs=(FlipPair(1, 3, 1, 5), FlipPair(2, 4, 6, None))),
        eval_pair=(1, 2),
    )
    assert config.resolved_eval_pair(3) == (1, 3)
    assert config.resolved_eval_pair(8) == (2, 4)
    assert SimConfig().resolved_eval_pair(1) == (1, 2)
    assert SimConfig(eval_pair=(2, 5)).resolved_eval_pair(1) == (2, 5)


def test_clients_never_hold_server_state():
    assert {f.name for f in fields(ClientRecord)} == {"client_id", "shard", "attack", "malicious"}


def test_empty_shard_client_is_skipped(tiny_config):
    sim = Simulation(tiny_config)
    empty = ClientRecord(client_id=0, shard=Dataset.empty(4), attack=tiny_config.attack)
    assert sim._train_one(empty, round=1) is None


def test_malicious_share(tiny_config):
    sim = Simulation(tiny_config)
    assert len(sim.malicious_ids) == 2
    assert sum(c.malicious for c in sim.clients) == 2


def test_fedavg_round_is_mean_of_cohort_locals(tiny_config):
    config = replace(tiny_config, malicious_rate=0.0, attack=AttackSpec(), aggregator=AggregatorSpec())
    sim = Simulation(config)
    cohort = select_clients(sim.client_ids, Blacklist(), config.clients_per_round, rng_for(config.seed, "round", 1, "select"))
    ids, models = sim._local_training(cohort, 1)
    log = sim.run_round(1)
    assert list(log.cohort) == cohort
    assert sim.global_params.bitwise_equal(fedavg(models))
    assert log.accepted and not log.skipped


def test_zero_learning_rate_keeps_initialisation(tiny_config):
    config = replace(tiny_config, rounds=1, train=TrainConfig(learning_rate=0.0), aggregator=AggregatorSpec())
    result = run_experiment(config)
    init = init_params(config.layer_sizes, derive_seed(config.seed, "init"))
    np.testing.assert_allclose(result.final_model.flatten(), init.flatten(), rtol=1e-12, atol=1e-15)


def _same_logs(a, b):
    assert len(a.logs) == len(b.logs)
    for x, y in zip(a.logs, b.logs):
        assert (x.cohort, x.outliers, x.goal, x.accepted, x.blacklist, x.ratings) == (
            y.cohort, y.outliers, y.goal, y.accepted, y.blacklist, y.ratings
        )
        assert np.array_equal(x.snapshot.confusion, y.snapshot.confusion)
    assert a.final_model.bitwise_equal(b.final_model)


def test_runs_are_reproducible(tiny_config):
    _same_logs(run_experiment(tiny_config), run_experiment(tiny_config))


def test_thread_pool_does_not_change_results(tiny_config):
    _same_logs(run_experiment(tiny_config), run_experiment(replace(tiny_config, workers=3)))


@pytest.mark.parametrize("kind", [k for k in AggregatorKind])
def test_every_aggregator_completes(tiny_config, kind):
    config = replace(tiny_config, aggregator=AggregatorSpec(kind=kind), rounds=2)
    result = run_experiment(config)
    assert len(result.logs) == 2
    assert not result.halted
    assert all(0.0 <= log.snapshot.gacc <= 1.0 for log in result.logs)


def test_defend_logs_carry_detection(tiny_config):
    result = run_experiment(tiny_config)
    for log in result.logs:
        assert log.goal is not None and log.goal[0] < log.goal[1]
        assert set(log.outliers) <= set(log.cohort)
        assert log.report is not None
        assert set(log.ratings) == set(range(tiny_config.num_clients))


def test_defend_without_detection_follows_fedavg(small_task):
    base = SimConfig(
        num_clients=8,
        clients_per_round=4,
        rounds=4,
        malicious_rate=0.0,
        hidden_units=(8,),
        task=replace(small_task, samples_per_class=160, test_samples_per_class=200),
        train=TrainConfig(learning_rate=0.1, local_epochs=2, batch_size=16),
        attack=AttackSpec(),
        seed=11,
    )
    plain = run_experiment(replace(base, aggregator=AggregatorSpec()))
    defended = run_experiment(
        replace(base, aggregator=AggregatorSpec(kind=AggregatorKind.DEFEND), defend=DefendParams(detection_enabled=False))
    )

    assert all(log.accepted for log in defended.logs)
    for a, b in zip(plain.logs, defended.logs):
        assert a.cohort == b.cohort
        assert b.outliers == ()
        assert np.array_equal(a.snapshot.confusion, b.snapshot.confusion)
    assert defended.final_model.bitwise_equal(plain.final_model)
    assert not defended.logs[-1].blacklist


DESK_SEEDS = range(5)
BASELINES = [AggregatorKind.KRUM, AggregatorKind.TMEAN, AggregatorKind.MEDIAN, AggregatorKind.FOOLSGOLD]


def _desk_config(aggregator, malicious_rate=0.3, attack=True, seed=0):
    return SimConfig(
        num_clients=30,
        clients_per_round=10,
        rounds=40,
        malicious_rate=malicious_rate,
        task=TaskSpec(num_classes=5, num_features=32, seed=seed, center_gaps=((1, 4, 2.0),)),
        attack=AttackSpec(mode="static", pairs=(FlipPair(1, 4),)) if attack else AttackSpec(pairs=(FlipPair(1, 4),)),
        aggregator=AggregatorSpec(kind=aggregator),
        seed=seed,
    )


@pytest.fixture(scope="module")
def desk_runs():
    runs = {}
    for seed in DESK_SEEDS:
        runs["clean", seed] = run_experiment(_desk_config(AggregatorKind.FEDAVG, attack=False, seed=seed))
        for kind in [AggregatorKind.FEDAVG, AggregatorKind.DEFEND, *BASELINES]:
            runs[kind.value, seed] = run_experiment(_desk_config(kind, seed=seed))
    return runs


def _median(runs, name, metric):
    return float(np.median([getattr(runs[name, seed].final_snapshot, metric) for seed in DESK_SEEDS]))


@pytest.mark.slow
def test_attack_hurts_fedavg(desk_runs):
    assert _median(desk_runs, "fedavg", "asr") - _median(desk_runs, "clean", "asr") >= 0.20


@pytest.mark.slow
def test_defend_matches_clean_training(desk_runs):
    for metric in ("srec", "asr"):
        assert abs(_median(desk_runs, "defend", metric) - _median(desk_runs, "clean", metric)) <= 0.05


@pytest.mark.slow
@pytest.mark.parametrize("kind", BASELINES, ids=lambda k: k.value)
def test_defend_beats_baseline(desk_runs, kind):
    assert _median(desk_runs, "defend", "srec") - _median(desk_runs, kind.value, "srec") >= 0.10
    assert _median(desk_runs, kind.value, "asr") - _median(desk_runs, "defend", "asr") >= 0.10


@pytest.mark.slow
def test_goal_is_identified(desk_runs):
    rates = [desk_runs["defend", seed].goal_identification_rate() for seed in DESK_SEEDS]
    assert float(np.median(rates)) >= 0.8


@pytest.mark.slow
def test_malicious_clients_are_blacklisted(desk_runs):
    good_seeds = 0
    for seed in DESK_SEEDS:
        malicious_blacklisted, benign_blacklisted = desk_runs["defend", seed].exclusion_counts()
        good_seeds += int(malicious_blacklisted >= 8 and benign_blacklisted <= 1)
    assert good_seeds >= 4


@pytest.mark.slow
def test_half_malicious_federation():
    defend_asr, fedavg_asr = [], []
    for seed in DESK_SEEDS:
        defend_asr.append(run_experiment(_desk_config(AggregatorKind.DEFEND, 0.5, seed=seed)).final_snapshot.asr)
        fedavg_asr.append(run_experiment(_desk_config(AggregatorKind.FEDAVG, 0.5, seed=seed)).final_snapshot.asr)
    assert np.median(defend_asr) <= 0.15
    assert np.median(fedavg_asr) >= 0.40
