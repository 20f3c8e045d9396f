import numpy as np
import pytest

from conftest import vector_model
from fldefend.aggregation import fedavg
from fldefend.defend import (
    AttackGoal,
    Blacklist,
    DefendParams,
    DefendServer,
    FeatureMatrix,
    MagnitudeTable,
    RatingTable,
    ValidationState,
    apply_validation_gate,
    cluster_features,
    compute_magnitudes,
    detect_poisoned,
    extract_features,
    filtered_aggregate,
    identify_goal,
    update_ratings,
    validate_global,
)
from fldefend.errors import ConfigurationError, RoundSkipped
from fldefend.nn import ModelParams, OutputDelta, init_params


def _table(accumulated):
    accumulated = np.asarray(accumulated, dtype=np.float64)
    return MagnitudeTable(client_ids=(0,), per_client=accumulated[None, :], accumulated=accumulated)


def _identity_model():
    return ModelParams([np.eye(3)], [np.zeros(3)])


def _raw_spread(rows):
    return np.mean(np.linalg.norm(rows - rows.mean(axis=0), axis=1))


def test_three_four_five_norm():
    table = compute_magnitudes([OutputDelta(np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]]), client_id=0, round=1)])
    assert table.per_client.tolist() == [[5.0, 0.0]]
    assert table.accumulated.tolist() == [5.0, 0.0]


def test_zero_deltas_give_zero_magnitudes():
    deltas = [OutputDelta(np.zeros((4, 3)), client_id=c, round=1) for c in range(3)]
    table = compute_magnitudes(deltas)
    assert not table.per_client.any() and not table.accumulated.any()


def test_magnitudes_match_norm_oracle(rng):
    deltas = [OutputDelta(rng.normal(size=(5, 7)), client_id=int(c), round=1) for c in rng.permutation(6)]
    table = compute_magnitudes(deltas)
    assert table.client_ids == tuple(range(6))
    by_id = {d.client_id: d for d in deltas}
    for row, client_id in enumerate(table.client_ids):
        for e in range(5):
            oracle = np.sqrt(sum(v * v for v in by_id[client_id].rows[e]))
            assert abs(table.per_client[row, e] - oracle) <= 1e-12
    np.testing.assert_allclose(table.accumulated, table.per_client.sum(axis=0), atol=1e-12)


def test_magnitudes_reject_mixed_widths():
    with pytest.raises(ConfigurationError):
        compute_magnitudes([OutputDelta(np.zeros((3, 2)), 0, 1), OutputDelta(np.zeros((4, 2)), 1, 1)])


def test_identify_goal_orders_pair():
    assert identify_goal(_table([0.1, 0.9, 0.2, 0.7])).pair == (2, 4)


def test_identify_goal_ties_go_to_lower_index():
    assert identify_goal(_table([5.0, 5.0, 0.0])).pair == (1, 2)
    assert identify_goal(_table([0.0, 0.0, 0.0, 0.0])).pair == (1, 2)


def test_attack_goal_requires_order():
    with pytest.raises(ConfigurationError):
        AttackGoal(3, 1)


def test_feature_rows_concatenate_goal_neurons(rng):
    deltas = [OutputDelta(rng.normal(size=(3, 3)), client_id=c, round=1) for c in (2, 0, 1)]
    features = extract_features(deltas, AttackGoal(1, 3))
    assert features.client_ids == (0, 1, 2)
    assert features.values.shape == (3, 6)
    by_id = {d.client_id: d for d in deltas}
    for row, client_id in enumerate(features.client_ids):
        expected = list(by_id[client_id].rows[0]) + list(by_id[client_id].rows[2])
        assert features.values[row].tolist() == expected


def test_feature_rows_of_identical_deltas_match():
    rows = np.arange(9.0).reshape(3, 3)
    features = extract_features([OutputDelta(rows, 0, 1), OutputDelta(rows.copy(), 1, 1)], AttackGoal(2, 3))
    assert features.values[0].tolist() == features.values[1].tolist()


def test_feature_goal_outside_classes():
    with pytest.raises(ConfigurationError):
        extract_features([OutputDelta(np.zeros((3, 2)), 0, 1)], AttackGoal(1, 4))


def test_compact_group_is_flagged():
    rng = np.random.default_rng(5)
    benign = rng.normal(0.0, 1.0, size=(14, 16))
    poisoned = 10.0 + rng.normal(0.0, 0.01, size=(6, 16))
    features = FeatureMatrix(client_ids=tuple(range(20)), values=np.vstack([benign, poisoned]))
    assert detect_poisoned(features, seed=1) == frozenset(range(14, 20))


def test_shared_direction_is_flagged_whatever_the_update_size():
    rng = np.random.default_rng(9)
    benign = rng.normal(0.0, 0.05, size=(10, 64))
    direction = rng.normal(size=64)
    direction /= np.linalg.norm(direction)
    scales = np.array([1.0, 2.0, 4.0, 8.0])
    poisoned = scales[:, None] * direction + rng.normal(0.0, 0.01, size=(4, 64))
    features = FeatureMatrix(client_ids=tuple(range(14)), values=np.vstack([benign, poisoned]))

    # In raw space the small benign updates are the tighter group.
    assert _raw_spread(benign) < _raw_spread(poisoned)

    result = cluster_features(features, seed=2)
    assert result.outliers == frozenset(range(10, 14))
    assert result.spread_ratio < 0.5


@pytest.mark.parametrize("seed", range(10))
def test_benign_only_cohort_excludes_nobody(seed):
    rng = np.random.default_rng(seed)
    features = FeatureMatrix(client_ids=tuple(range(10)), values=rng.normal(0.0, 0.1, size=(10, 64)))
    result = cluster_features(features, seed=seed)
    assert result.outliers == frozenset()


def test_two_different_rows_exclude_nobody():
    features = FeatureMatrix(client_ids=(0, 1), values=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    result = cluster_features(features)
    assert not result.degenerate
    assert result.outliers == frozenset()


def test_spread_ratio_limit_controls_exclusion():
    rng = np.random.default_rng(3)
    direction = np.ones(32) / np.sqrt(32)
    loose = direction + rng.normal(0.0, 0.08, size=(4, 32))
    benign = rng.normal(0.0, 1.0, size=(8, 32))
    features = FeatureMatrix(client_ids=tuple(range(12)), values=np.vstack([benign, loose]))
    result = cluster_features(features, seed=0)
    assert result.spread_ratio is not None
    assert detect_poisoned(features, seed=0, max_spread_ratio=result.spread_ratio / 2) == frozenset()


def test_identical_pair_is_degenerate():
    features = FeatureMatrix(client_ids=(3, 4), values=np.ones((2, 6)))
    result = cluster_features(features)
    assert result.degenerate
    assert result.outliers == frozenset()


def test_single_client_is_never_flagged():
    features = FeatureMatrix(client_ids=(3,), values=np.ones((1, 6)))
    assert detect_poisoned(features) == frozenset()


def test_filtered_aggregate(rng):
    models = [vector_model(rng.normal(size=4)) for _ in range(6)]
    ids = [10, 11, 12, 13, 14, 15]
    assert filtered_aggregate(models, ids, []).bitwise_equal(fedavg(models))
    assert filtered_aggregate(models[:2], ids[:2], {10}).bitwise_equal(models[1])
    expected = np.mean([models[i].flatten() for i in (0, 2, 5)], axis=0)
    np.testing.assert_allclose(filtered_aggregate(models, ids, {11, 13, 14}).flatten(), expected, atol=1e-12)
    with pytest.raises(RoundSkipped):
        filtered_aggregate(models[:2], ids[:2], {10, 11})


def test_gate_rejects_srec_drop():
    accepted, state = apply_validation_gate(0.50, 0.05, ValidationState(srec_old=0.70, asr_old=0.05))
    assert not accepted
    assert (state.srec_old, state.asr_old) == (0.70, 0.05)


def test_gate_rejects_asr_rise():
    accepted, _ = apply_validation_gate(0.70, 0.30, ValidationState(srec_old=0.70, asr_old=0.05))
    assert not accepted


def test_gate_accepts_small_changes():
    accepted, state = apply_validation_gate(0.72, 0.06, ValidationState(srec_old=0.70, asr_old=0.05))
    assert accepted
    assert (state.srec_old, state.asr_old) == (0.72, 0.06)


def test_initial_state_accepts_anything():
    accepted, _ = apply_validation_gate(0.0, 1.0, ValidationState())
    assert accepted


def test_validation_skipped_without_source_samples(identity_val):
    val = identity_val.subset(np.flatnonzero(identity_val.labels != 1))
    shifted = ModelParams([np.eye(3)], [np.array([0.0, 0.0, 9.0])])
    state = ValidationState(srec_old=1.0, asr_old=0.0, pair=(1, 3))
    accepted, new_state = validate_global(shifted, AttackGoal(1, 3), val, state)
    assert accepted and new_state == state


def test_validation_rebaselines_on_goal_change(identity_val):
    state = ValidationState(srec_old=0.0, asr_old=1.0, pair=(1, 2))
    shifted = ModelParams([np.eye(3)], [np.array([0.0, 0.0, 9.0])])
    accepted, new_state = validate_global(shifted, AttackGoal(1, 3), identity_val, state, previous=_identity_model())
    assert not accepted
    assert new_state.pair == (1, 3)
    assert (new_state.srec_old, new_state.asr_old) == (1.0, 0.0)


def _ratings(client_ids, value=None):
    table = RatingTable.initial(client_ids, DefendParams())
    if value is not None:
        table = RatingTable({c: value for c in client_ids})
    return table


def test_rating_reward_and_penalty():
    ratings, blacklist = update_ratings([1, 2], [2], _ratings([1, 2, 3]), Blacklist())
    assert ratings[1] == 0.85
    assert ratings[2] == 0.6
    assert ratings[3] == 0.8
    assert len(blacklist) == 0


def test_rating_clamps_at_max():
    ratings, _ = update_ratings([1], [], _ratings([1], value=0.98), Blacklist())
    assert ratings[1] == 1.0


def test_four_flags_blacklist_a_fresh_client():
    ratings, blacklist = _ratings([7]), Blacklist()
    history = []
    for _ in range(4):
        ratings, blacklist = update_ratings([7], [7], ratings, blacklist)
        history.append((ratings[7], 7 in blacklist))
    assert history == [(0.6, False), (0.4, False), (0.2, False), (0.0, True)]

    ratings, blacklist = update_ratings([7], [], ratings, blacklist)
    assert 7 in blacklist


def test_one_false_flag_is_repaid_by_four_clean_rounds():
    ratings, blacklist = _ratings([5]), Blacklist()
    for _ in range(5):
        ratings, blacklist = update_ratings([5], [5], ratings, blacklist)
        assert ratings[5] == 0.6
        for _ in range(4):
            ratings, blacklist = update_ratings([5], [], ratings, blacklist)
        assert ratings[5] == 0.8
        assert 5 not in blacklist

    for _ in range(4):
        ratings, blacklist = update_ratings([5], [], ratings, blacklist)
    assert ratings[5] == 1.0


def test_ratings_need_entries():
    with pytest.raises(ConfigurationError):
        update_ratings([9], [], _ratings([1]), Blacklist())


def test_defend_params_validation():
    with pytest.raises(ConfigurationError):
        DefendParams(rating_min=1.0, rating_max=0.5).validate()
    with pytest.raises(ConfigurationError):
        DefendParams(penalty=0.0).validate()
    with pytest.raises(ConfigurationError):
        DefendParams(max_spread_ratio=0.0).validate()
    assert DefendParams().initial_rating == 0.8


def test_disabled_pipeline_is_plain_fedavg(identity_val, rng):
    params = DefendParams(detection_enabled=False, validation_enabled=False)
    server = DefendServer(range(5), params, identity_val, seed=3)
    global_params = init_params([3, 4, 3], seed=0)
    models = [global_params.unflatten(global_params.flatten() + rng.normal(size=global_params.num_parameters)) for _ in range(5)]
    result = server.aggregate_round(global_params, models, list(range(5)), round=1)
    assert result.accepted
    assert result.model.bitwise_equal(fedavg(models))
    assert all(server.ratings[c] == 0.85 for c in range(5))


def test_rollback_keeps_deployed_model(identity_val):
    server = DefendServer(range(4), DefendParams(), identity_val, seed=0)
    deployed = _identity_model()
    snapshot = deployed.copy()

    # Round 1: nobody moves, goal (1, 2) is accepted and becomes the baseline.
    first = server.aggregate_round(deployed, [deployed.copy() for _ in range(4)], [0, 1, 2, 3], round=1)
    assert first.accepted and first.report.goal.pair == (1, 2)

    # Round 2: every client pushes class 1 into class 3.
    shifted = ModelParams([np.eye(3)], [np.array([0.0, 0.0, 5.0])])
    second = server.aggregate_round(first.model, [shifted.copy() for _ in range(4)], [0, 1, 2, 3], round=2)
    assert second.report.goal.pair == (1, 3)
    assert not second.accepted
    assert second.model is first.model
    assert second.model.bitwise_equal(snapshot)


def test_server_flags_and_blacklists_compact_group():
    rng = np.random.default_rng(12)
    global_params = ModelParams([np.zeros((4, 3))], [np.zeros(4)])
    ids = list(range(10))
    server = DefendServer(ids, DefendParams(validation_enabled=False), server_val=None, seed=1)

    for round in range(1, 5):
        models = []
        for c in ids:
            rows = rng.normal(0.0, 0.05, size=(4, 4))
            if c >= 7:
                rows = np.zeros((4, 4))
                rows[0] = [-1.0, -1.0, -1.0, -1.0]
                rows[3] = [1.0, 1.0, 1.0, 1.0]
                rows += rng.normal(0.0, 1e-4, size=(4, 4))
            models.append(ModelParams([rows[:, :3]], [rows[:, 3]]))
        result = server.aggregate_round(global_params, models, ids, round)
        assert result.report.goal.pair == (1, 4)
        assert result.report.outliers == frozenset({7, 8, 9})

    assert server.blacklist.members == frozenset({7, 8, 9})
    assert all(server.ratings[c] == 1.0 for c in range(7))
