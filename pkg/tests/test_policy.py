import math

import numpy as np
import pytest

from steprefine.core import HistoryPrefix, Step, rollout
from steprefine.exceptions import ContractViolation, DataCorruptionError
from steprefine.policy import (
    DecisionPoint, Featurizer, LinearPolicy, PolicyParams, action_logprobs, check_params, describe_params, log_softmax,
    logprob_gradient, sequence_gradient, sequence_logprob, trace, trajectory_logprob,
)
from steprefine.toytree import Choose


@pytest.fixture()
def toy_featurizer(toy_dataset):
    return Featurizer(toy_dataset.env, 32)


def test_featurizer_tokens(toy_dataset, toy_featurizer):
    expert = toy_dataset.experts[0]
    root = toy_featurizer.tokens(expert.prefix(0))
    assert root[:4] == ['bias', 'step:0', 'ins:shape:3x3', 'cur:depth:0']
    assert not any(token.startswith('prev:') for token in root)

    later = toy_featurizer.tokens(expert.prefix(2))
    assert 'step:2' in later
    assert 'cur:depth:2' in later
    assert 'prev:depth:1' in later


def test_featurize_is_normalized(toy_dataset, toy_featurizer):
    for length in range(3):
        features = toy_featurizer.featurize(toy_dataset.experts[0].prefix(length))
        assert features.shape == (32,)
        assert np.linalg.norm(features) == pytest.approx(1.0)
        assert np.all(features >= 0)


def test_featurizer_rejects_empty_dimension(toy_dataset):
    with pytest.raises(ContractViolation):
        Featurizer(toy_dataset.env, 0)


def test_params_lifecycle(toy_dataset):
    params = PolicyParams.zeros(toy_dataset.env, 16)
    assert params.weights.shape == (16, 3)
    assert params.dim == 16
    assert params.version == 0

    updated = params.updated(np.ones((16, 3)))
    assert updated.version == 1
    assert updated.env_id == 'toytree'
    with pytest.raises(ContractViolation):
        params.updated(np.full((16, 3), np.nan))

    frozen = updated.snapshot()
    assert frozen.version == 1
    with pytest.raises(ValueError):
        frozen.weights[0, 0] = 2.0
    updated.weights[0, 0] = 5.0
    assert frozen.weights[0, 0] == 1.0


def test_check_params(toy_dataset, shop_dataset):
    check_params(toy_dataset.env, PolicyParams.zeros(toy_dataset.env, 8))
    with pytest.raises(ContractViolation):
        check_params(toy_dataset.env, PolicyParams.zeros(shop_dataset.env, 8))
    with pytest.raises(ContractViolation):
        LinearPolicy(PolicyParams(np.zeros((8, 5)), 'toytree'), Featurizer(toy_dataset.env, 8))


def test_uniform_logprobs_at_zero_weights(toy_dataset, toy_featurizer):
    env = toy_dataset.env
    expert = toy_dataset.experts[0]
    params = PolicyParams.zeros(env, 32)
    logprobs = action_logprobs(env, toy_featurizer, params, expert.prefix(1))
    assert list(logprobs) == [Choose(0), Choose(1), Choose(2)]
    assert all(value == pytest.approx(-math.log(3)) for value in logprobs.values())

    suffix = expert.suffix(0)
    assert trajectory_logprob(env, toy_featurizer, params, expert.prefix(0), suffix) == pytest.approx(-3 * math.log(3))

    with pytest.raises(ContractViolation):
        action_logprobs(env, toy_featurizer, params, expert.prefix(3))


def test_trace(toy_dataset, toy_featurizer):
    env = toy_dataset.env
    expert = toy_dataset.experts[0]
    points = trace(env, toy_featurizer, expert.prefix(1), expert.steps[1:])
    assert len(points) == 2
    assert [point.chosen for point in points] == [action.index for action in expert.actions[1:]]
    assert points[0].slots.tolist() == [0, 1, 2]


def test_trace_rejects_illegal_actions(toy_dataset, toy_featurizer):
    env = toy_dataset.env
    expert = toy_dataset.experts[0]
    bogus = Step(Choose(5), expert.steps[0].observation)
    with pytest.raises(DataCorruptionError):
        trace(env, toy_featurizer, expert.prefix(0), [bogus])

    other = Choose((expert.actions[0].index + 1) % 3)
    moved = Step(other, expert.steps[0].observation)
    with pytest.raises(DataCorruptionError):
        trace(env, toy_featurizer, expert.prefix(0), [moved])


def test_log_softmax():
    values = log_softmax(np.array([1000.0, 1000.0]))
    assert np.allclose(values, np.log([0.5, 0.5]))


def test_sequence_gradient_matches_central_differences():
    rng = np.random.default_rng(4)
    weights = rng.normal(size=(5, 4))
    points = [
        DecisionPoint(rng.random(5), np.array([0, 2, 3]), 1),
        DecisionPoint(rng.random(5), np.array([1, 3]), 0),
    ]
    gradient = sequence_gradient(weights, points)
    h = 1e-5
    numeric = np.zeros_like(weights)
    for index in np.ndindex(*weights.shape):
        up, down = weights.copy(), weights.copy()
        up[index] += h
        down[index] -= h
        numeric[index] = (sequence_logprob(up, points) - sequence_logprob(down, points)) / (2 * h)
    np.testing.assert_allclose(gradient, numeric, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize('seed', range(5))
def test_logprob_gradient_matches_central_differences(toy_dataset, toy_featurizer, seed):
    env = toy_dataset.env
    rng = np.random.default_rng(seed)
    params = PolicyParams(rng.normal(size=(32, env.n_actions)), env.env_id)
    instruction = toy_dataset.splits['test'][seed]
    sampled = rollout(env, LinearPolicy(params, toy_featurizer), HistoryPrefix(instruction), 1.0, rng)
    start = int(rng.integers(sampled.length))
    prefix, suffix = sampled.prefix(start), sampled.suffix(start)

    gradient = logprob_gradient(env, toy_featurizer, params, prefix, suffix)
    h = 1e-5
    numeric = np.zeros_like(params.weights)
    for index in np.ndindex(*params.weights.shape):
        up, down = params.weights.copy(), params.weights.copy()
        up[index] += h
        down[index] -= h
        numeric[index] = (
            trajectory_logprob(env, toy_featurizer, params.updated(up), prefix, suffix)
            - trajectory_logprob(env, toy_featurizer, params.updated(down), prefix, suffix)
        ) / (2 * h)
    np.testing.assert_allclose(gradient, numeric, rtol=1e-4, atol=1e-8)


def test_linear_policy_rollout(toy_dataset, toy_featurizer):
    env = toy_dataset.env
    params = PolicyParams.zeros(env, 32)
    policy = LinearPolicy(params, toy_featurizer)
    instruction = toy_dataset.experts[0].instruction
    greedy = rollout(env, policy, HistoryPrefix(instruction), 0.0, None)
    assert greedy.actions == [Choose(0)] * 3

    first = rollout(env, policy, HistoryPrefix(instruction), 1.0, np.random.default_rng(8))
    second = rollout(env, policy, HistoryPrefix(instruction), 1.0, np.random.default_rng(8))
    assert first == second


def test_describe_params(toy_dataset):
    params = PolicyParams(np.full((4, 3), 0.5), 'toytree', 7)
    summary = describe_params(params)
    assert summary['env_id'] == 'toytree'
    assert summary['version'] == 7
    assert summary['shape'] == [4, 3]
    assert summary['frobenius_norm'] == pytest.approx(math.sqrt(3.0))
    assert summary['max_abs_weight'] == 0.5
    assert summary['column_norms'] == [1.0, 1.0, 1.0]
