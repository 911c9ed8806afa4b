import numpy as np
import pytest

from steprefine.core import UniformPolicy
from steprefine.exceptions import ContractViolation, InsufficientDataError
from steprefine.policy import Featurizer
from steprefine.reward_model import (
    MIN_TASKS, RewardModel, RewardModelConfig, RewardModelScorer, ScoredStep, mse_gradient, mse_loss,
    rm_step_reward, scored_steps_from_trajectories, split_by_task, train_reward_model,
)
from steprefine.scorer import EstimateMethod, ExactScorer


def synthetic_steps(n_tasks=12):
    steps = []
    for task in range(n_tasks):
        task_id = f'toy-{task + 1:04d}'
        steps.append(ScoredStep(task_id, f'{task}a', 1, 'choose a0', 0.8, 0.0, EstimateMethod.EXACT, {0: 1.0}))
        steps.append(ScoredStep(task_id, f'{task}b', 2, 'choose a1', 0.2, 0.0, EstimateMethod.EXACT, {1: 1.0}))
    return steps


def test_train_on_separable_labels():
    result = train_reward_model(synthetic_steps(), dim=4, env_id='toytree', seed=3)
    assert result.train_mse < 1e-3
    assert result.held_out_mse < 1e-3
    assert result.history[-1] == result.train_mse
    assert len(result.history) == RewardModelConfig().epochs + 1

    model = result.model
    assert model.env_id == 'toytree'
    assert model.predict(np.array([1.0, 0.0, 0.0, 0.0])) == pytest.approx(0.8, abs=0.03)
    assert model.predict(np.array([0.0, 1.0, 0.0, 0.0])) == pytest.approx(0.2, abs=0.03)


def test_initial_loss_is_label_energy():
    result = train_reward_model(synthetic_steps(), dim=4, env_id='toytree', config=RewardModelConfig(epochs=0))
    assert len(result.history) == 1
    assert result.history[0] == pytest.approx((0.8 ** 2 + 0.2 ** 2) / 2)


def test_needs_enough_tasks():
    with pytest.raises(InsufficientDataError):
        train_reward_model(synthetic_steps(MIN_TASKS - 1), dim=4, env_id='toytree')


def test_labels_must_be_rewards():
    steps = synthetic_steps()
    steps[0] = steps[0]._replace(value=1.5)
    with pytest.raises(ContractViolation):
        train_reward_model(steps, dim=4, env_id='toytree')


def test_split_keeps_tasks_together():
    steps = synthetic_steps(20)
    train, held_out = split_by_task(steps, seed=1, held_out_fraction=0.1)
    held_tasks = {step.task_id for step in held_out}
    assert len(held_tasks) == 2
    assert not held_tasks & {step.task_id for step in train}
    assert len(train) + len(held_out) == len(steps)
    assert split_by_task(steps, seed=1, held_out_fraction=0.1) == (train, held_out)


@pytest.mark.parametrize('seed', range(5))
def test_mse_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    features, labels = rng.random((20, 6)), rng.random(20)
    weights, bias = rng.normal(size=6), float(rng.normal())
    weights_gradient, bias_gradient = mse_gradient(weights, bias, features, labels)
    h = 1e-5
    numeric = np.zeros_like(weights)
    for index in range(len(weights)):
        up, down = weights.copy(), weights.copy()
        up[index] += h
        down[index] -= h
        numeric[index] = (mse_loss(up, bias, features, labels) - mse_loss(down, bias, features, labels)) / (2 * h)
    np.testing.assert_allclose(weights_gradient, numeric, rtol=1e-4, atol=1e-8)
    numeric_bias = (
        mse_loss(weights, bias + h, features, labels) - mse_loss(weights, bias - h, features, labels)
    ) / (2 * h)
    assert bias_gradient == pytest.approx(numeric_bias, rel=1e-4, abs=1e-8)


def test_scored_steps_from_trajectories(toy_dataset):
    env = toy_dataset.env
    featurizer = Featurizer(env, 32)
    experts = toy_dataset.experts[:3]
    steps = scored_steps_from_trajectories(env, featurizer, ExactScorer(env, UniformPolicy()), experts)
    assert len(steps) == 9
    assert [step.step_index for step in steps[:3]] == [1, 2, 3]
    assert steps[0].task_id == experts[0].instruction.task_id
    assert steps[0].action == experts[0].actions[0].text
    assert steps[2].method == EstimateMethod.TERMINAL
    assert steps[2].value == 1.0
    assert all(step.features for step in steps)
    assert len({step.prefix_hash for step in steps}) == 9


def test_reward_model_scorer(toy_dataset, shop_dataset):
    env = toy_dataset.env
    featurizer = Featurizer(env, 8)
    expert = toy_dataset.experts[0]

    saturated = RewardModel(np.full(8, 10.0), 0.0, 'toytree')
    scorer = RewardModelScorer(env, saturated, featurizer)
    terminal = scorer.score(expert.prefix(3))
    assert terminal == (1.0, 1, 0.0, EstimateMethod.REWARD_MODEL)

    negative = RewardModel(np.zeros(8), -0.5, 'toytree')
    assert rm_step_reward(negative, featurizer, expert.prefix(1)).value == 0.0

    with pytest.raises(ContractViolation):
        rm_step_reward(RewardModel(np.zeros(4), 0.0, 'toytree'), featurizer, expert.prefix(1))
    with pytest.raises(ContractViolation):
        RewardModelScorer(shop_dataset.env, saturated, Featurizer(shop_dataset.env, 8))
