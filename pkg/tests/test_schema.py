import pytest

from steprefine.core import Instruction, UniformPolicy
from steprefine.exceptions import ContractViolation, DataCorruptionError
from steprefine.pairs import build_pairs
from steprefine.schema import (
    BaselineSchema, StepPairSchema, TaskSchema, TrajPairSchema, TrajectorySchema, trajectory_hash,
)
from steprefine.scorer import ExactScorer
from steprefine.shopsim import ShopGoal
from steprefine.toytree import ToyGoal, ToyTreeEnvironment


@pytest.fixture()
def toy_pair_set():
    instruction = Instruction('toytree', 'toy-0001', ToyGoal(2, 2, (0.0, 0.0, 0.0, 1.0)))
    env = ToyTreeEnvironment([instruction], depth=2, branching=2)
    experts = [env.expert_trajectory(instruction)]
    return env, build_pairs(env, UniformPolicy(), ExactScorer(env, UniformPolicy()), experts, tau=0.0)


def test_task_schema():
    instruction = Instruction('shopsim', 'shop-0003', ShopGoal('mug', frozenset({'matte'}), frozenset(), 25.0))
    record = TaskSchema().dump(instruction)
    assert record == {
        'schema_version': 1,
        'env_id': 'shopsim',
        'task_id': 'shop-0003',
        'goal': {'target_type': 'mug', 'required_attributes': ['matte'], 'required_options': [], 'budget': 25.0},
    }
    assert TaskSchema().load_record(record) == instruction


def test_versioned_records():
    instruction = Instruction('toytree', 'toy-0001', ToyGoal(1, 2, (0.0, 1.0)))
    record = TaskSchema().dump(instruction)
    for broken in (
        {key: value for key, value in record.items() if key != 'schema_version'},
        dict(record, schema_version=2),
        dict(record, owner='me'),
        dict(record, goal={'depth': 1, 'branching': 2, 'leaf_rewards': [0.0, 1.0], 'extra': 1}),
    ):
        with pytest.raises(DataCorruptionError):
            TaskSchema().load_record(broken)


def test_trajectory_schema(toy_dataset):
    env = toy_dataset.env
    expert = toy_dataset.experts[0]
    record = TrajectorySchema().dump(expert)
    assert record['terminated'] == 'completed'
    assert record['steps'][0]['action'] == expert.actions[0].text
    assert TrajectorySchema(env=env).load_record(record) == expert

    with pytest.raises(ContractViolation):
        TrajectorySchema().load(record)

    record['outcome_reward'] = 1.5
    with pytest.raises(DataCorruptionError):
        TrajectorySchema(env=env).load_record(record)


def test_trajectory_hash(toy_dataset):
    first, second = toy_dataset.experts[:2]
    assert len(trajectory_hash(first)) == 64
    assert trajectory_hash(first) == trajectory_hash(first._replace(steps=tuple(first.steps)))
    assert trajectory_hash(first) != trajectory_hash(second)


def test_step_pair_schema(toy_pair_set):
    env, pairs = toy_pair_set
    pair = pairs.step_pairs[1]
    record = StepPairSchema().dump(pair)
    assert record['expert_hash'] == trajectory_hash(pairs.traj_pairs[0].win_traj)
    assert record['win_step_reward'] == {'value': 1.0, 'n_samples': 1, 'std_error': 0.0, 'method': 'terminal'}
    assert StepPairSchema(env=env).load_record(record) == pair

    record['expert_hash'] = '0' * 64
    with pytest.raises(DataCorruptionError) as exc:
        StepPairSchema(env=env).load_record(record)
    assert 'expert_hash' in exc.value.detail


def test_traj_pair_schema(toy_pair_set):
    env, pairs = toy_pair_set
    pair = pairs.traj_pairs[0]
    record = TrajPairSchema().dump(pair)
    assert record['win_hash'] == trajectory_hash(pair.win_traj)
    assert record['lose_hash'] == trajectory_hash(pair.lose_traj)
    assert TrajPairSchema(env=env).load_record(record) == pair


def test_baseline_schema():
    record = BaselineSchema().dump({'train_reward': 0.5, 'test_reward': 0.25, 'checkpoint_hash': 'abc'})
    assert record == {
        'schema_version': 1, 'train_reward': 0.5, 'test_reward': 0.25, 'checkpoint_hash': 'abc',
    }
    loaded = BaselineSchema().load_record(record)
    assert loaded['unseen_reward'] is None
    assert loaded['avg_reward_per_step'] is None
