import os

import numpy as np
import pytest

from steprefine import storage
from steprefine.constants import CHECKPOINT_MAGIC
from steprefine.core import Instruction, UniformPolicy
from steprefine.exceptions import ContractViolation, DataCorruptionError, IntegrityError, RunLockedError
from steprefine.pairs import build_pairs
from steprefine.policy import PolicyParams
from steprefine.reward_model import RewardModel
from steprefine.scorer import ExactScorer
from steprefine.storage import (
    CheckpointHeader, Manifest, RunLock, check_env, dataset_files, load_checkpoint, load_dataset, load_policy,
    load_reward_model, read_pairs, read_trajectories, save_checkpoint, save_dataset, save_policy, save_reward_model,
    write_pairs, write_trajectories,
)
from steprefine.toytree import ToyConfig, ToyGoal, ToyTreeEnvironment
from steprefine.utils import sha256_file


def test_checkpoint_bytes(tmp_path):
    path = str(tmp_path / 'a.ckpt')
    array = np.array([[1.0, -2.0], [0.5, 0.0]])
    digest = save_checkpoint(path, array, CheckpointHeader('policy', 'toytree', (2, 2), 4, 'abc'))
    assert digest == sha256_file(path)

    with open(path, 'rb') as f:
        data = f.read()
    assert data.startswith(CHECKPOINT_MAGIC)
    assert data[len(CHECKPOINT_MAGIC):].split(b'\n', 1)[0] == (
        b'{"config_hash": "abc", "dtype": "<f8", "env_id": "toytree", "kind": "policy", "shape": [2, 2], "version": 4}'
    )
    assert len(data.split(b'\n', 2)[2]) == 4 * 8

    other = str(tmp_path / 'b.ckpt')
    assert save_checkpoint(other, array.copy(), CheckpointHeader('policy', 'toytree', (2, 2), 4, 'abc')) == digest

    header, loaded = load_checkpoint(path, 'policy')
    assert header == CheckpointHeader('policy', 'toytree', (2, 2), 4, 'abc')
    assert np.array_equal(loaded, array)


def test_checkpoint_errors(tmp_path):
    path = str(tmp_path / 'a.ckpt')
    save_checkpoint(path, np.zeros(3), CheckpointHeader('reward_model', 'toytree', (3,), 0, ''))
    with pytest.raises(DataCorruptionError) as exc:
        load_checkpoint(path, 'policy')
    assert 'expected `policy`' in exc.value.detail

    with open(path, 'rb') as f:
        data = f.read()
    with open(path, 'wb') as f:
        f.write(data[:-8])
    with pytest.raises(DataCorruptionError) as exc:
        load_checkpoint(path, 'reward_model')
    assert 'expected 24' in exc.value.detail

    with open(path, 'wb') as f:
        f.write(b'not a checkpoint')
    with pytest.raises(DataCorruptionError):
        load_checkpoint(path, 'reward_model')

    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC + b'{"kind": \n')
    with pytest.raises(DataCorruptionError):
        load_checkpoint(path, 'reward_model')


def test_policy_checkpoint(tmp_path):
    path = str(tmp_path / 'policy.ckpt')
    params = PolicyParams(np.arange(6, dtype=float).reshape(3, 2), 'shopsim', 7)
    save_policy(path, params)
    loaded = load_policy(path)
    assert loaded.env_id == 'shopsim'
    assert loaded.version == 7
    assert np.array_equal(loaded.weights, params.weights)

    with pytest.raises(DataCorruptionError):
        load_reward_model(path)


def test_reward_model_checkpoint(tmp_path):
    path = str(tmp_path / 'rm.ckpt')
    model = RewardModel(np.array([0.25, -1.0, 0.0]), 0.5, 'gridhouse')
    save_reward_model(path, model)
    loaded = load_reward_model(path)
    assert np.array_equal(loaded.weights, model.weights)
    assert loaded.bias == 0.5
    assert loaded.env_id == 'gridhouse'


def test_dataset_directory(tmp_path):
    directory = str(tmp_path / 'data')
    config = ToyConfig(train_size=5, test_size=3, depth=2, branching=3)
    env, splits = ToyTreeEnvironment.generate(config, seed=9)
    written = save_dataset(directory, env, splits, 9, config)
    assert os.path.basename(written[-1]) == 'env.json'
    assert dataset_files(directory) == sorted(written)

    dataset = load_dataset(directory)
    assert dataset.env.env_id == 'toytree'
    assert dataset.seed == 9
    assert dataset.config == {'train_size': 5, 'test_size': 3, 'depth': 2, 'branching': 3}
    for name, instructions in splits.items():
        assert dataset.splits[name] == sorted(instructions, key=lambda instruction: instruction.task_id)
    assert [expert.instruction for expert in dataset.experts] == dataset.splits['train']
    assert {expert.outcome_reward for expert in dataset.experts} == {1.0}


def test_dataset_directory_errors(tmp_path):
    with pytest.raises(DataCorruptionError):
        load_dataset(str(tmp_path))

    directory = str(tmp_path / 'data')
    config = ToyConfig(train_size=2, test_size=1, depth=2, branching=2)
    env, splits = ToyTreeEnvironment.generate(config, seed=1)
    save_dataset(directory, env, splits, 1, config)
    experts_path = os.path.join(directory, 'experts.jsonl')
    with open(experts_path) as f:
        text = f.read()
    with open(experts_path, 'w') as f:
        f.write(text.replace('"action": "choose', '"action": "pick'))
    with pytest.raises(DataCorruptionError):
        load_dataset(directory)


def test_trajectory_and_pair_stores(tmp_path, toy_dataset):
    env = toy_dataset.env
    path = str(tmp_path / 'trajectories.jsonl')
    write_trajectories(path, toy_dataset.experts)
    assert read_trajectories(path, env) == toy_dataset.experts

    instruction = Instruction('toytree', 'toy-0001', ToyGoal(2, 2, (0.0, 0.0, 0.0, 1.0)))
    small = ToyTreeEnvironment([instruction], depth=2, branching=2)
    pairs = build_pairs(
        small, UniformPolicy(), ExactScorer(small, UniformPolicy()), [small.expert_trajectory(instruction)], 0.0,
    )
    paths = write_pairs(str(tmp_path / 'pairs'), pairs)
    assert sorted(paths) == ['step_pairs', 'traj_pairs']
    assert read_pairs(str(tmp_path / 'pairs'), small) == pairs


def test_manifest(tmp_path):
    run_dir = str(tmp_path)
    manifest = Manifest(run_dir)
    assert manifest.entries() == []
    manifest.verify()

    first = tmp_path / 'first.txt'
    second = tmp_path / 'sub' / 'second.txt'
    first.write_text('one')
    second.parent.mkdir()
    second.write_text('two')
    manifest.record('input', str(first))
    manifest.record('artifact', str(second))
    manifest.record('input', str(first))
    assert [entry['path'] for entry in manifest.entries()] == ['first.txt', os.path.join('sub', 'second.txt')]
    manifest.verify()

    first.write_text('changed')
    second.unlink()
    with pytest.raises(IntegrityError) as exc:
        manifest.verify()
    assert [error.get('path') for error in exc.value.errors] == [
        'first.txt', os.path.join('sub', 'second.txt'), None,
    ]
    assert exc.value.errors[1]['detail'].endswith('is missing.')

    with pytest.raises(IntegrityError):
        manifest.verify([str(first)])
    manifest.record('input', str(first))
    manifest.verify([str(first)])
    assert len(manifest.entries()) == 3


def test_run_lock(tmp_path):
    run_dir = str(tmp_path / 'run')
    lock_path = os.path.join(run_dir, '.lock')
    with RunLock(run_dir) as lock:
        assert os.path.exists(lock_path)
        with open(lock_path) as f:
            assert f.read() == f'{lock.pid}\n'
        # taking the lock twice from one process is fine
        RunLock(run_dir).acquire()
    assert not os.path.exists(lock_path)


def test_run_lock_held_by_live_process(tmp_path):
    run_dir = str(tmp_path)
    with open(os.path.join(run_dir, '.lock'), 'w') as f:
        f.write(f'{os.getppid()}\n')
    with pytest.raises(RunLockedError) as exc:
        RunLock(run_dir).acquire()
    assert str(os.getppid()) in exc.value.detail


def test_run_lock_takes_over_stale_lock(tmp_path, monkeypatch):
    monkeypatch.setattr(storage, '_process_alive', lambda pid: False)
    run_dir = str(tmp_path)
    with open(os.path.join(run_dir, '.lock'), 'w') as f:
        f.write('999999\n')
    lock = RunLock(run_dir)
    lock.acquire()
    with open(os.path.join(run_dir, '.lock')) as f:
        assert f.read() == f'{lock.pid}\n'
    lock.release()
    assert not os.path.exists(os.path.join(run_dir, '.lock'))


def test_check_env(toy_dataset):
    check_env(toy_dataset.env, 'toytree', 'Checkpoint')
    with pytest.raises(ContractViolation) as exc:
        check_env(toy_dataset.env, 'shopsim', 'Checkpoint')
    assert exc.value.detail == 'Checkpoint belongs to `shopsim`, the dataset to `toytree`.'
