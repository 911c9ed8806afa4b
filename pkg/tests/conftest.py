import pytest

from steprefine.gridhouse import GridHouseEnvironment, HouseConfig
from steprefine.shopsim import ShopConfig, ShopSimEnvironment
from steprefine.storage import Dataset
from steprefine.toytree import ToyConfig, ToyTreeEnvironment


def make_dataset(env_class, config, seed):
    env, splits = env_class.generate(config, seed)
    experts = [
        env.expert_trajectory(instruction)
        for instruction in sorted(splits['train'], key=lambda instruction: instruction.task_id)
    ]
    return Dataset(env, splits, experts, seed, dict(config._asdict()))


@pytest.fixture(scope='session')
def toy_dataset():
    return make_dataset(ToyTreeEnvironment, ToyConfig(train_size=12, test_size=6), seed=3)


@pytest.fixture(scope='session')
def shop_dataset():
    return make_dataset(ShopSimEnvironment, ShopConfig(train_size=20, test_size=10), seed=5)


@pytest.fixture(scope='session')
def house_dataset():
    return make_dataset(GridHouseEnvironment, HouseConfig(train_size=12, test_size=6, unseen_size=6), seed=2)


@pytest.fixture()
def run_dir(tmp_path):
    return str(tmp_path / 'run')


def toy_run_config(output_dir, iterations=2, **sections):
    """ A small toytree run, sections override the defaults. """
    raw = {
        'env': 'toytree',
        'seed': 1,
        'output_dir': output_dir,
        'iterations': iterations,
        'data': {'train_size': 12, 'test_size': 6},
        'sft': {'epochs': 10},
        'optimize': {'epochs': 3},
        'evaluation': {'n_samples': 2},
    }
    for name, values in sections.items():
        raw[name] = dict(raw.get(name, {}), **values)
    return raw
