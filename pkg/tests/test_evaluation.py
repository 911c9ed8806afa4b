import csv
import json
import os

import pytest

from steprefine.core import ExpertPolicy, UniformPolicy
from steprefine.evaluation import (
    AccuracyRow, MISSING, UNDEFINED, accuracy_sweep, avg_reward_per_step, evaluate, exact_ground_truth,
    find_runs, format_value, load_run, mean_accuracy_by_samples, mean_step_reward, render_csv, report_tables,
    run_tasks, state_ground_truth, step_reward_accuracy,
)
from steprefine.exceptions import ContractViolation
from steprefine.scorer import ExactScorer, MonteCarloScorer, RandomScorer


def read_rows(path):
    with open(path, newline='') as f:
        return list(csv.reader(f))


def test_evaluate_expert(toy_dataset):
    env = toy_dataset.env
    result = evaluate(env, ExpertPolicy(env), toy_dataset.splits['train'])
    assert result.average_reward == 1.0
    task_ids = [task.task_id for task in result.results]
    assert task_ids == sorted(task_ids)
    assert {task.n_steps for task in result.results} == {3}
    assert {task.terminated for task in result.results} == {'completed'}


def test_evaluate_greedy_uniform(toy_dataset):
    env = toy_dataset.env
    test = toy_dataset.splits['test']
    result = evaluate(env, UniformPolicy(), test)
    expected = sum(instruction.goal.leaf_rewards[0] for instruction in test) / len(test)
    assert result.average_reward == pytest.approx(expected)
    assert evaluate(env, UniformPolicy(), []).average_reward == 0.0


def test_sampled_evaluation_is_seeded(toy_dataset):
    env = toy_dataset.env
    test = toy_dataset.splits['test']
    first = run_tasks(env, UniformPolicy(), test, temperature=1.0, seed=4)
    assert run_tasks(env, UniformPolicy(), list(reversed(test)), temperature=1.0, seed=4) == first


def test_avg_reward_per_step(toy_dataset):
    env = toy_dataset.env
    expert_scorer = ExactScorer(env, ExpertPolicy(env))
    assert avg_reward_per_step(env, ExpertPolicy(env), expert_scorer, toy_dataset.splits['test']) == 1.0
    assert mean_step_reward([], expert_scorer) == 0.0

    trajectories = run_tasks(env, UniformPolicy(), toy_dataset.splits['test'])
    uniform = mean_step_reward(trajectories, ExactScorer(env, UniformPolicy()))
    assert 0.0 <= uniform <= 1.0


def test_exact_scorer_agrees_with_exact_truth(toy_dataset):
    env = toy_dataset.env
    scorer = ExactScorer(env, UniformPolicy())
    result = step_reward_accuracy(
        env, UniformPolicy(), scorer, toy_dataset.experts, 0.0, exact_ground_truth(env, UniformPolicy()),
    )
    assert result.n_pairs > 0
    assert result.n_ties == 0
    assert result.accuracy == 1.0
    assert result.n_agree == result.n_pairs


def test_accuracy_undefined_without_pairs(toy_dataset):
    env = toy_dataset.env
    result = step_reward_accuracy(
        env, ExpertPolicy(env), ExactScorer(env, UniformPolicy()), toy_dataset.experts, 0.0,
        exact_ground_truth(env, UniformPolicy()),
    )
    assert result == (None, 0, 0, 0)
    with pytest.raises(ContractViolation):
        step_reward_accuracy(
            env, UniformPolicy(), ExactScorer(env, UniformPolicy()), toy_dataset.experts, -1.0,
            exact_ground_truth(env, UniformPolicy()),
        )


def test_state_ground_truth(toy_dataset, shop_dataset):
    with pytest.raises(ContractViolation):
        state_ground_truth(toy_dataset.env)(toy_dataset.experts[0].prefix(1))

    env = shop_dataset.env
    expert = shop_dataset.experts[0]
    truth = state_ground_truth(env)
    assert truth(expert.prefix(0)) == 0.0
    assert truth(expert.prefix(expert.length)) == 1.0


def test_accuracy_sweep(shop_dataset):
    env = shop_dataset.env
    experts = shop_dataset.experts[:8]

    def make_scorer(n_samples, seed):
        return MonteCarloScorer(env, UniformPolicy(), n_samples, seed)

    rows = accuracy_sweep(
        env, UniformPolicy(), make_scorer, experts, 0.0, state_ground_truth(env), sample_counts=(1, 2), seeds=(0, 1),
    )
    assert [(row.n_samples, row.seed) for row in rows] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    for row in rows:
        assert row.accuracy is None or 0.0 <= row.accuracy <= 1.0

    random_rows = accuracy_sweep(
        env, UniformPolicy(), lambda n_samples, seed: RandomScorer(env, seed), experts, 0.0, state_ground_truth(env),
        sample_counts=(1,), seeds=(3,),
    )
    assert random_rows[0].n_pairs > 0


def test_mean_accuracy_by_samples():
    rows = [
        AccuracyRow(1, 0, 0.5, 4, 0),
        AccuracyRow(1, 1, 1.0, 4, 0),
        AccuracyRow(3, 0, None, 0, 0),
    ]
    assert mean_accuracy_by_samples(rows) == {1: 0.75, 3: None}


def test_format_value():
    assert format_value(None) == UNDEFINED
    assert format_value(True) == 'true'
    assert format_value(0.5) == '0.500000'
    assert format_value(3) == '3'
    assert format_value(MISSING) == 'missing'
    assert render_csv(('a', 'b'), [(1, None), (0.25, False)]) == 'a,b\n1,undefined\n0.250000,false\n'


def write_lines(path, records):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(record) + '\n')


def report(iteration, test_reward):
    return {
        'schema_version': 1, 'iteration': iteration, 'n_step_pairs': 5, 'n_traj_pairs': 2, 'train_reward': 0.7,
        'test_reward': test_reward, 'unseen_reward': None, 'avg_reward_per_step': 0.5, 'losses': [],
        'checkpoint': f'checkpoints/iter-{iteration}.ckpt', 'checkpoint_hash': 'x', 'scorer_hash': 'y',
        'params_version': iteration * 10, 'best_test_reward': test_reward, 'best_iteration': iteration,
    }


@pytest.fixture()
def synthetic_runs(tmp_path):
    root = tmp_path / 'runs'
    run = root / 'toy-1'
    run.mkdir(parents=True)
    (run / 'config.yaml').write_text(
        'env: toytree\niterations: 3\noptimize:\n  use_sdpo: false\nscoring:\n  mode: mc\n'
    )
    write_lines(str(run / 'baseline.json'), [{
        'schema_version': 1, 'train_reward': 0.5, 'test_reward': 0.3, 'checkpoint_hash': 'z',
    }])
    write_lines(str(run / 'reports.jsonl'), [report(1, 0.4), report(3, 0.6)])
    (run / 'metrics').mkdir()
    (run / 'metrics' / 'step-accuracy.csv').write_text(
        'n_samples,seed,accuracy,n_pairs,n_ties\n1,0,0.5,4,0\n1,1,undefined,0,0\n3,0,1.0,4,0\n'
    )

    other = root / 'toy-2'
    other.mkdir()
    (other / 'config.yaml').write_text('env: toytree\niterations: 1\n')
    (root / 'notes').mkdir()
    return root


def test_find_and_load_runs(synthetic_runs):
    runs = find_runs(str(synthetic_runs))
    assert [os.path.basename(path) for path in runs] == ['toy-1', 'toy-2']
    assert find_runs(runs[0]) == [runs[0]]

    run = load_run(runs[0])
    assert run.name == 'toy-1'
    assert sorted(run.reports) == [1, 3]
    assert run.baseline['test_reward'] == 0.3
    assert load_run(runs[1]).baseline is None


def test_report_tables(synthetic_runs):
    paths = report_tables(str(synthetic_runs))
    assert sorted(paths) == ['ablation', 'accuracy', 'iterations', 'step_reward']
    assert os.path.dirname(paths['iterations']) == str(synthetic_runs / 'tables')

    iterations = read_rows(paths['iterations'])
    assert iterations[0][:3] == ['run', 'iteration', 'n_step_pairs']
    assert iterations[1] == ['toy-1', 'sft', '0', '0', '0.500000', '0.300000', UNDEFINED, UNDEFINED, UNDEFINED]
    assert iterations[2][:6] == ['toy-1', '1', '5', '2', '0.700000', '0.400000']
    assert iterations[3] == ['toy-1', '2'] + [MISSING] * 7
    assert iterations[5][:2] == ['toy-1', 'best (iteration 3)']
    assert iterations[6] == ['toy-2', '1'] + [MISSING] * 7

    ablation = read_rows(paths['ablation'])
    assert ablation[1] == ['full', 'mc', '1', UNDEFINED, UNDEFINED, 'toy-2']
    assert ablation[2] == ['w/o s-DPO', 'mc', '1', '0.300000', '0.600000', 'toy-1']

    accuracy = read_rows(paths['accuracy'])
    assert accuracy[1:] == [['1', '0.500000', '2'], ['3', '1.000000', '1']]

    step_reward = read_rows(paths['step_reward'])
    assert step_reward[1:] == [
        ['toy-1', 'sft', UNDEFINED], ['toy-1', 'iter-1', '0.500000'], ['toy-1', 'iter-3', '0.500000'],
    ]


def test_report_tables_needs_runs(tmp_path):
    with pytest.raises(ContractViolation):
        report_tables(str(tmp_path))


@pytest.mark.slow
def test_accuracy_grows_with_samples(toy_dataset):
    env = toy_dataset.env
    rows = accuracy_sweep(
        env, UniformPolicy(), lambda n_samples, seed: MonteCarloScorer(env, UniformPolicy(), n_samples, seed),
        toy_dataset.experts, tau=0.0, ground_truth=exact_ground_truth(env, UniformPolicy()),
        sample_counts=(1, 10), seeds=range(20),
    )
    means = mean_accuracy_by_samples(rows)
    assert means[1] is not None and means[10] is not None
    assert means[10] >= means[1]
