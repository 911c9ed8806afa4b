"""
Evaluation of agents and of step rewards, and the tables summarizing runs.
"""
import csv
import io
import logging
import os
from collections import defaultdict
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
import yaml

from steprefine.core import BaseEnvironment, BasePolicy, HistoryPrefix, Instruction, Trajectory, rollout
from steprefine.exceptions import ContractViolation, DataCorruptionError
from steprefine.pairs import explore_from_expert
from steprefine.scorer import BaseStepScorer, ExactScorer, score_trajectory_steps
from steprefine.utils import atomic_write, derive_rng, read_jsonl

logger = logging.getLogger(__name__)

#: Written in place of a value that could not be computed.
UNDEFINED = 'undefined'
#: Written in place of a value whose source record is missing.
MISSING = 'missing'


class TaskResult(NamedTuple):
    task_id: str
    outcome_reward: float
    n_steps: int
    terminated: str


class EvalResult(NamedTuple):
    average_reward: float
    results: List[TaskResult]


def run_tasks(
    env: BaseEnvironment, policy: BasePolicy, instructions: Sequence[Instruction], temperature: float = 0.0,
    seed: int = 0,
) -> List[Trajectory]:
    """ One rollout per task from the empty prefix, in task id order. """
    trajectories = []
    for instruction in sorted(instructions, key=lambda instruction: instruction.task_id):
        rng = derive_rng(seed, 'eval', instruction.task_id) if temperature > 0 else None
        trajectories.append(rollout(env, policy, HistoryPrefix(instruction), temperature, rng))
    return trajectories


def evaluate(
    env: BaseEnvironment, policy: BasePolicy, instructions: Sequence[Instruction], temperature: float = 0.0,
    seed: int = 0,
) -> EvalResult:
    """
    Average outcome reward of ``policy`` over ``instructions``. Greedy by default,
    a positive ``temperature`` samples actions from streams keyed by ``seed`` and task.
    """
    results = [
        TaskResult(trajectory.instruction.task_id, trajectory.outcome_reward, trajectory.length,
                   trajectory.terminated.value)
        for trajectory in run_tasks(env, policy, instructions, temperature, seed)
    ]
    average = float(np.mean([result.outcome_reward for result in results])) if results else 0.0
    return EvalResult(average, results)


def avg_reward_per_step(
    env: BaseEnvironment, policy: BasePolicy, scorer: BaseStepScorer, instructions: Sequence[Instruction],
) -> float:
    """ Mean over tasks of the mean step reward along the greedy trajectory of each task. """
    return mean_step_reward(run_tasks(env, policy, instructions), scorer)


def mean_step_reward(trajectories: Sequence[Trajectory], scorer: BaseStepScorer) -> float:
    if not trajectories:
        return 0.0
    per_task = [
        np.mean([estimate.value for estimate in score_trajectory_steps(scorer, trajectory)])
        for trajectory in trajectories
    ]
    return float(np.mean(per_task))


class AccuracyResult(NamedTuple):
    #: ``None`` when no pair was admitted.
    accuracy: Optional[float]
    n_pairs: int
    n_agree: int
    #: Admitted pairs whose two states the ground truth scores equally, left out of the accuracy.
    n_ties: int


def state_ground_truth(env: BaseEnvironment) -> Callable[[HistoryPrefix], float]:
    """ Ground truth from the environment's heuristic score of the state a prefix reaches. """
    def score(prefix: HistoryPrefix) -> float:
        value = env.ground_truth_score(prefix.instruction, env.replay(prefix))
        if value is None:
            raise ContractViolation(f'`{env.env_id}` has no heuristic state score.')
        return value
    return score


def exact_ground_truth(env: BaseEnvironment, policy: BasePolicy) -> Callable[[HistoryPrefix], float]:
    """ Ground truth from exact enumeration under ``policy``. """
    oracle = ExactScorer(env, policy)
    return lambda prefix: oracle.score(prefix).value


def step_reward_accuracy(
    env: BaseEnvironment,
    agent: BasePolicy,
    scorer: BaseStepScorer,
    experts: Sequence[Trajectory],
    tau: float,
    ground_truth: Callable[[HistoryPrefix], float],
) -> AccuracyResult:
    """
    Agreement of the scorer with a ground truth on contrastive action pairs.

    At every step where the greedy agent diverges from an expert, the expert and
    the agent action are scored. Pairs whose estimates differ by more than ``tau``
    are ordered by the scorer and checked against the ground truth of the two
    resulting states.
    """
    if tau < 0:
        raise ContractViolation('The pair filtering threshold must be non-negative.')
    n_pairs = n_agree = n_ties = 0
    for expert in sorted(experts, key=lambda trajectory: trajectory.instruction.task_id):
        for t in range(1, expert.length + 1):
            agent_step = explore_from_expert(env, agent, expert, t).steps[0]
            if agent_step.action == expert.steps[t - 1].action:
                continue
            expert_prefix = expert.prefix(t)
            agent_prefix = expert.prefix(t - 1).extend(agent_step)
            difference = scorer.score(expert_prefix).value - scorer.score(agent_prefix).value
            if abs(difference) <= tau:
                continue
            n_pairs += 1
            truth = ground_truth(expert_prefix) - ground_truth(agent_prefix)
            if truth == 0:
                n_ties += 1
            elif (truth > 0) == (difference > 0):
                n_agree += 1
    decided = n_pairs - n_ties
    accuracy = n_agree / decided if decided else None
    if accuracy is None:
        logger.warning('No decided pair for the step reward accuracy, it is undefined.')
    return AccuracyResult(accuracy, n_pairs, n_agree, n_ties)


class AccuracyRow(NamedTuple):
    n_samples: int
    seed: int
    accuracy: Optional[float]
    n_pairs: int
    n_ties: int


def accuracy_sweep(
    env: BaseEnvironment,
    agent: BasePolicy,
    make_scorer: Callable[[int, int], BaseStepScorer],
    experts: Sequence[Trajectory],
    tau: float,
    ground_truth: Callable[[HistoryPrefix], float],
    sample_counts: Sequence[int] = (1, 3, 5, 10),
    seeds: Sequence[int] = (0,),
) -> List[AccuracyRow]:
    """ :func:`step_reward_accuracy` for every number of samples and seed, scorers come from ``make_scorer``. """
    rows = []
    for n_samples in sample_counts:
        for seed in seeds:
            result = step_reward_accuracy(env, agent, make_scorer(n_samples, seed), experts, tau, ground_truth)
            rows.append(AccuracyRow(n_samples, seed, result.accuracy, result.n_pairs, result.n_ties))
            logger.info('Step reward accuracy with N=%s, seed %s: %s.', n_samples, seed, result.accuracy)
    return rows


def mean_accuracy_by_samples(rows: Iterable[AccuracyRow]) -> Dict[int, Optional[float]]:
    """ Mean accuracy per number of samples over the seeds where it is defined. """
    grouped = defaultdict(list)  # type: Dict[int, List[float]]
    counts = set()
    for row in rows:
        counts.add(row.n_samples)
        if row.accuracy is not None:
            grouped[row.n_samples].append(row.accuracy)
    return {n: float(np.mean(grouped[n])) if grouped[n] else None for n in sorted(counts)}


def format_value(value) -> str:
    if value is None:
        return UNDEFINED
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f'{value:.6f}'
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(value) for value in row])
    return buffer.getvalue()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write(path, render_csv(header, rows))


ITERATION_HEADER = (
    'run', 'iteration', 'n_step_pairs', 'n_traj_pairs', 'train_reward', 'test_reward', 'unseen_reward',
    'avg_reward_per_step', 'params_version',
)
ABLATION_HEADER = ('arm', 'scoring', 'n_runs', 'mean_sft_test_reward', 'mean_best_test_reward', 'runs')
ACCURACY_HEADER = ('n_samples', 'mean_accuracy', 'n_rows')
STEP_REWARD_HEADER = ('run', 'agent', 'avg_reward_per_step')
ARM_NAMES = {
    (True, True, True): 'full',
    (False, True, True): 'w/o o-DPO',
    (True, False, True): 'w/o s-DPO',
    (True, True, False): 'w/o SFT',
}


class RunSummary(NamedTuple):
    name: str
    config: dict
    baseline: Optional[dict]
    reports: Dict[int, dict]


def _load_json_record(path: str) -> Optional[dict]:
    if not os.path.exists(path):
        return None
    records = read_jsonl(path)
    if len(records) != 1:
        raise DataCorruptionError(f'Expected a single record in `{path}`.')
    return records[0]


def load_run(run_dir: str) -> RunSummary:
    with open(os.path.join(run_dir, 'config.yaml')) as f:
        config = yaml.safe_load(f) or {}
    reports = {}
    reports_path = os.path.join(run_dir, 'reports.jsonl')
    if os.path.exists(reports_path):
        for record in read_jsonl(reports_path):
            reports[record['iteration']] = record
    baseline = _load_json_record(os.path.join(run_dir, 'baseline.json'))
    return RunSummary(os.path.basename(os.path.normpath(run_dir)), config, baseline, reports)


def find_runs(path: str) -> List[str]:
    """ ``path`` itself when it is a run directory, else its run subdirectories, sorted. """
    if os.path.exists(os.path.join(path, 'config.yaml')):
        return [path]
    return sorted(
        os.path.join(path, name) for name in os.listdir(path)
        if os.path.exists(os.path.join(path, name, 'config.yaml'))
    )


def _arm(config: dict) -> str:
    optimize = config.get('optimize') or {}
    flags = tuple(bool(optimize.get(flag, True)) for flag in ('use_odpo', 'use_sdpo', 'use_sft'))
    return ARM_NAMES.get(flags, '+'.join(name for name, on in zip(('odpo', 'sdpo', 'sft'), flags) if on) or 'none')


def iteration_rows(run: RunSummary) -> List[tuple]:
    rows = []
    if run.baseline is not None:
        baseline = run.baseline
        rows.append((
            run.name, 'sft', 0, 0, baseline['train_reward'], baseline['test_reward'], baseline.get('unseen_reward'),
            baseline.get('avg_reward_per_step'), None,
        ))
    n_iterations = max([int(run.config.get('iterations', 0))] + list(run.reports))
    for iteration in range(1, n_iterations + 1):
        report = run.reports.get(iteration)
        if report is None:
            rows.append((run.name, iteration) + (MISSING,) * (len(ITERATION_HEADER) - 2))
            continue
        rows.append((
            run.name, iteration, report['n_step_pairs'], report['n_traj_pairs'], report['train_reward'],
            report['test_reward'], report.get('unseen_reward'), report.get('avg_reward_per_step'),
            report['params_version'],
        ))
    if run.reports:
        best = max(run.reports.values(), key=lambda report: (report['test_reward'], -report['iteration']))
        rows.append((
            run.name, f'best (iteration {best["iteration"]})', best['n_step_pairs'], best['n_traj_pairs'],
            best['train_reward'], best['test_reward'], best.get('unseen_reward'), best.get('avg_reward_per_step'),
            best['params_version'],
        ))
    return rows


def _read_accuracy_rows(run_dir: str) -> List[dict]:
    path = os.path.join(run_dir, 'metrics', 'step-accuracy.csv')
    if not os.path.exists(path):
        return []
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def report_tables(path: str, out_dir: Optional[str] = None) -> Dict[str, str]:
    """
    Writes the summary tables of a run directory, or of a directory of runs, as CSV:

        - ``iterations.csv``: baseline, every iteration (``missing`` where a report is absent) and the best one
        - ``ablation.csv``: runs grouped by loss arm and scoring mode
        - ``accuracy.csv``: mean step reward accuracy per number of samples, from ``metrics/step-accuracy.csv``
        - ``step_reward.csv``: average reward per step of the SFT agent and of each iteration

    Returns the written paths by table name.
    """
    run_dirs = find_runs(path)
    if not run_dirs:
        raise ContractViolation(f'No run directory under `{path}`.')
    out_dir = out_dir or os.path.join(path, 'tables')
    runs = [load_run(run_dir) for run_dir in run_dirs]

    iterations = [row for run in runs for row in iteration_rows(run)]

    arms = defaultdict(list)  # type: Dict[tuple, List[RunSummary]]
    for run in runs:
        scoring = (run.config.get('scoring') or {}).get('mode', 'mc')
        arms[(_arm(run.config), scoring)].append(run)
    ablation = []
    for (arm, scoring), members in sorted(arms.items()):
        sft = [run.baseline['test_reward'] for run in members if run.baseline is not None]
        best = [max(report['test_reward'] for report in run.reports.values()) for run in members if run.reports]
        ablation.append((
            arm, scoring, len(members), float(np.mean(sft)) if sft else None,
            float(np.mean(best)) if best else None, ' '.join(run.name for run in members),
        ))

    accuracy_rows = [row for run_dir in run_dirs for row in _read_accuracy_rows(run_dir)]
    by_samples = defaultdict(list)  # type: Dict[int, List[float]]
    row_counts = defaultdict(int)  # type: Dict[int, int]
    for row in accuracy_rows:
        n_samples = int(row['n_samples'])
        row_counts[n_samples] += 1
        if row['accuracy'] != UNDEFINED:
            by_samples[n_samples].append(float(row['accuracy']))
    accuracy = [
        (n, float(np.mean(by_samples[n])) if by_samples[n] else None, row_counts[n]) for n in sorted(row_counts)
    ]

    step_reward = []
    for run in runs:
        if run.baseline is not None:
            step_reward.append((run.name, 'sft', run.baseline.get('avg_reward_per_step')))
        for iteration in sorted(run.reports):
            step_reward.append((run.name, f'iter-{iteration}', run.reports[iteration].get('avg_reward_per_step')))

    paths = {
        'iterations': os.path.join(out_dir, 'iterations.csv'),
        'ablation': os.path.join(out_dir, 'ablation.csv'),
        'accuracy': os.path.join(out_dir, 'accuracy.csv'),
        'step_reward': os.path.join(out_dir, 'step_reward.csv'),
    }
    write_csv(paths['iterations'], ITERATION_HEADER, iterations)
    write_csv(paths['ablation'], ABLATION_HEADER, ablation)
    write_csv(paths['accuracy'], ACCURACY_HEADER, accuracy)
    write_csv(paths['step_reward'], STEP_REWARD_HEADER, step_reward)
    logger.info('Wrote tables of %s runs to %s.', len(runs), out_dir)
    return paths
