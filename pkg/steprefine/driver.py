"""
The iteration loop of a run: dataset, SFT agent, then repeated explore, score,
build pairs, optimize and evaluate cycles, with every artifact written to the
run directory and recorded in its manifest.

A run directory can be resumed: completed stages are loaded back from their
artifacts after their manifest hashes are verified, and every stage draws its
randomness from the run seed and its own name, so a resumed run writes the same
bytes an uninterrupted one does.
"""
import logging
import os
from typing import List, NamedTuple, Optional

import numpy as np

from steprefine.config import RunConfig, config_hash, config_to_dict, parse_config, render_config
from steprefine.core import BaseEnvironment, BasePolicy
from steprefine.evaluation import evaluate, mean_step_reward, run_tasks, write_csv
from steprefine.exceptions import ConfigurationError, StepRefineException, TrainingAborted
from steprefine.meta import get_environment_class
from steprefine.mixture import EpochLosses, MixtureConfig, optimize_iteration
from steprefine.pairs import build_pairs
from steprefine.policy import Featurizer, LinearPolicy, PolicyParams
from steprefine.reward_model import RewardModelScorer, scored_steps_from_trajectories
from steprefine.schema import BaselineSchema, IterationReportSchema
from steprefine.scorer import BaseStepScorer, ExactScorer, MonteCarloScorer
from steprefine.sft import SFTConfig, train_sft
from steprefine.storage import (
    Dataset, Manifest, RunLock, dataset_files, load_dataset, load_policy, load_reward_model, save_dataset,
    save_policy, write_pairs, write_record, write_scored_steps,
)
from steprefine.utils import append_jsonl, atomic_write, derive_rng, read_jsonl, serialize_error, sha256_file

logger = logging.getLogger(__name__)

LOSS_HEADER = ('epoch', 'L_odpo', 'L_sdpo', 'L_sft', 'L_total')
SFT_HEADER = ('epoch', 'loss', 'train_action_agreement')
EVAL_HEADER = ('split', 'task_id', 'outcome_reward', 'n_steps', 'terminated')


class IterationReport(NamedTuple):
    iteration: int
    n_step_pairs: int
    n_traj_pairs: int
    train_reward: float
    test_reward: float
    unseen_reward: Optional[float]
    avg_reward_per_step: Optional[float]
    losses: List[EpochLosses]
    checkpoint: str
    checkpoint_hash: str
    scorer_hash: str
    params_version: int
    best_test_reward: float
    best_iteration: int


def stage_seed(root_seed: int, *keys) -> int:
    """ A seed of its own for a stage, drawn from the run seed and the stage keys. """
    return int(derive_rng(root_seed, *keys).integers(2 ** 31))


class RunContext:
    """ State shared by the stages of a run. """

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.run_dir = config.output_dir
        self.manifest = Manifest(self.run_dir)
        self.config_hash = config_hash(config)
        self.dataset = None  # type: Optional[Dataset]
        self.featurizer = None  # type: Optional[Featurizer]
        self.sft_params = None  # type: Optional[PolicyParams]
        self.sft_hash = ''
        self.scorer = None  # type: Optional[BaseStepScorer]
        self.scorer_hash = ''
        self.reports = []  # type: List[IterationReport]

    @property
    def env(self) -> BaseEnvironment:
        return self.dataset.env

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    def policy(self, params: PolicyParams) -> LinearPolicy:
        return LinearPolicy(params, self.featurizer)

    def eval_scorer(self) -> BaseStepScorer:
        """ Scores the steps of evaluation trajectories with the SFT agent. """
        sft_policy = self.policy(self.sft_params)
        scoring = self.config.scoring
        if scoring.mode == 'exact':
            return ExactScorer(self.env, sft_policy, scoring.temperature, scoring.node_budget)
        return MonteCarloScorer(
            self.env, sft_policy, self.config.evaluation.n_samples, stage_seed(self.config.seed, 'eval-scorer'),
            scoring.temperature,
        )

    def evaluate_agent(self, params: PolicyParams, label: str) -> dict:
        """ Rewards on every split and the average reward per step on the test split, with per-task rows. """
        policy = self.policy(params)
        splits = self.dataset.splits
        rewards = {}
        rows = []
        for split in ('train', 'test', 'unseen'):
            if split not in splits:
                rewards[f'{split}_reward'] = None
                continue
            result = evaluate(self.env, policy, splits[split])
            rewards[f'{split}_reward'] = result.average_reward
            rows.extend((split,) + tuple(task) for task in result.results)
        write_csv(self.path('metrics', f'eval-{label}.csv'), EVAL_HEADER, rows)
        rewards['avg_reward_per_step'] = None
        if self.config.evaluation.step_rewards:
            trajectories = run_tasks(self.env, policy, splits['test'])
            rewards['avg_reward_per_step'] = mean_step_reward(trajectories, self.eval_scorer())
        logger.info(
            'Agent %s: train %.4f, test %.4f, unseen %s, step reward %s.', label, rewards['train_reward'],
            rewards['test_reward'], rewards['unseen_reward'], rewards['avg_reward_per_step'],
        )
        return rewards


class BaseStage:
    """
    One step of a run. :meth:`run_stage` runs :meth:`before_stage`, :meth:`run` and
    :meth:`after_stage`; any error goes through :meth:`handle_error`, which
    writes ``failure.json`` and re-raises.

    Implementation will require overriding :meth:`run`.
    """

    #: Name of the stage in logs and failure records.
    name = ''

    def __init__(self, context: RunContext) -> None:
        self.context = context

    @classmethod
    def run_stage(cls, context: RunContext, *args, **kwargs):
        stage = cls(context, *args, **kwargs)
        try:
            stage.before_stage()
            result = stage.run()
            stage.after_stage(result)
        except Exception as exc:
            stage.handle_error(exc)
            raise
        return result

    def before_stage(self) -> None:
        logger.info('Stage %s started.', self.name)

    def after_stage(self, result) -> None:
        logger.info('Stage %s done.', self.name)

    def handle_error(self, exc: Exception) -> None:
        """
        Writes the machine-readable failure record. Errors of this package are
        expected failures, anything else is logged with its traceback.
        """
        if not isinstance(exc, StepRefineException):
            logger.exception('Encountered an error in stage %s.', self.name)
        record = serialize_error(exc, stage=self.name)
        if isinstance(exc, TrainingAborted):
            record['diagnostics'] = exc.diagnostics
        write_record(self.context.path('failure.json'), record)

    def run(self):
        raise NotImplementedError()


class DataStage(BaseStage):
    """ Loads the configured dataset, or generates one into the run directory. """

    name = 'data'

    def run(self) -> Dataset:
        context = self.context
        config = context.config
        if config.data.dir is not None:
            directory = config.data.dir
        else:
            directory = context.path('data')
            if not os.path.exists(os.path.join(directory, 'env.json')):
                env_class = get_environment_class(config.env)
                defaults = env_class.config_class()
                sizes = {
                    name: getattr(config.data, name) for name in defaults._fields
                    if name.endswith('_size') and getattr(config.data, name, None) is not None
                }
                env_config = defaults._replace(**sizes)
                env, splits = env_class.generate(env_config, config.seed)
                save_dataset(directory, env, splits, config.seed, env_config)

        files = dataset_files(directory)
        context.manifest.verify(files)
        for path in files:
            context.manifest.record('dataset', path)
        dataset = load_dataset(directory)
        if dataset.env.env_id != config.env:
            raise ConfigurationError(
                f'Dataset `{directory}` belongs to `{dataset.env.env_id}`, the run to `{config.env}`.', key_path='env',
            )
        context.dataset = dataset
        context.featurizer = Featurizer(dataset.env, config.policy.feature_dim)
        return dataset


class SFTStage(BaseStage):
    """ Trains the SFT agent on the expert trajectories, or loads the configured one, then evaluates it. """

    name = 'sft'

    def run(self) -> PolicyParams:
        context = self.context
        config = context.config
        path = context.path('checkpoints', 'sft.ckpt')
        if os.path.exists(path):
            context.manifest.verify([path])
            params = load_policy(path)
        elif not config.sft.enabled:
            params = load_policy(config.sft.checkpoint)
            save_policy(path, params, context.config_hash)
        else:
            sft_config = SFTConfig(
                config.sft.learning_rate, config.sft.epochs, config.sft.batch_size, config.sft.tolerance,
            )
            initial = PolicyParams.zeros(context.env, config.policy.feature_dim)
            result = train_sft(
                context.env, context.featurizer, initial, context.dataset.experts, sft_config,
                seed=stage_seed(config.seed, 'sft'),
            )
            params = result.params
            write_csv(context.path('metrics', 'sft.csv'), SFT_HEADER, result.history)
            save_policy(path, params, context.config_hash)
        if params.env_id != config.env or params.dim != config.policy.feature_dim:
            raise ConfigurationError(
                f'SFT checkpoint of `{params.env_id}` with dimension {params.dim} does not fit the run.',
                key_path='sft.checkpoint',
            )
        context.sft_hash = context.manifest.record('checkpoint', path)
        context.sft_params = params.snapshot()

        if config.evaluation.step_rewards and not os.path.exists(context.path('scored_steps.jsonl')):
            self.dump_scored_steps()
        baseline_path = context.path('baseline.json')
        if not os.path.exists(baseline_path):
            rewards = context.evaluate_agent(context.sft_params, 'sft')
            write_record(baseline_path, BaselineSchema().dump(dict(rewards, checkpoint_hash=context.sft_hash)))
        context.manifest.record('baseline', baseline_path)
        return context.sft_params

    def dump_scored_steps(self) -> None:
        """ Scores the SFT agent's test trajectories step by step, the training data of a reward model. """
        context = self.context
        trajectories = run_tasks(context.env, context.policy(context.sft_params), context.dataset.splits['test'])
        steps = scored_steps_from_trajectories(context.env, context.featurizer, context.eval_scorer(), trajectories)
        path = context.path('scored_steps.jsonl')
        write_scored_steps(path, steps)
        context.manifest.record('scored_steps', path)


class ScorerStage(BaseStage):
    """ Builds the frozen step scorer every iteration uses. """

    name = 'scorer'

    def run(self) -> BaseStepScorer:
        context = self.context
        scoring = context.config.scoring
        sft_policy = context.policy(context.sft_params)
        if scoring.mode == 'mc':
            scorer = MonteCarloScorer(
                context.env, sft_policy, scoring.n_samples, context.config.seed, scoring.temperature,
            )  # type: BaseStepScorer
            context.scorer_hash = context.sft_hash
        elif scoring.mode == 'exact':
            scorer = ExactScorer(context.env, sft_policy, scoring.temperature, scoring.node_budget)
            context.scorer_hash = context.sft_hash
        else:
            model = load_reward_model(scoring.reward_model)
            scorer = RewardModelScorer(context.env, model, context.featurizer)
            context.scorer_hash = sha256_file(scoring.reward_model)
        context.scorer = scorer
        return scorer


class IterationStage(BaseStage):
    """ One explore, score, build pairs, optimize and evaluate cycle. """

    def __init__(self, context: RunContext, iteration: int, params: PolicyParams) -> None:
        super().__init__(context)
        self.iteration = iteration
        self.params = params
        self.name = f'iteration-{iteration}'

    def run(self) -> IterationReport:
        context = self.context
        config = context.config
        env, featurizer = context.env, context.featurizer
        iteration = self.iteration
        seed = stage_seed(config.seed, 'iteration', iteration)

        agent = context.policy(self.params)  # type: BasePolicy
        pairs = build_pairs(env, agent, context.scorer, context.dataset.experts, config.pairs.tau)
        pair_paths = write_pairs(context.path('pairs', f'iter-{iteration}'), pairs)
        for path in pair_paths.values():
            context.manifest.record('pairs', path)

        optimize = config.optimize
        mixture_config = MixtureConfig(
            optimize.beta, optimize.learning_rate, optimize.epochs, optimize.batch_size, optimize.use_odpo,
            optimize.use_sdpo, optimize.use_sft,
        )
        try:
            result = optimize_iteration(
                env, featurizer, self.params, self.params.snapshot(), pairs.step_pairs, pairs.traj_pairs,
                mixture_config, seed=seed,
            )
        except TrainingAborted as exc:
            aborted = context.path('checkpoints', f'aborted-iter-{iteration}.ckpt')
            save_policy(aborted, exc.last_good, context.config_hash)
            raise
        write_csv(context.path('metrics', f'iter-{iteration}.csv'), LOSS_HEADER, result.history)

        checkpoint = context.path('checkpoints', f'iter-{iteration}.ckpt')
        save_policy(checkpoint, result.params, context.config_hash)
        checkpoint_hash = context.manifest.record('checkpoint', checkpoint)

        rewards = context.evaluate_agent(result.params, f'iter-{iteration}')
        previous = [report for report in context.reports if report.iteration < iteration]
        if not previous or rewards['test_reward'] > previous[-1].best_test_reward:
            best_test_reward, best_iteration = rewards['test_reward'], iteration
        else:
            best_test_reward, best_iteration = previous[-1].best_test_reward, previous[-1].best_iteration

        report = IterationReport(
            iteration=iteration,
            n_step_pairs=len(pairs.step_pairs),
            n_traj_pairs=len(pairs.traj_pairs),
            train_reward=rewards['train_reward'],
            test_reward=rewards['test_reward'],
            unseen_reward=rewards['unseen_reward'],
            avg_reward_per_step=rewards['avg_reward_per_step'],
            losses=result.history,
            checkpoint=os.path.relpath(checkpoint, context.run_dir),
            checkpoint_hash=checkpoint_hash,
            scorer_hash=context.scorer_hash,
            params_version=result.params.version,
            best_test_reward=best_test_reward,
            best_iteration=best_iteration,
        )
        append_jsonl(context.path('reports.jsonl'), IterationReportSchema().dump(report))
        return report


def load_reports(path: str) -> List[IterationReport]:
    if not os.path.exists(path):
        return []
    schema = IterationReportSchema()
    reports = []
    for record in read_jsonl(path):
        data = schema.load_record(record)
        data['losses'] = [EpochLosses(**row) for row in data['losses']]
        reports.append(IterationReport(**data))
    return reports


def check_run_dir(config: RunConfig) -> None:
    """
    An existing run directory must hold the same configuration, up to the
    iteration cap, which a resumed run may raise.
    """
    path = os.path.join(config.output_dir, 'config.yaml')
    if not os.path.exists(path):
        return
    existing = parse_config(path)
    if existing._replace(iterations=config.iterations) != config:
        raise ConfigurationError(
            f'`{config.output_dir}` holds a run with another configuration.', key_path='output_dir',
        )


def run_ipr(config: RunConfig) -> List[IterationReport]:
    """
    Runs, or resumes, every stage of a run and returns one report per iteration.

    :raises: :exc:`steprefine.exceptions.IntegrityError` when a recorded artifact changed.
    :raises: :exc:`steprefine.exceptions.RunLockedError` when another process owns the run directory.
    """
    os.makedirs(config.output_dir, exist_ok=True)
    with RunLock(config.output_dir):
        context = RunContext(config)
        check_run_dir(config)
        context.manifest.verify()
        atomic_write(context.path('config.yaml'), render_config(config))
        context.manifest.record('config', context.path('config.yaml'))
        logger.info('Run %s with configuration %s.', config.output_dir, config_to_dict(config))

        DataStage.run_stage(context)
        SFTStage.run_stage(context)
        ScorerStage.run_stage(context)

        context.reports = [
            report for report in load_reports(context.path('reports.jsonl')) if report.iteration <= config.iterations
        ]
        params = context.sft_params
        if context.reports:
            last = context.reports[-1]
            checkpoint = context.path(last.checkpoint)
            context.manifest.verify([checkpoint])
            params = load_policy(checkpoint)
            logger.info('Resuming after iteration %s.', last.iteration)

        for iteration in range(len(context.reports) + 1, config.iterations + 1):
            report = IterationStage.run_stage(context, iteration, params)
            context.reports.append(report)
            params = load_policy(context.path(report.checkpoint))
        if os.path.exists(context.path('failure.json')):
            os.remove(context.path('failure.json'))
        return context.reports


def summarize(reports: List[IterationReport]) -> dict:
    """ Short summary printed by the ``run`` command. """
    if not reports:
        return {}
    last = reports[-1]
    return {
        'iterations': len(reports),
        'best_test_reward': last.best_test_reward,
        'best_iteration': last.best_iteration,
        'final_test_reward': last.test_reward,
        'mean_step_pairs': float(np.mean([report.n_step_pairs for report in reports])),
    }
