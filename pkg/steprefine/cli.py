"""
Command line entry point, ``steprefine <command>``.

Every command prints a JSON summary on stdout. Errors of the package are
reported on stderr as a failure record and exit with status 2.
"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from steprefine import __version__
from steprefine.config import parse_config
from steprefine.constants import DEFAULT_ACCURACY_TAU, DEFAULT_BETA, DEFAULT_FEATURE_DIM, DEFAULT_N_SAMPLES
from steprefine.core import BaseEnvironment
from steprefine.driver import EVAL_HEADER, LOSS_HEADER, SFT_HEADER, run_ipr, summarize
from steprefine.evaluation import (
    accuracy_sweep, evaluate, exact_ground_truth, mean_accuracy_by_samples, report_tables, run_tasks,
    state_ground_truth, write_csv,
)
from steprefine.exceptions import ConfigurationError, StepRefineException
from steprefine.meta import get_environment_class
from steprefine.mixture import MixtureConfig, optimize_iteration
from steprefine.pairs import build_pairs
from steprefine.policy import Featurizer, LinearPolicy, PolicyParams, describe_params
from steprefine.reward_model import (
    RewardModelConfig, RewardModelScorer, scored_steps_from_trajectories, train_reward_model,
)
from steprefine.scorer import BaseStepScorer, ExactScorer, MonteCarloScorer, RandomScorer, score_trajectory_steps
from steprefine.sft import SFTConfig, train_sft
from steprefine.storage import (
    check_env, load_dataset, load_policy, load_reward_model, read_pairs, read_scored_steps, save_dataset,
    save_policy, save_reward_model, write_pairs, write_scored_steps,
)
from steprefine.utils import serialize_error

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
ACCURACY_ROW_HEADER = ('n_samples', 'seed', 'accuracy', 'n_pairs', 'n_ties')
STEP_REWARD_ROW_HEADER = ('task_id', 'n_steps', 'outcome_reward', 'mean_step_reward')


def emit(summary: dict) -> None:
    print(json.dumps(summary, indent=2, sort_keys=True))


def load_agent(path: str, env: BaseEnvironment, what: str) -> PolicyParams:
    params = load_policy(path)
    check_env(env, params.env_id, what)
    return params


def make_scorer(
    mode: str, env: BaseEnvironment, featurizer: Featurizer, scorer_params: Optional[PolicyParams], n_samples: int,
    seed: int, reward_model: Optional[str] = None,
) -> BaseStepScorer:
    if mode == 'mc':
        return MonteCarloScorer(env, LinearPolicy(scorer_params, featurizer), n_samples, seed)
    if mode == 'exact':
        return ExactScorer(env, LinearPolicy(scorer_params, featurizer))
    if mode == 'random':
        return RandomScorer(env, seed)
    if reward_model is None:
        raise ConfigurationError('`--rm` is required with `--scorer-mode rm`.', key_path='rm')
    return RewardModelScorer(env, load_reward_model(reward_model), featurizer)


def featurizer_for(env: BaseEnvironment, params: PolicyParams) -> Featurizer:
    return Featurizer(env, params.dim)


def gen_data(args: argparse.Namespace) -> dict:
    env_class = get_environment_class(args.env)
    sizes = {
        name: value for name, value in (
            ('train_size', args.train_size), ('test_size', args.test_size), ('unseen_size', args.unseen_size),
        ) if value is not None
    }
    defaults = env_class.config_class()
    unknown = sorted(set(sizes) - set(defaults._fields))
    if unknown:
        raise ConfigurationError(f'`{args.env}` has no `{unknown[0]}`.', key_path=unknown[0])
    config = defaults._replace(**sizes)
    env, splits = env_class.generate(config, args.seed)
    save_dataset(args.out, env, splits, args.seed, config)
    return {'env': args.env, 'out': args.out, 'splits': {name: len(tasks) for name, tasks in sorted(splits.items())}}


def sft(args: argparse.Namespace) -> dict:
    dataset = load_dataset(args.data)
    featurizer = Featurizer(dataset.env, args.feature_dim)
    config = SFTConfig(args.learning_rate, args.epochs, args.batch_size, args.tolerance)
    result = train_sft(
        dataset.env, featurizer, PolicyParams.zeros(dataset.env, args.feature_dim), dataset.experts, config,
        seed=args.seed,
    )
    digest = save_policy(args.out, result.params)
    if args.metrics:
        write_csv(args.metrics, SFT_HEADER, result.history)
    last = result.history[-1]
    return {
        'checkpoint': args.out, 'sha256': digest, 'epochs': last.epoch, 'loss': last.loss,
        'train_action_agreement': last.train_action_agreement,
    }


def build_pairs_command(args: argparse.Namespace) -> dict:
    dataset = load_dataset(args.data)
    env = dataset.env
    agent = load_agent(args.agent, env, 'agent checkpoint')
    featurizer = featurizer_for(env, agent)
    scorer_params = load_agent(args.scorer, env, 'scorer checkpoint') if args.scorer else None
    if scorer_params is None and args.scorer_mode in ('mc', 'exact'):
        raise ConfigurationError(f'`--scorer` is required with `--scorer-mode {args.scorer_mode}`.', key_path='scorer')
    scorer = make_scorer(args.scorer_mode, env, featurizer, scorer_params, args.n_samples, args.seed, args.rm)
    tau = args.tau if args.tau is not None else env.default_tau
    pairs = build_pairs(env, LinearPolicy(agent, featurizer), scorer, dataset.experts, tau)
    paths = write_pairs(args.out, pairs)
    return {'tau': tau, 'n_step_pairs': len(pairs.step_pairs), 'n_traj_pairs': len(pairs.traj_pairs), 'files': paths}


def optimize(args: argparse.Namespace) -> dict:
    dataset = load_dataset(args.data)
    env = dataset.env
    agent = load_agent(args.agent, env, 'agent checkpoint')
    ref = load_agent(args.ref, env, 'reference checkpoint')
    pairs = read_pairs(args.pairs, env)
    config = MixtureConfig(
        args.beta, args.learning_rate, args.epochs, args.batch_size, not args.no_odpo, not args.no_sdpo,
        not args.no_sft,
    )
    result = optimize_iteration(
        env, featurizer_for(env, agent), agent, ref.snapshot(), pairs.step_pairs, pairs.traj_pairs, config,
        seed=args.seed,
    )
    digest = save_policy(args.out, result.params)
    if args.metrics:
        write_csv(args.metrics, LOSS_HEADER, result.history)
    summary = {'checkpoint': args.out, 'sha256': digest, 'params_version': result.params.version}
    if result.history:
        summary['losses'] = result.history[-1]._asdict()
    return summary


def run(args: argparse.Namespace) -> dict:
    config = parse_config(args.config)
    return dict(summarize(run_ipr(config)), output_dir=config.output_dir)


def eval_command(args: argparse.Namespace) -> dict:
    dataset = load_dataset(args.data)
    env = dataset.env
    if args.split not in dataset.splits:
        raise ConfigurationError(f'Dataset has no `{args.split}` split.', key_path='split')
    agent = load_agent(args.agent, env, 'agent checkpoint')
    result = evaluate(env, LinearPolicy(agent, featurizer_for(env, agent)), dataset.splits[args.split])
    write_csv(args.out, EVAL_HEADER, ((args.split,) + tuple(task) for task in result.results))
    return {'split': args.split, 'n_tasks': len(result.results), 'average_reward': result.average_reward}


def default_ground_truth(env: BaseEnvironment) -> str:
    """ The heuristic state score where the environment has one, exact enumeration otherwise. """
    has_heuristic = type(env).ground_truth_score is not BaseEnvironment.ground_truth_score
    return 'state' if has_heuristic else 'exact'


def step_accuracy(args: argparse.Namespace) -> dict:
    dataset = load_dataset(args.data)
    env = dataset.env
    agent = load_agent(args.agent, env, 'agent checkpoint')
    scorer_params = load_agent(args.scorer, env, 'scorer checkpoint')
    featurizer = featurizer_for(env, agent)
    scorer_policy = LinearPolicy(scorer_params, featurizer)
    ground_truth_mode = args.ground_truth or default_ground_truth(env)
    if ground_truth_mode == 'state':
        ground_truth = state_ground_truth(env)
    else:
        ground_truth = exact_ground_truth(env, scorer_policy)

    def scorer_factory(n_samples: int, seed: int) -> BaseStepScorer:
        if args.scorer_mode == 'random':
            return RandomScorer(env, seed)
        return MonteCarloScorer(env, scorer_policy, n_samples, seed)

    rows = accuracy_sweep(
        env, LinearPolicy(agent, featurizer), scorer_factory, dataset.experts, args.tau, ground_truth,
        sample_counts=args.n_samples, seeds=args.seeds,
    )
    write_csv(args.out, ACCURACY_ROW_HEADER, rows)
    return {
        'ground_truth': ground_truth_mode,
        'mean_accuracy': {str(n): accuracy for n, accuracy in mean_accuracy_by_samples(rows).items()},
    }


def step_reward(args: argparse.Namespace) -> dict:
    dataset = load_dataset(args.data)
    env = dataset.env
    agent = load_agent(args.agent, env, 'agent checkpoint')
    scorer_params = load_agent(args.scorer, env, 'scorer checkpoint')
    featurizer = featurizer_for(env, agent)
    if args.split not in dataset.splits:
        raise ConfigurationError(f'Dataset has no `{args.split}` split.', key_path='split')
    scorer = MonteCarloScorer(env, LinearPolicy(scorer_params, featurizer), args.n_samples, args.seed)
    trajectories = run_tasks(env, LinearPolicy(agent, featurizer), dataset.splits[args.split])
    rows = []
    for trajectory in trajectories:
        values = [estimate.value for estimate in score_trajectory_steps(scorer, trajectory)]
        rows.append((
            trajectory.instruction.task_id, trajectory.length, trajectory.outcome_reward,
            sum(values) / len(values) if values else 0.0,
        ))
    write_csv(args.out, STEP_REWARD_ROW_HEADER, rows)
    if args.dump:
        write_scored_steps(args.dump, scored_steps_from_trajectories(env, featurizer, scorer, trajectories))
    average = sum(row[3] for row in rows) / len(rows) if rows else 0.0
    return {'split': args.split, 'n_tasks': len(rows), 'avg_reward_per_step': average}


def train_rm(args: argparse.Namespace) -> dict:
    steps = read_scored_steps(args.steps)
    get_environment_class(args.env)
    config = RewardModelConfig(args.learning_rate, args.epochs)
    result = train_reward_model(steps, args.feature_dim, args.env, config, seed=args.seed)
    digest = save_reward_model(args.out, result.model)
    return {
        'checkpoint': args.out, 'sha256': digest, 'n_steps': len(steps), 'train_mse': result.train_mse,
        'held_out_mse': result.held_out_mse,
    }


def report(args: argparse.Namespace) -> dict:
    return report_tables(args.run_dir, args.out)


def policy_inspect(args: argparse.Namespace) -> dict:
    return describe_params(load_policy(args.checkpoint))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='steprefine', description='Step-level process refinement of agents.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--log-level', default='INFO', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    command = commands.add_parser('gen-data', help='Generate a dataset directory.')
    command.add_argument('--env', required=True, choices=('shopsim', 'gridhouse', 'toytree'))
    command.add_argument('--seed', type=int, required=True)
    command.add_argument('--out', required=True)
    command.add_argument('--train-size', type=int)
    command.add_argument('--test-size', type=int)
    command.add_argument('--unseen-size', type=int)
    command.set_defaults(handler=gen_data)

    command = commands.add_parser('sft', help='Train the SFT agent on the expert trajectories.')
    command.add_argument('--data', required=True)
    command.add_argument('--out', required=True)
    command.add_argument('--seed', type=int, required=True)
    command.add_argument('--epochs', type=int, default=40)
    command.add_argument('--learning-rate', type=float, default=0.1)
    command.add_argument('--batch-size', type=int, default=32)
    command.add_argument('--tolerance', type=float, default=1e-4)
    command.add_argument('--feature-dim', type=int, default=DEFAULT_FEATURE_DIM)
    command.add_argument('--metrics', help='Optional CSV of the per-epoch loss.')
    command.set_defaults(handler=sft)

    command = commands.add_parser('build-pairs', help='Build contrastive step and trajectory pairs.')
    command.add_argument('--data', required=True)
    command.add_argument('--agent', required=True)
    command.add_argument('--scorer')
    command.add_argument('--tau', type=float)
    command.add_argument('--n-samples', type=int, default=DEFAULT_N_SAMPLES)
    command.add_argument('--seed', type=int, required=True)
    command.add_argument('--out', required=True)
    command.add_argument('--scorer-mode', default='mc', choices=('mc', 'exact', 'rm'))
    command.add_argument('--rm', help='Reward model checkpoint, with --scorer-mode rm.')
    command.set_defaults(handler=build_pairs_command)

    command = commands.add_parser('optimize', help='Run one mixture optimization.')
    command.add_argument('--data', required=True)
    command.add_argument('--agent', required=True)
    command.add_argument('--ref', required=True)
    command.add_argument('--pairs', required=True)
    command.add_argument('--beta', type=float, default=DEFAULT_BETA)
    command.add_argument('--out', required=True)
    command.add_argument('--seed', type=int, required=True)
    command.add_argument('--learning-rate', type=float, default=0.05)
    command.add_argument('--epochs', type=int, default=20)
    command.add_argument('--batch-size', type=int, default=32)
    command.add_argument('--no-odpo', action='store_true')
    command.add_argument('--no-sdpo', action='store_true')
    command.add_argument('--no-sft', action='store_true')
    command.add_argument('--metrics', help='Optional CSV of the per-epoch loss decomposition.')
    command.set_defaults(handler=optimize)

    command = commands.add_parser('run', help='Run or resume the iteration loop of a configuration file.')
    command.add_argument('--config', required=True)
    command.set_defaults(handler=run)

    command = commands.add_parser('eval', help='Evaluate an agent on a split.')
    command.add_argument('--data', required=True)
    command.add_argument('--agent', required=True)
    command.add_argument('--out', required=True)
    command.add_argument('--split', default='test', choices=('train', 'test', 'unseen'))
    command.set_defaults(handler=eval_command)

    command = commands.add_parser('analyze', help='Step reward analyses.')
    analyses = command.add_subparsers(dest='analysis', metavar='analysis')
    analyses.required = True

    analysis = analyses.add_parser('step-accuracy', help='Agreement of step rewards with a ground truth.')
    analysis.add_argument('--data', required=True)
    analysis.add_argument('--agent', required=True)
    analysis.add_argument('--scorer', required=True)
    analysis.add_argument('--out', required=True)
    analysis.add_argument('--tau', type=float, default=DEFAULT_ACCURACY_TAU)
    analysis.add_argument('--n-samples', type=int, nargs='+', default=[1, 3, 5, 10])
    analysis.add_argument('--seeds', type=int, nargs='+', default=[0])
    analysis.add_argument('--scorer-mode', default='mc', choices=('mc', 'random'))
    analysis.add_argument('--ground-truth', choices=('state', 'exact'))
    analysis.set_defaults(handler=step_accuracy)

    analysis = analyses.add_parser('step-reward', help='Average reward per step of an agent.')
    analysis.add_argument('--data', required=True)
    analysis.add_argument('--agent', required=True)
    analysis.add_argument('--scorer', required=True)
    analysis.add_argument('--out', required=True)
    analysis.add_argument('--split', default='test', choices=('train', 'test', 'unseen'))
    analysis.add_argument('--n-samples', type=int, default=DEFAULT_N_SAMPLES)
    analysis.add_argument('--seed', type=int, default=0)
    analysis.add_argument('--dump', help='Optional scored step dump, the input of train-rm.')
    analysis.set_defaults(handler=step_reward)

    command = commands.add_parser('train-rm', help='Train a step reward model on a scored step dump.')
    command.add_argument('--steps', required=True)
    command.add_argument('--env', required=True, choices=('shopsim', 'gridhouse', 'toytree'))
    command.add_argument('--out', required=True)
    command.add_argument('--epochs', type=int, default=300)
    command.add_argument('--learning-rate', type=float, default=0.25)
    command.add_argument('--feature-dim', type=int, default=DEFAULT_FEATURE_DIM)
    command.add_argument('--seed', type=int, default=0)
    command.set_defaults(handler=train_rm)

    command = commands.add_parser('report', help='Summary tables of a run or of a directory of runs.')
    command.add_argument('run_dir')
    command.add_argument('--out')
    command.set_defaults(handler=report)

    command = commands.add_parser('policy', help='Policy checkpoint tools.')
    tools = command.add_subparsers(dest='tool', metavar='tool')
    tools.required = True
    tool = tools.add_parser('inspect', help='Summarize a policy checkpoint.')
    tool.add_argument('checkpoint')
    tool.set_defaults(handler=policy_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        summary = args.handler(args)
    except StepRefineException as exc:
        record = serialize_error(exc, stage=args.command)
        if isinstance(exc, ConfigurationError) and exc.key_path:
            record['key_path'] = exc.key_path
        print(json.dumps(record, indent=2, sort_keys=True), file=sys.stderr)
        return 2
    emit(summary)
    return 0


if __name__ == '__main__':
    sys.exit(main())
