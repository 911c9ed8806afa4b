"""
Contrastive data built by letting the agent explore along expert trajectories.

The agent replays the first ``t - 1`` expert steps and acts greedily from step
``t`` on. Where its action differs from the expert's, both actions get a step
reward from the scorer: if the expert's is higher by more than ``tau`` and the
agent's continuation ends worse than the expert trajectory, the expert suffix
and the agent suffix form a step pair. The agent's own full rollout forms a
trajectory pair with the expert trajectory when its outcome is lower.
"""
import logging
from typing import List, NamedTuple, Sequence

from steprefine.core import (
    BaseEnvironment, BasePolicy, HistoryPrefix, Instruction, Trajectory, TrajectorySuffix, rollout,
)
from steprefine.exceptions import ContractViolation
from steprefine.scorer import BaseStepScorer, StepRewardEstimate

logger = logging.getLogger(__name__)


class ContrastiveStepPair(NamedTuple):
    #: The shared first ``t - 1`` expert steps.
    prefix: HistoryPrefix
    win_suffix: TrajectorySuffix
    lose_suffix: TrajectorySuffix
    win_step_reward: StepRewardEstimate
    lose_step_reward: StepRewardEstimate

    @property
    def step_index(self) -> int:
        return self.prefix.length + 1

    @property
    def margin(self) -> float:
        return self.win_step_reward.value - self.lose_step_reward.value


class ContrastiveTrajPair(NamedTuple):
    instruction: Instruction
    win_traj: Trajectory
    lose_traj: Trajectory


class PairSet(NamedTuple):
    step_pairs: List[ContrastiveStepPair]
    traj_pairs: List[ContrastiveTrajPair]


def explore_from_expert(env: BaseEnvironment, agent: BasePolicy, expert: Trajectory, t: int) -> TrajectorySuffix:
    """ Greedy agent continuation of the first ``t - 1`` expert steps, from step ``t`` on. """
    if not 1 <= t <= expert.length:
        raise ContractViolation(f'Step index {t} is outside of the expert trajectory of length {expert.length}.')
    exploration = rollout(env, agent, expert.prefix(t - 1), temperature=0.0, rng=None)
    return exploration.suffix(t - 1)


def _greedy_action(env: BaseEnvironment, agent: BasePolicy, prefix: HistoryPrefix):
    state = env.replay(prefix)
    legal = env.legal_actions(state)
    if not legal:
        raise ContractViolation(f'No legal action in a non-terminal state of `{prefix.instruction.task_id}`.')
    return legal[agent.select(env, state, prefix, legal, 0.0, None)]


def build_task_pairs(
    env: BaseEnvironment, agent: BasePolicy, scorer: BaseStepScorer, expert: Trajectory, tau: float,
) -> PairSet:
    """ Step pairs at every qualifying step of one expert trajectory, and its trajectory pair if any. """
    task_id = expert.instruction.task_id
    exploration = rollout(env, agent, HistoryPrefix(expert.instruction), temperature=0.0, rng=None)
    traj_pairs = []
    if exploration.outcome_reward < expert.outcome_reward:
        traj_pairs.append(ContrastiveTrajPair(expert.instruction, expert, exploration))

    step_pairs = []
    for t in range(1, expert.length + 1):
        prefix = expert.prefix(t - 1)
        expert_step = expert.steps[t - 1]
        if t == 1:
            suffix = exploration.suffix(0)
        elif _greedy_action(env, agent, prefix) == expert_step.action:
            continue
        else:
            suffix = explore_from_expert(env, agent, expert, t)

        agent_step = suffix.steps[0]
        if agent_step.action == expert_step.action:
            continue
        if not suffix.outcome_reward < expert.outcome_reward:
            logger.debug('Step %s of %s diverges without a worse outcome.', t, task_id)
            continue

        win = scorer.score(expert.prefix(t))
        lose = scorer.score(prefix.extend(agent_step))
        if win.value - lose.value > tau:
            logger.debug(
                'Step pair at step %s of %s: `%s` %.4f over `%s` %.4f.', t, task_id, expert_step.action.text,
                win.value, agent_step.action.text, lose.value,
            )
            step_pairs.append(ContrastiveStepPair(prefix, expert.suffix(t - 1), suffix, win, lose))
    return PairSet(step_pairs, traj_pairs)


def build_pairs(
    env: BaseEnvironment, agent: BasePolicy, scorer: BaseStepScorer, experts: Sequence[Trajectory], tau: float,
) -> PairSet:
    """
    Builds the step pair set and the trajectory pair set of an iteration.
    Tasks are visited in task id order, so the output only depends on the inputs.

    :param agent: The current agent, acting greedily.
    :param scorer: Scores the expert and the agent action at divergent steps.
    :param tau: A step pair needs the expert step reward to exceed the agent's by more than this.
    """
    if tau < 0:
        raise ContractViolation('The pair filtering threshold must be non-negative.')
    step_pairs = []  # type: List[ContrastiveStepPair]
    traj_pairs = []  # type: List[ContrastiveTrajPair]
    for expert in sorted(experts, key=lambda trajectory: trajectory.instruction.task_id):
        task_pairs = build_task_pairs(env, agent, scorer, expert, tau)
        step_pairs.extend(task_pairs.step_pairs)
        traj_pairs.extend(task_pairs.traj_pairs)
    logger.info(
        'Built %s step pairs and %s trajectory pairs from %s expert trajectories.', len(step_pairs),
        len(traj_pairs), len(experts),
    )
    if not step_pairs and not traj_pairs:
        logger.warning('No contrastive pairs: the agent matches the experts wherever it was scored.')
    return PairSet(step_pairs, traj_pairs)
