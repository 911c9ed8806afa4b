"""
Step rewards: the expected outcome reward of continuing a history with a frozen
scorer policy.

Every scorer answers one question through :meth:`BaseStepScorer.score`: given a
prefix that ends with the step ``(a_t, o_t)``, what outcome reward does the scorer
policy reach from there on average. A prefix whose last action ended the episode
is scored with the exact outcome reward.
"""
import enum
import logging
import math
import threading
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from steprefine.constants import DEFAULT_NODE_BUDGET
from steprefine.core import (
    BaseEnvironment, BasePolicy, HistoryPrefix, Step, Trajectory, prefix_key, rollout, sample_index,
)
from steprefine.exceptions import BudgetExceededError, ContractViolation
from steprefine.utils import derive_rng

logger = logging.getLogger(__name__)


class EstimateMethod(str, enum.Enum):
    MC = 'mc'
    EXACT = 'exact'
    TERMINAL = 'terminal'
    REWARD_MODEL = 'reward_model'
    #: Seeded uniform labels, the null model of the accuracy analysis.
    RANDOM = 'random'


class StepRewardEstimate(NamedTuple):
    value: float
    n_samples: int
    std_error: float
    method: EstimateMethod


def _unit(value: float) -> float:
    return float(min(max(value, 0.0), 1.0))


class BaseStepScorer:
    """
    Base class of step scorers.

    Implementation will require overriding :meth:`estimate`, which is only called
    for prefixes that leave the episode running, unless :attr:`exact_terminal` is unset.
    """

    method: EstimateMethod

    #: Score prefixes ending in a terminal state with the exact outcome reward.
    exact_terminal = True

    def __init__(self, env: BaseEnvironment) -> None:
        self.env = env

    def score(self, prefix: HistoryPrefix) -> StepRewardEstimate:
        """
        Step reward of the last step of ``prefix``.

        :raises: :exc:`ContractViolation` for an empty prefix, there is no step to score.
        :raises: :exc:`steprefine.exceptions.DataCorruptionError` if the prefix does not replay.
        """
        if prefix.length == 0:
            raise ContractViolation('A scored prefix must contain the scored step.')
        state = self.env.replay(prefix)
        if state.done and self.exact_terminal:
            return StepRewardEstimate(self.env.score_outcome(state), 1, 0.0, EstimateMethod.TERMINAL)
        return self.estimate(prefix, state)

    def estimate(self, prefix: HistoryPrefix, state) -> StepRewardEstimate:
        raise NotImplementedError()


class MonteCarloScorer(BaseStepScorer):
    """
    Averages the outcome rewards of ``n_samples`` scorer rollouts continuing the prefix.

    Rollout ``i`` of the step at index ``t`` of a task draws from the stream
    ``(root_seed, task_id, t, i)``, so an estimate never depends on which other
    estimates were computed before it. Estimates are cached per
    ``(prefix, n_samples, root_seed)``.
    """

    method = EstimateMethod.MC

    def __init__(
        self, env: BaseEnvironment, policy: BasePolicy, n_samples: int, root_seed: int, temperature: float = 1.0,
    ) -> None:
        super().__init__(env)
        if n_samples < 1:
            raise ContractViolation('Monte Carlo scoring needs at least one sample.')
        self.policy = policy
        self.n_samples = n_samples
        self.root_seed = root_seed
        self.temperature = temperature
        self._cache = {}  # type: Dict[Tuple[str, int, int], StepRewardEstimate]
        self._lock = threading.Lock()

    def estimate(self, prefix: HistoryPrefix, state) -> StepRewardEstimate:
        key = (prefix_key(prefix), self.n_samples, self.root_seed)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            logger.debug('Step reward cache hit for %s at step %s.', prefix.instruction.task_id, prefix.length)
            return cached

        task_id = prefix.instruction.task_id
        rewards = np.array([
            rollout(
                self.env, self.policy, prefix, self.temperature,
                derive_rng(self.root_seed, task_id, prefix.length, sample),
            ).outcome_reward
            for sample in range(self.n_samples)
        ])
        if self.n_samples > 1:
            std_error = float(np.std(rewards, ddof=1) / math.sqrt(self.n_samples))
        else:
            std_error = 0.0
        estimate = StepRewardEstimate(_unit(rewards.mean()), self.n_samples, std_error, EstimateMethod.MC)
        with self._lock:
            return self._cache.setdefault(key, estimate)


class ExactScorer(BaseStepScorer):
    """
    Enumerates every continuation of the prefix, weighted by the scorer policy's
    probabilities. Only tractable on small environments: expanding more than
    ``node_budget`` decision nodes raises :exc:`BudgetExceededError`.
    """

    method = EstimateMethod.EXACT

    def __init__(
        self, env: BaseEnvironment, policy: BasePolicy, temperature: float = 1.0,
        node_budget: int = DEFAULT_NODE_BUDGET,
    ) -> None:
        super().__init__(env)
        self.policy = policy
        self.temperature = temperature
        self.node_budget = node_budget

    def estimate(self, prefix: HistoryPrefix, state) -> StepRewardEstimate:
        counts = {'nodes': 0, 'leaves': 0}
        value = self._expected_outcome(state, prefix, counts)
        return StepRewardEstimate(_unit(value), counts['leaves'], 0.0, EstimateMethod.EXACT)

    def _probabilities(self, state, prefix: HistoryPrefix, legal: list) -> np.ndarray:
        if self.temperature == 0:
            probabilities = np.zeros(len(legal))
            logits = self.policy.action_logits(self.env, state, prefix, legal)
            probabilities[sample_index(logits, 0.0, None)] = 1.0
            return probabilities
        return self.policy.action_probabilities(self.env, state, prefix, legal, self.temperature)

    def _expected_outcome(self, state, prefix: HistoryPrefix, counts: dict) -> float:
        if state.done:
            counts['leaves'] += 1
            return self.env.score_outcome(state)
        counts['nodes'] += 1
        if counts['nodes'] > self.node_budget:
            raise BudgetExceededError(
                f'Enumerating continuations of `{prefix.instruction.task_id}` needs more than '
                f'{self.node_budget} nodes.'
            )
        legal = self.env.legal_actions(state)
        if not legal:
            raise ContractViolation(f'No legal action in a non-terminal state of `{prefix.instruction.task_id}`.')
        value = 0.0
        for action, probability in zip(legal, self._probabilities(state, prefix, legal)):
            if probability == 0:
                continue
            result = self.env.step(state, action)
            value += probability * self._expected_outcome(
                result.state, prefix.extend(Step(action, result.observation)), counts,
            )
        return value


class RandomScorer(BaseStepScorer):
    """ Uniform labels drawn from the prefix content, including for terminal steps. """

    method = EstimateMethod.RANDOM
    exact_terminal = False

    def __init__(self, env: BaseEnvironment, root_seed: int) -> None:
        super().__init__(env)
        self.root_seed = root_seed

    def estimate(self, prefix: HistoryPrefix, state) -> StepRewardEstimate:
        value = derive_rng(self.root_seed, 'random-scorer', prefix_key(prefix)).random()
        return StepRewardEstimate(float(value), 1, 0.0, EstimateMethod.RANDOM)


def mc_step_reward(
    env: BaseEnvironment, scorer_policy: BasePolicy, prefix: HistoryPrefix, n_samples: int, root_seed: int,
    temperature: float = 1.0,
) -> StepRewardEstimate:
    return MonteCarloScorer(env, scorer_policy, n_samples, root_seed, temperature).score(prefix)


def exact_step_reward(
    env: BaseEnvironment, scorer_policy: BasePolicy, prefix: HistoryPrefix, node_budget: int = DEFAULT_NODE_BUDGET,
) -> StepRewardEstimate:
    return ExactScorer(env, scorer_policy, node_budget=node_budget).score(prefix)


def score_trajectory_steps(scorer: BaseStepScorer, trajectory: Trajectory) -> List[StepRewardEstimate]:
    """ One independent estimate per step of ``trajectory``, in step order. """
    return [scorer.score(trajectory.prefix(length)) for length in range(1, trajectory.length + 1)]
