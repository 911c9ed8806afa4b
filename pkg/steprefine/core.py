"""
The contract shared by every environment, and the episode runner producing trajectories.

Environments are deterministic: the only source of randomness in a rollout is the
policy sampling an action, drawn from the ``rng`` handed to :func:`rollout`.
States are immutable named tuples, so copies are free and concurrent rollouts on
the same environment never share mutable state.
"""
import enum
import logging
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from steprefine.constants import NOTHING_HAPPENS
from steprefine.exceptions import ConfigurationError, ContractViolation, DataCorruptionError
from steprefine.meta import RegisteredEnvironmentMeta
from steprefine.utils import sha256_bytes

logger = logging.getLogger(__name__)


class Instruction(NamedTuple):
    """ A task: which environment, which task key, and the environment specific goal. """
    env_id: str
    task_id: str
    goal: Any


class Observation(NamedTuple):
    #: Canonical text rendering.
    text: str
    #: Structured record, JSON compatible (dicts, lists, strings and numbers only).
    record: dict


class Step(NamedTuple):
    action: Any
    observation: Observation


class Terminated(str, enum.Enum):
    COMPLETED = 'completed'
    MAX_TURNS = 'max_turns'


class HistoryPrefix(NamedTuple):
    """ The instruction plus the first ``t - 1`` steps of some trajectory. """
    instruction: Instruction
    steps: Tuple[Step, ...] = ()

    def extend(self, step: Step) -> 'HistoryPrefix':
        return HistoryPrefix(self.instruction, self.steps + (step,))

    @property
    def length(self) -> int:
        return len(self.steps)


class TrajectorySuffix(NamedTuple):
    """ Steps from ``t`` onward, with the outcome reward of the completed trajectory. """
    steps: Tuple[Step, ...]
    outcome_reward: float
    terminated: Terminated = Terminated.COMPLETED

    @property
    def length(self) -> int:
        return len(self.steps)


class Trajectory(NamedTuple):
    instruction: Instruction
    steps: Tuple[Step, ...]
    outcome_reward: float
    terminated: Terminated

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> List[Any]:
        return [step.action for step in self.steps]

    def prefix(self, length: int) -> HistoryPrefix:
        """ The first ``length`` steps, as a history prefix. """
        return HistoryPrefix(self.instruction, self.steps[:length])

    def suffix(self, start: int) -> TrajectorySuffix:
        """ Steps from index ``start`` (0-based) to the end. """
        return TrajectorySuffix(self.steps[start:], self.outcome_reward, self.terminated)


def prefix_key(prefix: HistoryPrefix) -> str:
    """
    Content key of a prefix. Environments are deterministic, so the task and
    the action renderings determine every observation of the prefix.
    """
    parts = [prefix.instruction.env_id, prefix.instruction.task_id]
    parts.extend(step.action.text for step in prefix.steps)
    return sha256_bytes('\x1f'.join(parts).encode('utf-8'))


def glue(prefix: HistoryPrefix, suffix: TrajectorySuffix) -> Trajectory:
    """ Concatenates a prefix and the suffix continuing it into a full trajectory. """
    return Trajectory(
        instruction=prefix.instruction,
        steps=prefix.steps + suffix.steps,
        outcome_reward=suffix.outcome_reward,
        terminated=suffix.terminated,
    )


class StepResult(NamedTuple):
    state: Any
    observation: Observation
    terminal: bool


class BaseEnvironment(metaclass=RegisteredEnvironmentMeta):
    """
    Base class of the simulated POMDP environments.

    An environment instance is configured with the tasks it can host, its
    states are named tuples carrying at least ``step_counter``, ``done`` and
    ``completed``. Subclasses implement:

        - :meth:`initial_state` and :meth:`observe_initial`
        - :meth:`transition`, returning ``None`` for invalid actions
        - :meth:`outcome`
        - :meth:`legal_actions`, :meth:`action_slot`, :meth:`parse_action`
        - :meth:`instruction_tokens`, :meth:`observation_tokens`
        - :meth:`expert`
    """

    #: Registry key, also stored in every instruction of the environment.
    env_id: str = ''

    #: Episodes are truncated when ``step_counter`` reaches this value.
    max_turns: int = 0

    #: Default pair filtering threshold.
    default_tau: float = 0.0

    register_environment = False

    def __init__(self, instructions: Sequence[Instruction]) -> None:
        self._instructions = {}  # type: Dict[str, Instruction]
        for instruction in instructions:
            if instruction.env_id != self.env_id:
                raise ConfigurationError(
                    f'Instruction `{instruction.task_id}` belongs to `{instruction.env_id}`, not `{self.env_id}`.'
                )
            if instruction.task_id in self._instructions:
                raise ConfigurationError(f'Duplicate task id `{instruction.task_id}`.')
            self._instructions[instruction.task_id] = instruction
        self._initial_observations = {}  # type: Dict[str, Observation]
        self._experts = {}  # type: Dict[str, Trajectory]

    @property
    def n_actions(self) -> int:
        """ Number of action slots, i.e. policy matrix columns. """
        raise NotImplementedError()

    @property
    def instructions(self) -> List[Instruction]:
        return list(self._instructions.values())

    def get_instruction(self, task_id: str) -> Instruction:
        try:
            return self._instructions[task_id]
        except KeyError:
            raise ConfigurationError(f'Unknown task id `{task_id}` for environment `{self.env_id}`.')

    def reset(self, instruction: Instruction):
        """ Returns the initial state of ``instruction``'s task, with ``step_counter = 0``. """
        if instruction.env_id != self.env_id:
            raise ConfigurationError(f'Cannot reset `{self.env_id}` with a `{instruction.env_id}` instruction.')
        known = self.get_instruction(instruction.task_id)
        if known.goal != instruction.goal:
            raise ConfigurationError(f'Goal of task `{instruction.task_id}` does not match the loaded task.')
        return self.initial_state(known)

    def initial_observation(self, instruction: Instruction) -> Observation:
        """ The observation emitted on reset, cached per task. """
        observation = self._initial_observations.get(instruction.task_id)
        if observation is None:
            observation = self.observe_initial(self.reset(instruction))
            self._initial_observations[instruction.task_id] = observation
        return observation

    def step(self, state, action) -> StepResult:
        """
        Deterministic transition. Invalid actions only advance ``step_counter`` and emit
        ``Nothing happens``. The result is terminal on task completion or when
        ``step_counter`` reaches :attr:`max_turns`.
        """
        if state.done:
            raise ContractViolation('Cannot step a terminal state.')

        outcome = self.transition(state, action)
        if outcome is None:
            next_state, observation, completed = state, Observation(NOTHING_HAPPENS, {'valid': False}), False
        else:
            next_state, observation, completed = outcome

        step_counter = state.step_counter + 1
        terminal = completed or step_counter >= self.max_turns
        next_state = next_state._replace(step_counter=step_counter, done=terminal, completed=completed)
        return StepResult(next_state, observation, terminal)

    def score_outcome(self, state) -> float:
        """ Outcome reward in ``[0, 1]`` of a terminal state. """
        if not state.done:
            raise ContractViolation('Outcome reward is only defined for terminal states.')
        return float(self.outcome(state))

    def replay(self, prefix: HistoryPrefix):
        """
        Replays ``prefix`` from reset and returns the reached state, checking every
        stored observation against the one emitted by the environment.
        """
        state = self.reset(prefix.instruction)
        for index, step in enumerate(prefix.steps):
            if state.done:
                raise DataCorruptionError(
                    f'Prefix of `{prefix.instruction.task_id}` continues past a terminal step at {index}.'
                )
            result = self.step(state, step.action)
            if result.observation != step.observation:
                raise DataCorruptionError(
                    f'Replay of `{prefix.instruction.task_id}` diverged at step {index + 1}: '
                    f'expected `{step.observation.text}`, got `{result.observation.text}`.'
                )
            state = result.state
        return state

    def expert_trajectory(self, instruction: Instruction) -> Trajectory:
        """ Cached :meth:`expert`. """
        trajectory = self._experts.get(instruction.task_id)
        if trajectory is None:
            trajectory = self.expert(instruction)
            self._experts[instruction.task_id] = trajectory
        return trajectory

    def play(self, instruction: Instruction, actions: Sequence[Any]) -> Trajectory:
        """ Plays a fixed action sequence from reset; the sequence must reach a terminal state. """
        state = self.reset(instruction)
        steps = []
        for action in actions:
            result = self.step(state, action)
            steps.append(Step(action, result.observation))
            state = result.state
            if state.done:
                break
        if not state.done:
            raise ContractViolation(f'Actions for `{instruction.task_id}` do not reach a terminal state.')
        return make_trajectory(self, instruction, steps, state)

    def ground_truth_score(self, instruction: Instruction, state) -> Optional[float]:
        """ Optional heuristic score of a state, used to audit step rewards. """
        return None

    def initial_state(self, instruction: Instruction):
        raise NotImplementedError()

    def observe_initial(self, state) -> Observation:
        raise NotImplementedError()

    def transition(self, state, action) -> Optional[Tuple[Any, Observation, bool]]:
        raise NotImplementedError()

    def outcome(self, state) -> float:
        raise NotImplementedError()

    def legal_actions(self, state) -> List[Any]:
        """ Admissible actions, sorted by :meth:`action_slot`. """
        raise NotImplementedError()

    def action_slot(self, state, action) -> int:
        raise NotImplementedError()

    def parse_action(self, text: str):
        """ Inverse of the canonical action rendering. """
        raise NotImplementedError()

    def render_instruction(self, instruction: Instruction) -> str:
        raise NotImplementedError()

    def instruction_tokens(self, instruction: Instruction) -> List[str]:
        raise NotImplementedError()

    def observation_tokens(self, instruction: Instruction, observation: Observation) -> List[str]:
        raise NotImplementedError()

    def expert(self, instruction: Instruction) -> Trajectory:
        raise NotImplementedError()


def make_trajectory(env: BaseEnvironment, instruction: Instruction, steps: Sequence[Step], state) -> Trajectory:
    return Trajectory(
        instruction=instruction,
        steps=tuple(steps),
        outcome_reward=env.score_outcome(state),
        terminated=Terminated.COMPLETED if state.completed else Terminated.MAX_TURNS,
    )


def sample_index(logits: np.ndarray, temperature: float, rng: Optional[np.random.Generator]) -> int:
    """
    Picks an index from ``logits``. Temperature ``0`` is argmax with the lowest
    index winning ties, otherwise a softmax sample at the given temperature.
    """
    if temperature < 0:
        raise ContractViolation('Temperature must be non-negative.')
    if temperature == 0:
        return int(np.argmax(logits))
    if rng is None:
        raise ContractViolation('Sampling at a positive temperature needs a random stream.')
    return int(rng.choice(len(logits), p=softmax(logits, temperature)))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """ Softmax with ``-inf`` logits mapped to probability exactly 0. """
    scaled = np.asarray(logits, dtype=np.float64) / temperature
    top = np.max(scaled)
    weights = np.exp(scaled - top)
    return weights / weights.sum()


class BasePolicy:
    """ Anything that assigns logits to the legal actions of a state can drive a rollout. """

    def action_logits(self, env: BaseEnvironment, state, prefix: HistoryPrefix, legal: List[Any]) -> np.ndarray:
        raise NotImplementedError()

    def action_probabilities(
        self, env: BaseEnvironment, state, prefix: HistoryPrefix, legal: List[Any], temperature: float = 1.0,
    ) -> np.ndarray:
        return softmax(self.action_logits(env, state, prefix, legal), temperature)

    def select(
        self, env: BaseEnvironment, state, prefix: HistoryPrefix, legal: List[Any],
        temperature: float, rng: Optional[np.random.Generator],
    ) -> int:
        return sample_index(self.action_logits(env, state, prefix, legal), temperature, rng)


class UniformPolicy(BasePolicy):
    def action_logits(self, env, state, prefix, legal):
        return np.zeros(len(legal))


class ScriptedPolicy(BasePolicy):
    """
    Emits a fixed action for each step index. Steps without a scripted action,
    or whose scripted action is not legal, fall back to the lowest legal action.
    """

    def __init__(self, actions_by_task: Dict[str, Sequence[Any]]) -> None:
        self.actions_by_task = actions_by_task

    def action_logits(self, env, state, prefix, legal):
        logits = np.zeros(len(legal))
        script = self.actions_by_task.get(prefix.instruction.task_id, ())
        if state.step_counter < len(script):
            wanted = script[state.step_counter]
            if wanted in legal:
                logits[:] = -np.inf
                logits[legal.index(wanted)] = 0.0
        return logits


class ExpertPolicy(ScriptedPolicy):
    """ Follows the environment's oracle planner. """

    def __init__(self, env: BaseEnvironment) -> None:
        super().__init__({})
        self.env = env

    def action_logits(self, env, state, prefix, legal):
        task_id = prefix.instruction.task_id
        if task_id not in self.actions_by_task:
            self.actions_by_task[task_id] = self.env.expert_trajectory(prefix.instruction).actions
        return super().action_logits(env, state, prefix, legal)


def rollout(
    env: BaseEnvironment,
    policy: BasePolicy,
    prefix: HistoryPrefix,
    temperature: float,
    rng: Optional[np.random.Generator],
) -> Trajectory:
    """
    Replays ``prefix``, then lets ``policy`` act until the episode terminates.

    :raises: :exc:`steprefine.exceptions.DataCorruptionError` if the prefix does not replay.
    """
    state = env.replay(prefix)
    steps = list(prefix.steps)
    current = prefix
    while not state.done:
        legal = env.legal_actions(state)
        if not legal:
            raise ContractViolation(f'No legal action in a non-terminal state of `{prefix.instruction.task_id}`.')
        index = policy.select(env, state, current, legal, temperature, rng)
        result = env.step(state, legal[index])
        step = Step(legal[index], result.observation)
        steps.append(step)
        current = current.extend(step)
        state = result.state
    return make_trajectory(env, prefix.instruction, steps, state)
