"""
ToyTree: a small decision tree whose continuations can be enumerated exactly.

Every action is always legal, an episode is one root to leaf walk, and the
outcome reward is the reward of the reached leaf.
"""
import logging
import re
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Sequence, Tuple

from marshmallow import ValidationError, fields, post_load, validate, validates_schema

from steprefine.core import BaseEnvironment, Instruction, Observation, Trajectory
from steprefine.exceptions import ConfigurationError, ContractViolation, DataCorruptionError
from steprefine.schema import StrictSchema
from steprefine.utils import derive_rng

logger = logging.getLogger(__name__)

LEAF_VALUES = (0.0, 0.25, 0.5, 0.75, 1.0)


class ToyConfig(NamedTuple):
    train_size: int = 40
    test_size: int = 20
    depth: int = 3
    branching: int = 3


class ToyGoal(NamedTuple):
    depth: int
    branching: int
    #: Leaf rewards in lexicographic order of the root to leaf paths.
    leaf_rewards: Tuple[float, ...]

    def leaf_index(self, path: Sequence[int]) -> int:
        index = 0
        for choice in path:
            index = index * self.branching + choice
        return index

    def best_below(self, path: Sequence[int]) -> float:
        """ Best leaf reward reachable from the node at ``path``. """
        span = self.branching ** (self.depth - len(path))
        start = self.leaf_index(path) * span
        return max(self.leaf_rewards[start:start + span])


@dataclass(frozen=True)
class Choose:
    index: int

    @property
    def text(self) -> str:
        return f'choose a{self.index}'


class ToyState(NamedTuple):
    task_id: str
    path: Tuple[int, ...] = ()
    step_counter: int = 0
    done: bool = False
    completed: bool = False


class ToyGoalSchema(StrictSchema):
    depth = fields.Int(required=True, validate=validate.Range(min=1))
    branching = fields.Int(required=True, validate=validate.Range(min=2))
    leaf_rewards = fields.List(fields.Float(validate=validate.Range(min=0.0, max=1.0)), required=True)

    @validates_schema
    def validate_leaves(self, data, **kwargs):
        if len(data['leaf_rewards']) != data['branching'] ** data['depth']:
            raise ValidationError('Expected one reward per leaf.', 'leaf_rewards')

    @post_load
    def make_goal(self, data, **kwargs):
        return ToyGoal(data['depth'], data['branching'], tuple(data['leaf_rewards']))


_CHOOSE = re.compile(r'^choose a(\d+)$')


class ToyTreeEnvironment(BaseEnvironment):
    env_id = 'toytree'
    default_tau = 0.1
    goal_schema = ToyGoalSchema
    config_class = ToyConfig
    split_names = ('train', 'test')

    def __init__(self, instructions: Sequence[Instruction], depth: int = 3, branching: int = 3) -> None:
        super().__init__(instructions)
        self.depth = depth
        self.branching = branching
        self.max_turns = depth
        for instruction in self.instructions:
            if (instruction.goal.depth, instruction.goal.branching) != (depth, branching):
                raise ConfigurationError(f'Task `{instruction.task_id}` has a differently shaped tree.')

    @property
    def n_actions(self) -> int:
        return self.branching

    @classmethod
    def generate(cls, config: ToyConfig, seed: int) -> Tuple['ToyTreeEnvironment', Dict[str, List[Instruction]]]:
        splits = generate_toy_dataset(config, seed)
        instructions = [instruction for split in splits.values() for instruction in split]
        return cls(instructions, config.depth, config.branching), splits

    def assets(self) -> Dict[str, List[dict]]:
        return {}

    @classmethod
    def from_assets(
        cls, assets: Dict[str, List[dict]], instructions: Sequence[Instruction], config: ToyConfig,
    ) -> 'ToyTreeEnvironment':
        return cls(instructions, config.depth, config.branching)

    def initial_state(self, instruction: Instruction) -> ToyState:
        return ToyState(task_id=instruction.task_id)

    def observe_initial(self, state: ToyState) -> Observation:
        return self._observe(state)

    def transition(self, state: ToyState, action):
        if not isinstance(action, Choose) or not 0 <= action.index < self.branching:
            return None
        next_state = state._replace(path=state.path + (action.index,))
        return next_state, self._observe(next_state), len(next_state.path) == self.depth

    def outcome(self, state: ToyState) -> float:
        if len(state.path) < self.depth:
            return 0.0
        goal = self.get_instruction(state.task_id).goal
        return goal.leaf_rewards[goal.leaf_index(state.path)]

    def legal_actions(self, state: ToyState) -> list:
        if state.done:
            return []
        return [Choose(index) for index in range(self.branching)]

    def action_slot(self, state: ToyState, action) -> int:
        if isinstance(action, Choose) and 0 <= action.index < self.branching:
            return action.index
        raise ContractViolation(f'Action `{action.text}` has no slot.')

    def parse_action(self, text: str):
        match = _CHOOSE.match(text)
        if match is None:
            raise DataCorruptionError(f'Unknown action `{text}`.')
        return Choose(int(match.group(1)))

    def render_instruction(self, instruction: Instruction) -> str:
        return f'walk from the root to the best leaf of tree {instruction.task_id}'

    def instruction_tokens(self, instruction: Instruction) -> List[str]:
        return [f'shape:{self.depth}x{self.branching}']

    def observation_tokens(self, instruction: Instruction, observation: Observation) -> List[str]:
        record = observation.record
        if 'path' not in record:
            return ['invalid']
        path = record['path']
        tokens = [f'depth:{len(path)}']
        if len(path) < self.depth:
            goal = instruction.goal
            tokens.extend(
                f'c{child}:best_{goal.best_below(path + [child])}' for child in range(self.branching)
            )
        return tokens

    def expert(self, instruction: Instruction) -> Trajectory:
        goal = instruction.goal
        best = max(range(len(goal.leaf_rewards)), key=lambda index: (goal.leaf_rewards[index], -index))
        path = []
        for _ in range(self.depth):
            path.append(best % self.branching)
            best //= self.branching
        return self.play(instruction, [Choose(index) for index in reversed(path)])

    def _observe(self, state: ToyState) -> Observation:
        path = list(state.path)
        if len(path) == self.depth:
            reward = self.outcome(state)
            return Observation(f'You reached leaf {path} worth {reward}.', {'path': path, 'reward': reward})
        return Observation(f'You are at node {path}.', {'path': path})


def generate_toy_dataset(config: ToyConfig, seed: int) -> Dict[str, List[Instruction]]:
    """ Seeded leaf rewards, with at least one leaf worth ``1`` per tree. """
    if config.train_size <= 0 or config.test_size <= 0:
        raise ConfigurationError('Dataset sizes must be positive.', key_path='data')
    rng = derive_rng(seed, 'toytree')
    n_leaves = config.branching ** config.depth
    instructions = []
    n_tasks = config.train_size + config.test_size
    for index in range(n_tasks):
        rewards = [LEAF_VALUES[int(value)] for value in rng.integers(len(LEAF_VALUES), size=n_leaves)]
        rewards[int(rng.integers(n_leaves))] = 1.0
        goal = ToyGoal(config.depth, config.branching, tuple(rewards))
        instructions.append(Instruction(ToyTreeEnvironment.env_id, f'toy-{index + 1:04d}', goal))
    return {'train': instructions[:config.train_size], 'test': instructions[config.train_size:]}
