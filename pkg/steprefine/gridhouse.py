"""
GridHouse: a symbolic household with pick, heat and cool then place goals.

The world is a set of receptacles. Going from one to another takes one step,
and closed receptacles hide their contents until opened. The outcome reward is
``1`` when the goal predicate holds and ``0`` otherwise.
"""
import logging
import re
from collections import deque
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple

from marshmallow import ValidationError, fields, post_load, validate, validates_schema

from steprefine.core import BaseEnvironment, Instruction, Observation, Trajectory
from steprefine.exceptions import ConfigurationError, ContractViolation, DataCorruptionError, DatasetGenerationError
from steprefine.schema import StrictSchema
from steprefine.utils import derive_rng

logger = logging.getLogger(__name__)

OPEN_SURFACES = ('sink', 'countertop', 'table', 'shelf')
CLOSABLE = ('cabinet', 'drawer', 'fridge', 'microwave')
RECEPTACLES = OPEN_SURFACES + CLOSABLE
OBJECT_VOCAB = ('potato', 'apple', 'egg', 'tomato', 'mug', 'cup', 'bread', 'lettuce', 'pencil', 'book')
HIDING_PLACES = ('cabinet', 'drawer', 'fridge')
TEMPLATES = ('pick_place', 'heat_place', 'cool_place')

#: Temperature tag each template requires, and the appliance producing it.
REQUIRED_TEMPERATURE = {'pick_place': None, 'heat_place': 'hot', 'cool_place': 'cold'}
STATIONS = {'hot': 'microwave', 'cold': 'fridge'}

MIDDLE = 'middle'
INVENTORY = 'inventory'
NO_TEMPERATURE = 'none'


class HouseConfig(NamedTuple):
    train_size: int = 300
    test_size: int = 60
    unseen_size: int = 60
    n_objects: int = 10
    objects_per_task: int = 3
    holdout_fraction: float = 0.2
    surface_probability: float = 0.6


class HouseGoal(NamedTuple):
    template: str
    obj: str
    dest: str

    @property
    def temperature(self) -> Optional[str]:
        return REQUIRED_TEMPERATURE[self.template]

    @property
    def combination(self) -> Tuple[str, str, str]:
        """ The (object kind, receptacle kind, template) triple held out for the unseen split. """
        return self.obj, self.dest, self.template


class HouseLayout(NamedTuple):
    """ Initial placement of the objects of one task. """
    task_id: str
    objects: Tuple[str, ...]
    positions: Tuple[str, ...]


class HouseState(NamedTuple):
    task_id: str
    objects: Tuple[str, ...]
    #: Receptacle or ``inventory`` of each object, aligned with ``objects``.
    positions: Tuple[str, ...]
    temperatures: Tuple[str, ...]
    opened: FrozenSet[str] = frozenset()
    location: str = MIDDLE
    step_counter: int = 0
    done: bool = False
    completed: bool = False

    @property
    def holding(self) -> Optional[str]:
        for obj, position in zip(self.objects, self.positions):
            if position == INVENTORY:
                return obj
        return None

    def contents(self, receptacle: str) -> List[str]:
        return sorted(obj for obj, position in zip(self.objects, self.positions) if position == receptacle)

    def is_open(self, receptacle: str) -> bool:
        return receptacle not in CLOSABLE or receptacle in self.opened

    def move(self, obj: str, position: str) -> 'HouseState':
        index = self.objects.index(obj)
        return self._replace(positions=self.positions[:index] + (position,) + self.positions[index + 1:])

    def set_temperature(self, obj: str, temperature: str) -> 'HouseState':
        index = self.objects.index(obj)
        return self._replace(temperatures=self.temperatures[:index] + (temperature,) + self.temperatures[index + 1:])


@dataclass(frozen=True)
class Go:
    recep: str

    @property
    def text(self) -> str:
        return f'go to {self.recep} 1'


@dataclass(frozen=True)
class Take:
    obj: str
    recep: str

    @property
    def text(self) -> str:
        return f'take {self.obj} 1 from {self.recep} 1'


@dataclass(frozen=True)
class Put:
    obj: str
    recep: str

    @property
    def text(self) -> str:
        return f'put {self.obj} 1 in/on {self.recep} 1'


@dataclass(frozen=True)
class Open:
    recep: str

    @property
    def text(self) -> str:
        return f'open {self.recep} 1'


@dataclass(frozen=True)
class Close:
    recep: str

    @property
    def text(self) -> str:
        return f'close {self.recep} 1'


@dataclass(frozen=True)
class Heat:
    obj: str
    recep: str

    @property
    def text(self) -> str:
        return f'heat {self.obj} 1 with {self.recep} 1'


@dataclass(frozen=True)
class Cool:
    obj: str
    recep: str

    @property
    def text(self) -> str:
        return f'cool {self.obj} 1 with {self.recep} 1'


_ACTION_PATTERNS = (
    (re.compile(r'^go to (\w+) 1$'), lambda match: Go(match.group(1))),
    (re.compile(r'^take (\w+) 1 from (\w+) 1$'), lambda match: Take(match.group(1), match.group(2))),
    (re.compile(r'^put (\w+) 1 in/on (\w+) 1$'), lambda match: Put(match.group(1), match.group(2))),
    (re.compile(r'^open (\w+) 1$'), lambda match: Open(match.group(1))),
    (re.compile(r'^close (\w+) 1$'), lambda match: Close(match.group(1))),
    (re.compile(r'^heat (\w+) 1 with (\w+) 1$'), lambda match: Heat(match.group(1), match.group(2))),
    (re.compile(r'^cool (\w+) 1 with (\w+) 1$'), lambda match: Cool(match.group(1), match.group(2))),
)

#: Slot offsets of the actions after the go and take blocks.
_TAIL_SLOTS = {Put: 0, Open: 1, Close: 2, Heat: 3, Cool: 4}


class HouseGoalSchema(StrictSchema):
    template = fields.Str(required=True, validate=validate.OneOf(TEMPLATES))
    obj = fields.Str(required=True, validate=validate.OneOf(OBJECT_VOCAB))
    dest = fields.Str(required=True, validate=validate.OneOf(RECEPTACLES))

    @post_load
    def make_goal(self, data, **kwargs):
        return HouseGoal(**data)


class HouseLayoutSchema(StrictSchema):
    class Meta:
        versioned = True

    task_id = fields.Str(required=True)
    objects = fields.List(fields.Str(validate=validate.OneOf(OBJECT_VOCAB)), required=True)
    positions = fields.List(fields.Str(validate=validate.OneOf(RECEPTACLES)), required=True)

    @validates_schema
    def validate_alignment(self, data, **kwargs):
        if len(data.get('objects', [])) != len(data.get('positions', [])):
            raise ValidationError('Every object needs exactly one position.')
        if len(set(data.get('objects', []))) != len(data.get('objects', [])):
            raise ValidationError('Object kinds must be unique within a task.')

    @post_load
    def make_layout(self, data, **kwargs):
        return HouseLayout(data['task_id'], tuple(data['objects']), tuple(data['positions']))


def check_goal(state: HouseState, goal: HouseGoal) -> bool:
    """ Whether the goal object sits in the goal receptacle, with the required temperature tag. """
    if goal.obj not in state.objects:
        return False
    index = state.objects.index(goal.obj)
    if state.positions[index] != goal.dest:
        return False
    return goal.temperature is None or state.temperatures[index] == goal.temperature


def _listing(objects: Sequence[str]) -> str:
    if not objects:
        return 'nothing'
    return ', '.join(f'a {obj} 1' for obj in objects)


class GridHouseEnvironment(BaseEnvironment):
    """
    Action slots, in order: one ``go`` per receptacle kind, one ``take`` per
    object kind, then ``put``, ``open``, ``close``, ``heat`` and ``cool``.
    """
    env_id = 'gridhouse'
    max_turns = 20
    default_tau = 0.5
    goal_schema = HouseGoalSchema
    config_class = HouseConfig
    split_names = ('train', 'test', 'unseen')

    def __init__(
        self, layouts: Sequence[HouseLayout], instructions: Sequence[Instruction],
        objects: Sequence[str] = OBJECT_VOCAB,
    ) -> None:
        super().__init__(instructions)
        self.objects = tuple(objects)
        self.layouts = {layout.task_id: layout for layout in layouts}
        for instruction in self.instructions:
            if instruction.task_id not in self.layouts:
                raise ConfigurationError(f'Task `{instruction.task_id}` has no layout.')

    @property
    def n_actions(self) -> int:
        return len(RECEPTACLES) + len(self.objects) + len(_TAIL_SLOTS)

    @classmethod
    def generate(cls, config: HouseConfig, seed: int) -> Tuple['GridHouseEnvironment', Dict[str, List[Instruction]]]:
        layouts, splits = generate_house_dataset(config, seed)
        instructions = [instruction for split in splits.values() for instruction in split]
        return cls(layouts, instructions, OBJECT_VOCAB[:config.n_objects]), splits

    def assets(self) -> Dict[str, List[dict]]:
        schema = HouseLayoutSchema()
        return {'layouts': [schema.dump(self.layouts[task_id]) for task_id in sorted(self.layouts)]}

    @classmethod
    def from_assets(
        cls, assets: Dict[str, List[dict]], instructions: Sequence[Instruction], config: HouseConfig,
    ) -> 'GridHouseEnvironment':
        schema = HouseLayoutSchema()
        layouts = [schema.load_record(record) for record in assets['layouts']]
        return cls(layouts, instructions, OBJECT_VOCAB[:config.n_objects])

    def initial_state(self, instruction: Instruction) -> HouseState:
        layout = self.layouts[instruction.task_id]
        return HouseState(
            task_id=instruction.task_id,
            objects=layout.objects,
            positions=layout.positions,
            temperatures=(NO_TEMPERATURE,) * len(layout.objects),
        )

    def observe_initial(self, state: HouseState) -> Observation:
        instruction = self.get_instruction(state.task_id)
        seen = ' '.join(
            f'On the {recep} 1, you see {_listing(state.contents(recep))}.' for recep in OPEN_SURFACES
        )
        text = (
            f'You are in the middle of a room. Looking quickly around you, you see '
            f'{", ".join(f"a {recep} 1" for recep in RECEPTACLES)}. {seen} '
            f'Your task is to: {self.render_instruction(instruction)}.'
        )
        record = self._view(state, 'reset')
        record['visible'] = {recep: state.contents(recep) for recep in OPEN_SURFACES}
        return Observation(text, record)

    def transition(self, state: HouseState, action):
        here = state.location
        holding = state.holding
        if isinstance(action, Go) and action.recep in RECEPTACLES and action.recep != here:
            next_state = state._replace(location=action.recep)
            if action.recep in CLOSABLE and not next_state.is_open(action.recep):
                text = f'You arrive at {action.recep} 1. The {action.recep} 1 is closed.'
            elif action.recep in CLOSABLE:
                text = f'You arrive at {action.recep} 1. The {action.recep} 1 is open. ' \
                       f'In it, you see {_listing(next_state.contents(action.recep))}.'
            else:
                text = f'You arrive at {action.recep} 1. On the {action.recep} 1, ' \
                       f'you see {_listing(next_state.contents(action.recep))}.'
            event = 'arrive'
        elif isinstance(action, Take) and action.recep == here and holding is None \
                and action.obj in state.contents(here) and state.is_open(here):
            next_state = state.move(action.obj, INVENTORY)
            text, event = f'You pick up the {action.obj} 1 from the {here} 1.', 'take'
        elif isinstance(action, Put) and action.recep == here and action.obj == holding and here != MIDDLE \
                and state.is_open(here):
            next_state = state.move(action.obj, here)
            text, event = f'You put the {action.obj} 1 in/on the {here} 1.', 'put'
        elif isinstance(action, Open) and action.recep == here and here in CLOSABLE and here not in state.opened:
            next_state = state._replace(opened=state.opened | {here})
            text = f'You open the {here} 1. The {here} 1 is open. In it, you see {_listing(next_state.contents(here))}.'
            event = 'open'
        elif isinstance(action, Close) and action.recep == here and here in state.opened:
            next_state = state._replace(opened=state.opened - {here})
            text, event = f'You close the {here} 1.', 'close'
        elif isinstance(action, (Heat, Cool)) and self._can_treat(state, action):
            temperature = 'hot' if isinstance(action, Heat) else 'cold'
            next_state = state.set_temperature(action.obj, temperature)
            verb = 'heat' if temperature == 'hot' else 'cool'
            text, event = f'You {verb} the {action.obj} 1 using the {here} 1.', verb
        else:
            return None
        goal = self.get_instruction(state.task_id).goal
        return next_state, Observation(text, self._view(next_state, event)), check_goal(next_state, goal)

    @staticmethod
    def _can_treat(state: HouseState, action) -> bool:
        station = STATIONS['hot' if isinstance(action, Heat) else 'cold']
        return action.recep == state.location == station and state.is_open(station) and action.obj == state.holding

    @staticmethod
    def _view(state: HouseState, event: str) -> dict:
        """ What the agent perceives after an action: where it is, what it sees and what it holds. """
        here = state.location
        holding = state.holding
        temperature = None
        if holding is not None:
            temperature = state.temperatures[state.objects.index(holding)]
        is_open = None if here == MIDDLE else state.is_open(here)
        return {
            'event': event,
            'location': here,
            'open': is_open,
            'contents': state.contents(here) if is_open else None,
            'holding': holding,
            'temperature': temperature,
        }

    def outcome(self, state: HouseState) -> float:
        return 1.0 if check_goal(state, self.get_instruction(state.task_id).goal) else 0.0

    def legal_actions(self, state: HouseState) -> list:
        if state.done:
            return []
        here = state.location
        holding = state.holding
        actions = [Go(recep) for recep in RECEPTACLES if recep != here]
        if here != MIDDLE and holding is None and state.is_open(here):
            contents = set(state.contents(here))
            actions.extend(Take(obj, here) for obj in self.objects if obj in contents)
        if here != MIDDLE and holding is not None and state.is_open(here):
            actions.append(Put(holding, here))
        if here in CLOSABLE:
            actions.append(Close(here) if here in state.opened else Open(here))
        if holding is not None and here in STATIONS.values() and state.is_open(here):
            actions.append(Heat(holding, here) if here == STATIONS['hot'] else Cool(holding, here))
        return sorted(actions, key=lambda action: self.action_slot(state, action))

    def action_slot(self, state: HouseState, action) -> int:
        if isinstance(action, Go) and action.recep in RECEPTACLES:
            return RECEPTACLES.index(action.recep)
        if isinstance(action, Take) and action.obj in self.objects:
            return len(RECEPTACLES) + self.objects.index(action.obj)
        if type(action) in _TAIL_SLOTS:
            return len(RECEPTACLES) + len(self.objects) + _TAIL_SLOTS[type(action)]
        raise ContractViolation(f'Action `{action.text}` has no slot.')

    def parse_action(self, text: str):
        for pattern, build in _ACTION_PATTERNS:
            match = pattern.match(text)
            if match:
                return build(match)
        raise DataCorruptionError(f'Unknown action `{text}`.')

    def render_instruction(self, instruction: Instruction) -> str:
        goal = instruction.goal
        adjective = {'hot': 'hot ', 'cold': 'cool ', None: ''}[goal.temperature]
        return f'put a {adjective}{goal.obj} in {goal.dest}'

    def instruction_tokens(self, instruction: Instruction) -> List[str]:
        goal = instruction.goal
        return [
            f'template:{goal.template}', f'obj:{goal.obj}', f'dest:{goal.dest}', f'temp:{goal.temperature or "any"}',
        ]

    def observation_tokens(self, instruction: Instruction, observation: Observation) -> List[str]:
        record = observation.record
        if 'event' not in record:
            return ['invalid']
        goal = instruction.goal
        here = record['location']
        holding = record['holding']
        tokens = [f'event:{record["event"]}', f'at:{here}', f'holding:{holding or "nothing"}']
        if record['open'] is not None:
            tokens.append('here:open' if record['open'] else 'here:closed')

        if holding == goal.obj and goal.temperature and record['temperature'] != goal.temperature:
            station = STATIONS[goal.temperature]
            tokens.append(f'treat|need:{goal.temperature}')
            if here == station:
                tokens.append('treat|station_open' if record['open'] else 'treat|station_closed')
            else:
                tokens.append(f'treat|go:{station}')
        elif holding == goal.obj:
            if here == goal.dest:
                tokens.append('place|dest_open' if record['open'] else 'place|dest_closed')
            else:
                tokens.append(f'place|go:{goal.dest}')
        elif holding is None:
            if goal.obj in (record['contents'] or ()):
                tokens.append(f'fetch|target_here:{goal.obj}')
            elif record['open'] is False:
                tokens.append('fetch|closed_here')
            visible = record.get('visible')
            if visible is not None:
                spots = [recep for recep in sorted(visible) if goal.obj in visible[recep]]
                tokens.extend(f'fetch|visible_at:{recep}' for recep in spots)
                if not spots:
                    tokens.append(f'fetch|hidden|obj:{goal.obj}')
        else:
            tokens.append('holding_other')
        return tokens

    def expert(self, instruction: Instruction) -> Trajectory:
        plan = plan_shortest(self, instruction)
        return self.play(instruction, plan)


def _relevant_actions(env: GridHouseEnvironment, state: HouseState, goal: HouseGoal) -> list:
    """ Legal actions that can be part of a shortest plan: nothing touching distractors, no closing. """
    relevant = []
    for action in env.legal_actions(state):
        if isinstance(action, Close):
            continue
        if isinstance(action, (Take, Put, Heat, Cool)) and action.obj != goal.obj:
            continue
        relevant.append(action)
    return relevant


def plan_shortest(env: GridHouseEnvironment, instruction: Instruction) -> list:
    """
    Breadth-first search for a shortest action sequence reaching the goal. Actions
    are expanded in slot order, so ties resolve to the earliest slots.

    :raises: :exc:`DatasetGenerationError` if the goal already holds or cannot be reached within ``max_turns``.
    """
    goal = instruction.goal
    start = env.reset(instruction)
    if check_goal(start, goal):
        raise DatasetGenerationError(f'Goal of `{instruction.task_id}` already holds at reset.')

    def key(state: HouseState):
        return state.location, state.opened, state.positions, state.temperatures

    parents = {key(start): None}  # type: Dict[tuple, Optional[tuple]]
    frontier = deque([start])
    while frontier:
        state = frontier.popleft()
        if state.step_counter >= env.max_turns:
            continue
        for action in _relevant_actions(env, state, goal):
            result = env.step(state, action)
            node = key(result.state)
            if node in parents:
                continue
            parents[node] = (key(state), action)
            if check_goal(result.state, goal):
                plan = []
                while parents[node] is not None:
                    node, step_action = parents[node]
                    plan.append(step_action)
                return plan[::-1]
            if not result.terminal:
                frontier.append(result.state)
    raise DatasetGenerationError(f'Goal of `{instruction.task_id}` is not reachable within {env.max_turns} turns.')


def generate_house_dataset(config: HouseConfig, seed: int) -> Tuple[List[HouseLayout], Dict[str, List[Instruction]]]:
    """
    Generates train, seen test and unseen test tasks, deterministically under ``seed``.

    A fraction of the (object kind, receptacle kind, template) triples is held out:
    unseen tasks only use held-out triples, train and seen test tasks never do.
    """
    if min(config.train_size, config.test_size, config.unseen_size) <= 0:
        raise ConfigurationError('Dataset sizes must be positive.', key_path='data')
    if not 1 <= config.objects_per_task <= config.n_objects <= len(OBJECT_VOCAB):
        raise ConfigurationError('Invalid object vocabulary size.', key_path='data')

    rng = derive_rng(seed, 'gridhouse')
    objects = OBJECT_VOCAB[:config.n_objects]
    hiding = {obj: HIDING_PLACES[int(rng.integers(len(HIDING_PLACES)))] for obj in objects}

    combinations = [(obj, dest, template) for template in TEMPLATES for obj in objects for dest in RECEPTACLES]
    order = rng.permutation(len(combinations))
    n_held_out = int(round(len(combinations) * config.holdout_fraction))
    if n_held_out < 1 or n_held_out >= len(combinations):
        raise DatasetGenerationError('Vocabulary too small to hold out unseen combinations.')
    held_out = [combinations[int(index)] for index in sorted(order[:n_held_out])]
    seen = [combinations[int(index)] for index in sorted(order[n_held_out:])]

    sizes = (
        ('train', config.train_size, seen), ('test', config.test_size, seen),
        ('unseen', config.unseen_size, held_out),
    )
    n_tasks = config.train_size + config.test_size + config.unseen_size
    width = max(4, len(str(n_tasks)))
    layouts = []
    splits = {}  # type: Dict[str, List[Instruction]]
    counter = 0
    for split, size, pool in sizes:
        splits[split] = []
        attempts = 0
        while len(splits[split]) < size:
            attempts += 1
            if attempts > 20 * size:
                raise DatasetGenerationError(f'Could not draw {size} solvable `{split}` tasks.')
            obj, dest, template = pool[int(rng.integers(len(pool)))]
            task_id = f'house-{counter + 1:0{width}d}'
            layout = _draw_layout(rng, config, task_id, obj, dest, hiding, objects)
            instruction = Instruction(GridHouseEnvironment.env_id, task_id, HouseGoal(template, obj, dest))
            candidate = GridHouseEnvironment([layout], [instruction], objects)
            try:
                candidate.expert_trajectory(instruction)
            except DatasetGenerationError:
                logger.debug('Rejected a layout of `%s`.', task_id, exc_info=True)
                continue
            counter += 1
            layouts.append(layout)
            splits[split].append(instruction)
    return layouts, splits


def _draw_layout(rng, config: HouseConfig, task_id: str, obj: str, dest: str, hiding: dict, objects) -> HouseLayout:
    others = [candidate for candidate in objects if candidate != obj]
    picks = rng.choice(len(others), size=config.objects_per_task - 1, replace=False)
    distractors = sorted(others[int(index)] for index in picks)

    surfaces = [recep for recep in OPEN_SURFACES if recep != dest]
    if rng.random() < config.surface_probability or hiding[obj] == dest:
        start = surfaces[int(rng.integers(len(surfaces)))]
    else:
        start = hiding[obj]
    placed = {obj: start}
    for distractor in distractors:
        placed[distractor] = RECEPTACLES[int(rng.integers(len(RECEPTACLES)))]
    kinds = tuple(sorted(placed))
    return HouseLayout(task_id, kinds, tuple(placed[kind] for kind in kinds))
