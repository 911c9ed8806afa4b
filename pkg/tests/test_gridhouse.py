import numpy as np
import pytest

from steprefine.core import Instruction, Terminated
from steprefine.exceptions import ConfigurationError, DataCorruptionError, DatasetGenerationError
from steprefine.gridhouse import (
    INVENTORY, RECEPTACLES, Close, Cool, Go, GridHouseEnvironment, Heat, HouseConfig, HouseGoal, HouseLayout, Open,
    Put, Take, check_goal, generate_house_dataset, plan_shortest,
)


def make_house(goal, objects=('apple',), positions=('sink',)):
    instruction = Instruction('gridhouse', 'house-0001', goal)
    layout = HouseLayout('house-0001', tuple(objects), tuple(positions))
    return GridHouseEnvironment([layout], [instruction]), instruction


def test_pick_and_place_plan():
    env, instruction = make_house(HouseGoal('pick_place', 'apple', 'table'))
    plan = plan_shortest(env, instruction)
    assert [action.text for action in plan] == [
        'go to sink 1', 'take apple 1 from sink 1', 'go to table 1', 'put apple 1 in/on table 1',
    ]
    expert = env.expert_trajectory(instruction)
    assert expert.outcome_reward == 1.0
    assert expert.terminated == Terminated.COMPLETED
    assert expert.steps[-1].observation.text == 'You put the apple 1 in/on the table 1.'


def test_heat_and_place_plan():
    env, instruction = make_house(HouseGoal('heat_place', 'apple', 'table'))
    plan = plan_shortest(env, instruction)
    assert len(plan) == 7
    assert Open('microwave') in plan
    assert Heat('apple', 'microwave') in plan
    assert plan[-1] == Put('apple', 'table')


def test_cool_goal_requires_cold_tag():
    env, instruction = make_house(HouseGoal('cool_place', 'apple', 'table'))
    unchilled = env.play(instruction, [Go('sink'), Take('apple', 'sink'), Go('table'), Put('apple', 'table')] + [
        Go('sink'), Go('table'),
    ] * 8)
    assert unchilled.outcome_reward == 0.0
    assert unchilled.terminated == Terminated.MAX_TURNS
    assert env.expert_trajectory(instruction).actions[-3:] == [
        Cool('apple', 'fridge'), Go('table'), Put('apple', 'table'),
    ]


def test_goal_holding_at_reset():
    env, instruction = make_house(HouseGoal('pick_place', 'apple', 'table'), positions=('table',))
    with pytest.raises(DatasetGenerationError):
        plan_shortest(env, instruction)


def test_closed_receptacles_hide_contents():
    env, instruction = make_house(HouseGoal('pick_place', 'apple', 'table'), positions=('fridge',))
    state = env.reset(instruction)
    result = env.step(state, Go('fridge'))
    assert result.observation.text == 'You arrive at fridge 1. The fridge 1 is closed.'
    assert result.observation.record['contents'] is None
    state = result.state
    assert Take('apple', 'fridge') not in env.legal_actions(state)
    assert env.legal_actions(state)[-1] == Open('fridge')

    result = env.step(state, Open('fridge'))
    assert result.observation.text == 'You open the fridge 1. The fridge 1 is open. In it, you see a apple 1.'
    state = result.state
    assert Take('apple', 'fridge') in env.legal_actions(state)
    assert Close('fridge') in env.legal_actions(state)


def test_initial_observation():
    env, instruction = make_house(HouseGoal('heat_place', 'apple', 'table'))
    observation = env.initial_observation(instruction)
    assert 'On the sink 1, you see a apple 1.' in observation.text
    assert observation.text.endswith('Your task is to: put a hot apple in table.')
    assert observation.record['visible']['sink'] == ['apple']
    assert env.observation_tokens(instruction, observation) == [
        'event:reset', 'at:middle', 'holding:nothing', 'fetch|visible_at:sink',
    ]


def test_observation_tokens_follow_subgoals():
    env, instruction = make_house(HouseGoal('heat_place', 'apple', 'table'))
    expert = env.expert_trajectory(instruction)
    taken = env.observation_tokens(instruction, expert.steps[1].observation)
    assert 'treat|need:hot' in taken
    assert 'treat|go:microwave' in taken
    heated = env.observation_tokens(instruction, expert.steps[4].observation)
    assert 'place|go:table' in heated


def test_instruction_rendering():
    env, instruction = make_house(HouseGoal('cool_place', 'apple', 'shelf'))
    assert env.render_instruction(instruction) == 'put a cool apple in shelf'
    assert env.instruction_tokens(instruction) == ['template:cool_place', 'obj:apple', 'dest:shelf', 'temp:cold']


def test_action_slots_and_parsing():
    env, instruction = make_house(HouseGoal('pick_place', 'apple', 'table'))
    state = env.reset(instruction)
    assert env.n_actions == 23
    assert env.action_slot(state, Go('sink')) == 0
    assert env.action_slot(state, Take('apple', 'sink')) == 9
    assert env.action_slot(state, Put('apple', 'table')) == 18
    assert env.action_slot(state, Cool('apple', 'fridge')) == 22
    actions = (Go('microwave'), Take('egg', 'drawer'), Put('mug', 'shelf'), Open('cabinet'), Heat('egg', 'microwave'))
    for action in actions:
        assert env.parse_action(action.text) == action
    with pytest.raises(DataCorruptionError):
        env.parse_action('slice apple 1')


def test_layout_required():
    instruction = Instruction('gridhouse', 'house-0002', HouseGoal('pick_place', 'apple', 'table'))
    with pytest.raises(ConfigurationError):
        GridHouseEnvironment([], [instruction])


def test_check_goal():
    env, instruction = make_house(HouseGoal('pick_place', 'apple', 'sink'))
    assert check_goal(env.reset(instruction), HouseGoal('pick_place', 'apple', 'sink'))
    assert not check_goal(env.reset(instruction), HouseGoal('heat_place', 'apple', 'sink'))
    assert not check_goal(env.reset(instruction), HouseGoal('pick_place', 'egg', 'sink'))


def test_unseen_split_uses_held_out_combinations(house_dataset):
    seen = {instruction.goal.combination for instruction in house_dataset.splits['train']}
    seen |= {instruction.goal.combination for instruction in house_dataset.splits['test']}
    unseen = {instruction.goal.combination for instruction in house_dataset.splits['unseen']}
    assert len(house_dataset.splits['unseen']) == 6
    assert not seen & unseen


def test_generated_tasks_are_solvable(house_dataset):
    env = house_dataset.env
    for split in ('test', 'unseen'):
        for instruction in house_dataset.splits[split]:
            expert = env.expert_trajectory(instruction)
            assert expert.outcome_reward == 1.0
            assert expert.length <= env.max_turns
    assert all(expert.outcome_reward == 1.0 for expert in house_dataset.experts)


def test_generation_is_deterministic():
    config = HouseConfig(train_size=4, test_size=2, unseen_size=2)
    assert generate_house_dataset(config, seed=4) == generate_house_dataset(config, seed=4)


def test_generation_rejects_bad_config():
    with pytest.raises(ConfigurationError):
        generate_house_dataset(HouseConfig(unseen_size=0), seed=1)
    with pytest.raises(ConfigurationError):
        generate_house_dataset(HouseConfig(objects_per_task=12), seed=1)


def house_key(state):
    return state.location, state.opened, state.positions, state.temperatures


def shortest_plan_length(env, instruction, limit):
    """ Breadth-first search over every legal action, distractors and closing included, up to ``limit`` steps. """
    start = env.reset(instruction)
    frontier, seen = [start], {house_key(start)}
    for depth in range(1, limit + 1):
        successors = []
        for state in frontier:
            for action in env.legal_actions(state):
                result = env.step(state, action)
                if check_goal(result.state, instruction.goal):
                    return depth
                node = house_key(result.state)
                if node not in seen and not result.state.done:
                    seen.add(node)
                    successors.append(result.state)
        frontier = successors
    return None


@pytest.mark.parametrize('goal, objects, positions', [
    (HouseGoal('pick_place', 'apple', 'table'), ('apple',), ('sink',)),
    (HouseGoal('pick_place', 'mug', 'drawer'), ('mug', 'cup'), ('shelf', 'drawer')),
    (HouseGoal('pick_place', 'book', 'countertop'), ('pencil', 'book'), ('cabinet', 'cabinet')),
    (HouseGoal('heat_place', 'apple', 'fridge'), ('apple',), ('drawer',)),
    (HouseGoal('heat_place', 'potato', 'sink'), ('potato', 'tomato'), ('microwave', 'fridge')),
    (HouseGoal('cool_place', 'egg', 'microwave'), ('egg', 'apple'), ('cabinet', 'fridge')),
    (HouseGoal('cool_place', 'lettuce', 'fridge'), ('lettuce',), ('fridge',)),
])
def test_plan_is_shortest(goal, objects, positions):
    env, instruction = make_house(goal, objects, positions)
    plan = plan_shortest(env, instruction)
    assert env.play(instruction, plan).outcome_reward == 1.0
    assert shortest_plan_length(env, instruction, len(plan)) == len(plan)


def test_transitions_conserve_objects(house_dataset):
    env = house_dataset.env
    rng = np.random.default_rng(0)
    stray = [Take('apple', 'sink'), Put('mug', 'table'), Heat('egg', 'fridge'), Open('table'), Go('garage')]
    for instruction in house_dataset.splits['test'] + house_dataset.splits['unseen']:
        start = env.reset(instruction)
        for _ in range(5):
            state = start
            while not state.done:
                candidates = env.legal_actions(state) + stray
                state = env.step(state, candidates[int(rng.integers(len(candidates)))]).state
                assert state.objects == start.objects
                assert len(state.positions) == len(state.objects) == len(state.temperatures)
                assert all(position in RECEPTACLES + (INVENTORY,) for position in state.positions)
                assert state.positions.count(INVENTORY) <= 1
                assert sum(len(state.contents(recep)) for recep in RECEPTACLES) + (state.holding is not None) \
                    == len(state.objects)
