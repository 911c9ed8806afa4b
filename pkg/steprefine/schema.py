"""
Marshmallow schemas of every persisted record.

Top level records are versioned: they are dumped with ``schema_version`` and
loading a record of another version fails. Records nested in other records
are not versioned on their own.

Action renderings can only be parsed back by the environment that produced
them, so schemas loading trajectories, prefixes or suffixes are created with
the environment:

.. code-block:: python

    records = [TrajectorySchema().dump(trajectory) for trajectory in trajectories]
    loaded = [TrajectorySchema(env=env).load_record(record) for record in records]
"""
from typing import Any, Optional, Sequence, Tuple

from marshmallow import RAISE, Schema, SchemaOpts, ValidationError, fields, post_dump, post_load, pre_load, validate

from steprefine.constants import SCHEMA_VERSION
from steprefine.core import (
    BaseEnvironment, HistoryPrefix, Instruction, Observation, Step, Terminated, Trajectory, TrajectorySuffix,
    glue,
)
from steprefine.exceptions import ContractViolation, DataCorruptionError
from steprefine.fields import ActionText, SparseVector
from steprefine.meta import get_environment_class
from steprefine.pairs import ContrastiveStepPair, ContrastiveTrajPair
from steprefine.reward_model import ScoredStep
from steprefine.scorer import EstimateMethod, StepRewardEstimate
from steprefine.utils import dumps_record, sha256_bytes

UNIT_INTERVAL = validate.Range(min=0.0, max=1.0)


class RecordSchemaOpts(SchemaOpts):
    """
    Adds the ``versioned`` Meta option and makes ``unknown = RAISE`` the default,
    so a misspelled key in a stored record is an error instead of silently dropped data.
    """
    def __init__(self, meta, *args, **kwargs):
        super().__init__(meta, *args, **kwargs)
        self.unknown = getattr(meta, 'unknown', RAISE)
        self.versioned = getattr(meta, 'versioned', False)


class StrictSchema(Schema):
    """
    Base schema of the package.

    Accepts an optional ``env`` keyword, the :class:`steprefine.core.BaseEnvironment`
    used to parse action renderings back into actions.
    """
    OPTIONS_CLASS = RecordSchemaOpts

    def __init__(self, *args, **kwargs):
        self.env = kwargs.pop('env', None)  # type: Optional[BaseEnvironment]
        super().__init__(*args, **kwargs)

    @pre_load
    def check_schema_version(self, data, **kwargs):
        if not self.opts.versioned:
            return data
        if not isinstance(data, dict):
            raise ValidationError('Expected a record.')
        if data.get('schema_version') != SCHEMA_VERSION:
            raise ValidationError(
                f'Unsupported schema version, expected {SCHEMA_VERSION}.', field_name='schema_version',
            )
        return {key: value for key, value in data.items() if key != 'schema_version'}

    @post_dump
    def add_schema_version(self, data, **kwargs):
        if self.opts.versioned:
            data['schema_version'] = SCHEMA_VERSION
        return data

    def load_record(self, data: dict) -> Any:
        """ :meth:`load`, reporting invalid records as :exc:`DataCorruptionError`. """
        try:
            return self.load(data)
        except ValidationError as exc:
            raise DataCorruptionError(f'Invalid `{self.__class__.__name__}` record: {exc.messages}.')

    def make_steps(self, raw_steps: Sequence[dict]) -> Tuple[Step, ...]:
        if self.env is None:
            raise ContractViolation(f'`{self.__class__.__name__}` needs an environment to parse actions.')
        return tuple(Step(self.env.parse_action(raw['action']), raw['observation']) for raw in raw_steps)

    def make_prefix(self, raw: dict) -> HistoryPrefix:
        return HistoryPrefix(raw['instruction'], self.make_steps(raw['steps']))

    def make_suffix(self, raw: dict) -> TrajectorySuffix:
        return TrajectorySuffix(self.make_steps(raw['steps']), raw['outcome_reward'], raw['terminated'])

    def make_trajectory(self, raw: dict) -> Trajectory:
        return Trajectory(raw['instruction'], self.make_steps(raw['steps']), raw['outcome_reward'], raw['terminated'])


def _dump_goal(instruction: Instruction) -> dict:
    return get_environment_class(instruction.env_id).goal_schema().dump(instruction.goal)


class InstructionSchema(StrictSchema):
    env_id = fields.Str(required=True)
    task_id = fields.Str(required=True, validate=validate.Length(min=1))
    goal = fields.Function(_dump_goal, deserialize=lambda value: value, required=True)

    @post_load
    def make_instruction(self, data, **kwargs):
        env_class = get_environment_class(data['env_id'])
        goal = env_class.goal_schema().load(data['goal'])
        return Instruction(data['env_id'], data['task_id'], goal)


class TaskSchema(InstructionSchema):
    """ A task line of a dataset split. """
    class Meta:
        versioned = True


class ObservationSchema(StrictSchema):
    text = fields.Str(required=True)
    record = fields.Dict(keys=fields.Str(), required=True)

    @post_load
    def make_observation(self, data, **kwargs):
        return Observation(data['text'], data['record'])


class StepSchema(StrictSchema):
    action = ActionText(required=True)
    observation = fields.Nested(ObservationSchema, required=True)


class PrefixSchema(StrictSchema):
    instruction = fields.Nested(InstructionSchema, required=True)
    steps = fields.List(fields.Nested(StepSchema), required=True)


class SuffixSchema(StrictSchema):
    steps = fields.List(fields.Nested(StepSchema), required=True, validate=validate.Length(min=1))
    outcome_reward = fields.Float(required=True, validate=UNIT_INTERVAL)
    terminated = fields.Enum(Terminated, by_value=True, required=True)


class TrajectoryBodySchema(SuffixSchema):
    instruction = fields.Nested(InstructionSchema, required=True)


class TrajectorySchema(TrajectoryBodySchema):
    """ One line of a trajectory store. """
    class Meta:
        versioned = True

    @post_load
    def load_trajectory(self, data, **kwargs):
        return self.make_trajectory(data)


def trajectory_hash(trajectory: Trajectory) -> str:
    """ Content hash of a trajectory: sha256 of its canonical record. """
    return sha256_bytes(dumps_record(TrajectorySchema().dump(trajectory)).encode('utf-8'))


class EstimateSchema(StrictSchema):
    value = fields.Float(required=True, validate=UNIT_INTERVAL)
    n_samples = fields.Int(required=True, validate=validate.Range(min=1))
    std_error = fields.Float(required=True, validate=validate.Range(min=0.0))
    method = fields.Enum(EstimateMethod, by_value=True, required=True)

    @post_load
    def make_estimate(self, data, **kwargs):
        return StepRewardEstimate(**data)


class StepPairSchema(StrictSchema):
    """
    A contrastive step pair. The win side continues the expert trajectory, which
    is referenced by ``expert_hash``, checked when the record is loaded.
    """
    class Meta:
        versioned = True

    prefix = fields.Nested(PrefixSchema, required=True)
    expert_hash = fields.Function(
        lambda pair: trajectory_hash(glue(pair.prefix, pair.win_suffix)),
        deserialize=lambda value: value,
        required=True,
    )
    win_suffix = fields.Nested(SuffixSchema, required=True)
    lose_suffix = fields.Nested(SuffixSchema, required=True)
    win_step_reward = fields.Nested(EstimateSchema, required=True)
    lose_step_reward = fields.Nested(EstimateSchema, required=True)

    @post_load
    def make_pair(self, data, **kwargs):
        pair = ContrastiveStepPair(
            prefix=self.make_prefix(data['prefix']),
            win_suffix=self.make_suffix(data['win_suffix']),
            lose_suffix=self.make_suffix(data['lose_suffix']),
            win_step_reward=data['win_step_reward'],
            lose_step_reward=data['lose_step_reward'],
        )
        if trajectory_hash(glue(pair.prefix, pair.win_suffix)) != data['expert_hash']:
            raise ValidationError('Win side does not match the referenced expert trajectory.', 'expert_hash')
        return pair


class TrajPairSchema(StrictSchema):
    class Meta:
        versioned = True

    instruction = fields.Nested(InstructionSchema, required=True)
    win_hash = fields.Function(lambda pair: trajectory_hash(pair.win_traj), deserialize=lambda value: value)
    lose_hash = fields.Function(lambda pair: trajectory_hash(pair.lose_traj), deserialize=lambda value: value)
    win_traj = fields.Nested(TrajectoryBodySchema, required=True)
    lose_traj = fields.Nested(TrajectoryBodySchema, required=True)

    @post_load
    def make_pair(self, data, **kwargs):
        return ContrastiveTrajPair(
            instruction=data['instruction'],
            win_traj=self.make_trajectory(data['win_traj']),
            lose_traj=self.make_trajectory(data['lose_traj']),
        )


class ScoredStepSchema(StrictSchema):
    """ One scored step of the step-reward dump, the training data of the reward model. """
    class Meta:
        versioned = True

    task_id = fields.Str(required=True)
    prefix_hash = fields.Str(required=True)
    step_index = fields.Int(required=True, validate=validate.Range(min=1))
    action = fields.Str(required=True)
    value = fields.Float(required=True, validate=UNIT_INTERVAL)
    std_error = fields.Float(required=True, validate=validate.Range(min=0.0))
    method = fields.Enum(EstimateMethod, by_value=True, required=True)
    features = SparseVector(required=True)

    @post_load
    def make_scored_step(self, data, **kwargs):
        return ScoredStep(**data)


class LossRecordSchema(StrictSchema):
    epoch = fields.Int(required=True)
    odpo = fields.Float(required=True)
    sdpo = fields.Float(required=True)
    sft = fields.Float(required=True)
    total = fields.Float(required=True)


class IterationReportSchema(StrictSchema):
    class Meta:
        versioned = True

    iteration = fields.Int(required=True, validate=validate.Range(min=1))
    n_step_pairs = fields.Int(required=True)
    n_traj_pairs = fields.Int(required=True)
    train_reward = fields.Float(required=True)
    test_reward = fields.Float(required=True)
    unseen_reward = fields.Float(allow_none=True, load_default=None)
    avg_reward_per_step = fields.Float(allow_none=True, load_default=None)
    losses = fields.List(fields.Nested(LossRecordSchema), required=True)
    checkpoint = fields.Str(required=True)
    checkpoint_hash = fields.Str(required=True)
    scorer_hash = fields.Str(required=True)
    params_version = fields.Int(required=True)
    best_test_reward = fields.Float(required=True)
    best_iteration = fields.Int(required=True)


class BaselineSchema(StrictSchema):
    """ Evaluation of the SFT agent a run starts from. """
    class Meta:
        versioned = True

    train_reward = fields.Float(required=True)
    test_reward = fields.Float(required=True)
    unseen_reward = fields.Float(allow_none=True, load_default=None)
    avg_reward_per_step = fields.Float(allow_none=True, load_default=None)
    checkpoint_hash = fields.Str(required=True)


class ManifestEntrySchema(StrictSchema):
    class Meta:
        versioned = True

    kind = fields.Str(required=True)
    path = fields.Str(required=True)
    sha256 = fields.Str(required=True, validate=validate.Length(equal=64))
    tool_version = fields.Str(required=True)
    recorded_at = fields.Str(required=True)


class DatasetSchema(StrictSchema):
    """ ``env.json`` of a dataset directory: how the dataset was generated and where its splits live. """
    class Meta:
        versioned = True

    env_id = fields.Str(required=True)
    seed = fields.Int(required=True)
    config = fields.Dict(keys=fields.Str(), required=True)
    splits = fields.Dict(keys=fields.Str(), values=fields.Str(), required=True)
    assets = fields.Dict(keys=fields.Str(), values=fields.Str(), required=True)
    experts = fields.Str(required=True)
