"""
The run configuration: a YAML file with nested sections, validated by
marshmallow schemas that reject unknown keys at every level.

.. code-block:: yaml

    env: shopsim
    seed: 7
    iterations: 4
    pairs:
      tau: 0.01
    optimize:
      beta: 0.2
      use_sdpo: false

Values left out are defaulted, including the environment specific dataset
sizes and pair filtering threshold.
"""
import difflib
import logging
import os
from typing import Iterator, List, NamedTuple, Optional, Tuple

import yaml
from marshmallow import ValidationError, fields, post_load, validate, validates_schema

from steprefine.constants import (
    DEFAULT_BETA, DEFAULT_FEATURE_DIM, DEFAULT_ITERATIONS, DEFAULT_N_SAMPLES, DEFAULT_NODE_BUDGET,
)
from steprefine.exceptions import ConfigurationError
from steprefine.meta import get_environment_class
from steprefine.schema import StrictSchema
from steprefine.utils import sha256_bytes

logger = logging.getLogger(__name__)

ENV_IDS = ('shopsim', 'gridhouse', 'toytree')
SCORING_MODES = ('mc', 'exact', 'rm')


class DataConfig(NamedTuple):
    dir: Optional[str] = None
    train_size: Optional[int] = None
    test_size: Optional[int] = None
    unseen_size: Optional[int] = None


class PolicyConfig(NamedTuple):
    feature_dim: int = DEFAULT_FEATURE_DIM


class SFTSection(NamedTuple):
    enabled: bool = True
    checkpoint: Optional[str] = None
    learning_rate: float = 0.1
    epochs: int = 40
    batch_size: int = 32
    tolerance: float = 1e-4


class ScoringConfig(NamedTuple):
    mode: str = 'mc'
    n_samples: int = DEFAULT_N_SAMPLES
    temperature: float = 1.0
    reward_model: Optional[str] = None
    node_budget: int = DEFAULT_NODE_BUDGET


class PairsConfig(NamedTuple):
    tau: Optional[float] = None


class OptimizeConfig(NamedTuple):
    beta: float = DEFAULT_BETA
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    use_odpo: bool = True
    use_sdpo: bool = True
    use_sft: bool = True


class EvaluationConfig(NamedTuple):
    step_rewards: bool = True
    n_samples: int = DEFAULT_N_SAMPLES


class RunConfig(NamedTuple):
    env: str
    seed: int
    output_dir: str
    iterations: int = DEFAULT_ITERATIONS
    data: DataConfig = DataConfig()
    policy: PolicyConfig = PolicyConfig()
    sft: SFTSection = SFTSection()
    scoring: ScoringConfig = ScoringConfig()
    pairs: PairsConfig = PairsConfig()
    optimize: OptimizeConfig = OptimizeConfig()
    evaluation: EvaluationConfig = EvaluationConfig()


POSITIVE = validate.Range(min=1)
POSITIVE_REAL = validate.Range(min=0.0, min_inclusive=False)


class DataSchema(StrictSchema):
    dir = fields.Str(allow_none=True, load_default=None)
    train_size = fields.Int(allow_none=True, load_default=None, validate=POSITIVE)
    test_size = fields.Int(allow_none=True, load_default=None, validate=POSITIVE)
    unseen_size = fields.Int(allow_none=True, load_default=None, validate=POSITIVE)

    @post_load
    def make_section(self, data, **kwargs):
        return DataConfig(**data)


class PolicySchema(StrictSchema):
    feature_dim = fields.Int(load_default=DEFAULT_FEATURE_DIM, validate=POSITIVE)

    @post_load
    def make_section(self, data, **kwargs):
        return PolicyConfig(**data)


class SFTSectionSchema(StrictSchema):
    enabled = fields.Bool(load_default=True)
    checkpoint = fields.Str(allow_none=True, load_default=None)
    learning_rate = fields.Float(load_default=0.1, validate=POSITIVE_REAL)
    epochs = fields.Int(load_default=40, validate=POSITIVE)
    batch_size = fields.Int(load_default=32, validate=POSITIVE)
    tolerance = fields.Float(load_default=1e-4, validate=validate.Range(min=0.0))

    @validates_schema
    def validate_source(self, data, **kwargs):
        if not data.get('enabled', True) and not data.get('checkpoint'):
            raise ValidationError('A checkpoint is required when SFT is disabled.', 'checkpoint')

    @post_load
    def make_section(self, data, **kwargs):
        return SFTSection(**data)


class ScoringSchema(StrictSchema):
    mode = fields.Str(load_default='mc', validate=validate.OneOf(SCORING_MODES))
    n_samples = fields.Int(load_default=DEFAULT_N_SAMPLES, validate=POSITIVE)
    temperature = fields.Float(load_default=1.0, validate=POSITIVE_REAL)
    reward_model = fields.Str(allow_none=True, load_default=None)
    node_budget = fields.Int(load_default=DEFAULT_NODE_BUDGET, validate=POSITIVE)

    @validates_schema
    def validate_reward_model(self, data, **kwargs):
        if data.get('mode') == 'rm' and not data.get('reward_model'):
            raise ValidationError('A reward model checkpoint is required in `rm` mode.', 'reward_model')

    @post_load
    def make_section(self, data, **kwargs):
        return ScoringConfig(**data)


class PairsSchema(StrictSchema):
    tau = fields.Float(allow_none=True, load_default=None, validate=validate.Range(min=0.0))

    @post_load
    def make_section(self, data, **kwargs):
        return PairsConfig(**data)


class OptimizeSchema(StrictSchema):
    beta = fields.Float(load_default=DEFAULT_BETA, validate=POSITIVE_REAL)
    learning_rate = fields.Float(load_default=0.05, validate=POSITIVE_REAL)
    epochs = fields.Int(load_default=20, validate=POSITIVE)
    batch_size = fields.Int(load_default=32, validate=POSITIVE)
    use_odpo = fields.Bool(load_default=True)
    use_sdpo = fields.Bool(load_default=True)
    use_sft = fields.Bool(load_default=True)

    @post_load
    def make_section(self, data, **kwargs):
        return OptimizeConfig(**data)


class EvaluationSchema(StrictSchema):
    step_rewards = fields.Bool(load_default=True)
    n_samples = fields.Int(load_default=DEFAULT_N_SAMPLES, validate=POSITIVE)

    @post_load
    def make_section(self, data, **kwargs):
        return EvaluationConfig(**data)


class RunConfigSchema(StrictSchema):
    env = fields.Str(required=True, validate=validate.OneOf(ENV_IDS))
    seed = fields.Int(required=True, validate=validate.Range(min=0))
    output_dir = fields.Str(allow_none=True, load_default=None)
    iterations = fields.Int(load_default=DEFAULT_ITERATIONS, validate=POSITIVE)
    data = fields.Nested(DataSchema, load_default=DataConfig)
    policy = fields.Nested(PolicySchema, load_default=PolicyConfig)
    sft = fields.Nested(SFTSectionSchema, load_default=SFTSection)
    scoring = fields.Nested(ScoringSchema, load_default=ScoringConfig)
    pairs = fields.Nested(PairsSchema, load_default=PairsConfig)
    optimize = fields.Nested(OptimizeSchema, load_default=OptimizeConfig)
    evaluation = fields.Nested(EvaluationSchema, load_default=EvaluationConfig)

    @post_load
    def make_config(self, data, **kwargs):
        return apply_env_defaults(data)


def apply_env_defaults(data: dict) -> RunConfig:
    """ Fills the dataset sizes, the threshold and the output directory the configuration leaves open. """
    env_class = get_environment_class(data['env'])
    env_defaults = env_class.config_class()
    sizes = {}
    for name in ('train_size', 'test_size', 'unseen_size'):
        value = getattr(data['data'], name)
        sizes[name] = value if value is not None else getattr(env_defaults, name, None)
    if sizes['unseen_size'] is not None and 'unseen' not in env_class.split_names:
        raise ConfigurationError(f'`{data["env"]}` has no unseen split.', key_path='data.unseen_size')
    data['data'] = data['data']._replace(**sizes)
    if data['pairs'].tau is None:
        data['pairs'] = PairsConfig(env_class.default_tau)
    if data['output_dir'] is None:
        data['output_dir'] = os.path.join('runs', f'{data["env"]}-{data["seed"]}')
    return RunConfig(**data)


def _flatten(messages, path: Tuple[str, ...] = ()) -> Iterator[Tuple[Tuple[str, ...], str]]:
    if isinstance(messages, dict):
        for key, value in messages.items():
            yield from _flatten(value, path if key == '_schema' else path + (str(key),))
    elif isinstance(messages, list):
        for message in messages:
            yield from _flatten(message, path)
    else:
        yield path, str(messages)


def _known_keys(path: Tuple[str, ...]) -> List[str]:
    schema = RunConfigSchema()
    for key in path[:-1]:
        field = schema.fields.get(key)
        if not isinstance(field, fields.Nested):
            return []
        schema = field.schema
    return sorted(schema.fields)


def configuration_error(exc: ValidationError) -> ConfigurationError:
    """ Turns a schema validation error into a :exc:`ConfigurationError` naming every offending key. """
    errors = []
    first_path, first_suggestion = None, None
    for path, message in _flatten(exc.messages):
        key_path = '.'.join(path)
        suggestion = None
        detail = f'{key_path}: {message}' if key_path else message
        if message == 'Unknown field.' and path:
            matches = difflib.get_close_matches(path[-1], _known_keys(path), n=1, cutoff=0.5)
            if matches:
                suggestion = matches[0]
                detail = f'{detail} Did you mean "{suggestion}"?'
        errors.append({'detail': detail, 'key_path': key_path})
        if first_path is None:
            first_path, first_suggestion = key_path, suggestion
    return ConfigurationError(
        'Invalid configuration.', errors=errors, key_path=first_path, suggestion=first_suggestion,
    )


def load_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError('The configuration must be a mapping of sections.')
    try:
        return RunConfigSchema().load(raw)
    except ValidationError as exc:
        raise configuration_error(exc)


def parse_config(path: str) -> RunConfig:
    """
    Reads and validates a configuration file.

    :raises: :exc:`ConfigurationError` with the dotted key path of the first invalid key.
    """
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except OSError:
        raise ConfigurationError(f'Cannot read configuration file `{path}`.')
    except yaml.YAMLError as exc:
        logger.debug('Could not parse %s.', path, exc_info=True)
        raise ConfigurationError(f'`{path}` is not valid YAML: {exc}.')
    return load_config(raw if raw is not None else {})


def config_to_dict(config: RunConfig) -> dict:
    return RunConfigSchema().dump(config)


def render_config(config: RunConfig) -> str:
    """ YAML with every value explicit, so parsing it back gives an equal configuration. """
    return yaml.safe_dump(config_to_dict(config), sort_keys=True, default_flow_style=False)


def config_hash(config: RunConfig) -> str:
    """ Hash of the settings a run's results depend on, the output directory left out. """
    return sha256_bytes(render_config(config._replace(output_dir='')).encode('utf-8'))
