"""
Everything that reads or writes the file system: checkpoints, datasets, pair
and trajectory stores, the run manifest and the run directory lock.
"""
import datetime
import json
import logging
import os
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from steprefine import __version__
from steprefine.constants import CHECKPOINT_MAGIC
from steprefine.core import BaseEnvironment, Instruction, Trajectory
from steprefine.exceptions import ContractViolation, DataCorruptionError, IntegrityError, RunLockedError
from steprefine.meta import get_environment_class
from steprefine.pairs import PairSet
from steprefine.policy import PolicyParams
from steprefine.reward_model import RewardModel, ScoredStep
from steprefine.schema import (
    DatasetSchema, ManifestEntrySchema, ScoredStepSchema, StepPairSchema, TaskSchema, TrajPairSchema,
    TrajectorySchema,
)
from steprefine.utils import append_jsonl, atomic_write, dumps_record, read_jsonl, sha256_file, write_jsonl

logger = logging.getLogger(__name__)

POLICY_KIND = 'policy'
REWARD_MODEL_KIND = 'reward_model'
_DTYPE = '<f8'


class CheckpointHeader(NamedTuple):
    kind: str
    env_id: str
    shape: Tuple[int, ...]
    version: int
    config_hash: str


def save_checkpoint(path: str, array: np.ndarray, header: CheckpointHeader) -> str:
    """
    Writes the magic line, a canonical JSON header line, then the raw little endian
    float64 values. Equal inputs give equal bytes. Returns the sha256 of the file.
    """
    record = {
        'config_hash': header.config_hash,
        'dtype': _DTYPE,
        'env_id': header.env_id,
        'kind': header.kind,
        'shape': list(array.shape),
        'version': header.version,
    }
    body = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
    atomic_write(path, CHECKPOINT_MAGIC + dumps_record(record).encode('utf-8') + b'\n' + body)
    return sha256_file(path)


def load_checkpoint(path: str, kind: str) -> Tuple[CheckpointHeader, np.ndarray]:
    """ :raises: :exc:`DataCorruptionError` on a malformed file or a checkpoint of another kind. """
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataCorruptionError(f'`{path}` is not a checkpoint.')
    header_end = data.find(b'\n', len(CHECKPOINT_MAGIC))
    if header_end < 0:
        raise DataCorruptionError(f'Checkpoint `{path}` has no header.')
    try:
        record = json.loads(data[len(CHECKPOINT_MAGIC):header_end].decode('utf-8'))
        header = CheckpointHeader(
            record['kind'], record['env_id'], tuple(record['shape']), record['version'], record['config_hash'],
        )
    except (ValueError, KeyError):
        raise DataCorruptionError(f'Checkpoint `{path}` has a malformed header.')
    if header.kind != kind:
        raise DataCorruptionError(f'`{path}` holds a `{header.kind}` checkpoint, expected `{kind}`.')
    body = data[header_end + 1:]
    expected = int(np.prod(header.shape)) * 8
    if record.get('dtype') != _DTYPE or len(body) != expected:
        raise DataCorruptionError(f'Checkpoint `{path}` has {len(body)} bytes of values, expected {expected}.')
    array = np.frombuffer(body, dtype=_DTYPE).reshape(header.shape).astype(np.float64)
    return header, array


def save_policy(path: str, params: PolicyParams, config_hash: str = '') -> str:
    header = CheckpointHeader(POLICY_KIND, params.env_id, params.weights.shape, params.version, config_hash)
    return save_checkpoint(path, params.weights, header)


def load_policy(path: str) -> PolicyParams:
    header, weights = load_checkpoint(path, POLICY_KIND)
    if len(header.shape) != 2:
        raise DataCorruptionError(f'Policy checkpoint `{path}` is not a matrix.')
    return PolicyParams(weights, header.env_id, header.version)


def save_reward_model(path: str, model: RewardModel, config_hash: str = '') -> str:
    """ The weights followed by the bias, as one vector. """
    values = np.append(model.weights, model.bias)
    header = CheckpointHeader(REWARD_MODEL_KIND, model.env_id, values.shape, 0, config_hash)
    return save_checkpoint(path, values, header)


def load_reward_model(path: str) -> RewardModel:
    header, values = load_checkpoint(path, REWARD_MODEL_KIND)
    if len(header.shape) != 1 or header.shape[0] < 2:
        raise DataCorruptionError(f'Reward model checkpoint `{path}` is not a vector.')
    return RewardModel(values[:-1].copy(), float(values[-1]), header.env_id)


def write_trajectories(path: str, trajectories: Iterable[Trajectory]) -> None:
    schema = TrajectorySchema()
    write_jsonl(path, (schema.dump(trajectory) for trajectory in trajectories))


def read_trajectories(path: str, env: BaseEnvironment) -> List[Trajectory]:
    schema = TrajectorySchema(env=env)
    return [schema.load_record(record) for record in read_jsonl(path)]


def write_pairs(directory: str, pairs: PairSet) -> Dict[str, str]:
    paths = {
        'step_pairs': os.path.join(directory, 'step_pairs.jsonl'),
        'traj_pairs': os.path.join(directory, 'traj_pairs.jsonl'),
    }
    write_jsonl(paths['step_pairs'], StepPairSchema(many=True).dump(pairs.step_pairs))
    write_jsonl(paths['traj_pairs'], TrajPairSchema(many=True).dump(pairs.traj_pairs))
    return paths


def read_pairs(directory: str, env: BaseEnvironment) -> PairSet:
    step_schema, traj_schema = StepPairSchema(env=env), TrajPairSchema(env=env)
    return PairSet(
        [step_schema.load_record(record) for record in read_jsonl(os.path.join(directory, 'step_pairs.jsonl'))],
        [traj_schema.load_record(record) for record in read_jsonl(os.path.join(directory, 'traj_pairs.jsonl'))],
    )


def write_scored_steps(path: str, steps: Iterable[ScoredStep]) -> None:
    schema = ScoredStepSchema()
    write_jsonl(path, (schema.dump(step) for step in steps))


def read_scored_steps(path: str) -> List[ScoredStep]:
    schema = ScoredStepSchema()
    return [schema.load_record(record) for record in read_jsonl(path)]


def write_record(path: str, record: dict) -> None:
    """ A single canonical JSON record, e.g. ``baseline.json`` or ``failure.json``. """
    atomic_write(path, dumps_record(record) + '\n')


class Dataset(NamedTuple):
    env: BaseEnvironment
    splits: Dict[str, List[Instruction]]
    #: Expert trajectories of the train split, in task id order.
    experts: List[Trajectory]
    seed: int
    config: dict


ENV_FILE = 'env.json'
EXPERTS_FILE = 'experts.jsonl'


def save_dataset(
    directory: str, env: BaseEnvironment, splits: Dict[str, List[Instruction]], seed: int, config: NamedTuple,
) -> List[str]:
    """
    Writes the environment assets, one task file per split, and the expert
    trajectories of the train split. Returns the written paths, ``env.json`` last.
    """
    os.makedirs(directory, exist_ok=True)
    written = []
    asset_files = {}
    for name, records in sorted(env.assets().items()):
        asset_files[name] = f'{name}.jsonl'
        write_jsonl(os.path.join(directory, asset_files[name]), records)
        written.append(os.path.join(directory, asset_files[name]))

    split_files = {}
    task_schema = TaskSchema()
    for name, instructions in splits.items():
        split_files[name] = f'{name}.jsonl'
        ordered = sorted(instructions, key=lambda instruction: instruction.task_id)
        write_jsonl(os.path.join(directory, split_files[name]), task_schema.dump(ordered, many=True))
        written.append(os.path.join(directory, split_files[name]))

    experts = [env.expert_trajectory(instruction) for instruction in sorted(
        splits['train'], key=lambda instruction: instruction.task_id,
    )]
    write_trajectories(os.path.join(directory, EXPERTS_FILE), experts)
    written.append(os.path.join(directory, EXPERTS_FILE))

    record = DatasetSchema().dump({
        'env_id': env.env_id,
        'seed': seed,
        'config': dict(config._asdict()),
        'splits': split_files,
        'assets': asset_files,
        'experts': EXPERTS_FILE,
    })
    write_record(os.path.join(directory, ENV_FILE), record)
    written.append(os.path.join(directory, ENV_FILE))
    logger.info('Saved %s dataset with splits %s to %s.', env.env_id, sorted(split_files), directory)
    return written


def load_dataset(directory: str) -> Dataset:
    """
    Rebuilds the environment of a dataset directory and its splits and experts.

    :raises: :exc:`DataCorruptionError` if a file is malformed or an expert does not replay.
    """
    env_path = os.path.join(directory, ENV_FILE)
    if not os.path.exists(env_path):
        raise DataCorruptionError(f'`{directory}` is not a dataset directory, `{ENV_FILE}` is missing.')
    info = DatasetSchema().load_record(read_jsonl(env_path)[0])
    env_class = get_environment_class(info['env_id'])
    try:
        config = env_class.config_class(**info['config'])
    except TypeError:
        raise DataCorruptionError(f'Dataset configuration of `{directory}` does not fit `{info["env_id"]}`.')

    task_schema = TaskSchema()
    splits = {
        name: [task_schema.load_record(record) for record in read_jsonl(os.path.join(directory, filename))]
        for name, filename in sorted(info['splits'].items())
    }
    if 'train' not in splits:
        raise DataCorruptionError(f'Dataset `{directory}` has no train split.')
    assets = {name: read_jsonl(os.path.join(directory, filename)) for name, filename in info['assets'].items()}
    instructions = [instruction for name in sorted(splits) for instruction in splits[name]]
    env = env_class.from_assets(assets, instructions, config)
    experts = read_trajectories(os.path.join(directory, info['experts']), env)
    for expert in experts:
        env.replay(expert.prefix(expert.length))
    return Dataset(env, splits, experts, info['seed'], info['config'])


def dataset_files(directory: str) -> List[str]:
    """ Every file a dataset directory is made of, sorted. """
    info = read_jsonl(os.path.join(directory, ENV_FILE))[0]
    names = list(info['assets'].values()) + list(info['splits'].values()) + [info['experts'], ENV_FILE]
    return sorted(os.path.join(directory, name) for name in names)


class Manifest:
    """
    Append-only ``manifest.jsonl`` of a run directory: one record per input or
    artifact, with its content hash. :meth:`verify` checks that recorded files
    still have their recorded hash.
    """

    filename = 'manifest.jsonl'

    def __init__(self, run_dir: str) -> None:
        self.run_dir = run_dir
        self.path = os.path.join(run_dir, self.filename)
        self.schema = ManifestEntrySchema()

    def entries(self) -> List[dict]:
        if not os.path.exists(self.path):
            return []
        return [self.schema.load_record(record) for record in read_jsonl(self.path)]

    def latest(self) -> Dict[str, dict]:
        """ Last entry of every recorded path. """
        return {entry['path']: entry for entry in self.entries()}

    def record(self, kind: str, path: str) -> str:
        relative = os.path.relpath(path, self.run_dir)
        digest = sha256_file(path)
        previous = self.latest().get(relative)
        if previous is not None and previous['sha256'] == digest and previous['kind'] == kind:
            return digest
        append_jsonl(self.path, self.schema.dump({
            'kind': kind,
            'path': relative,
            'sha256': digest,
            'tool_version': __version__,
            'recorded_at': datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds'),
        }))
        logger.debug('Recorded %s `%s` with hash %s.', kind, relative, digest)
        return digest

    def verify(self, paths: Optional[Sequence[str]] = None) -> None:
        """
        :param paths: Optional, only verify these paths. Defaults to every recorded path.
        :raises: :exc:`IntegrityError` listing every missing or changed file.
        """
        latest = self.latest()
        if paths is not None:
            wanted = {os.path.relpath(path, self.run_dir) for path in paths}
            latest = {path: entry for path, entry in latest.items() if path in wanted}
        errors = []
        for relative, entry in sorted(latest.items()):
            path = os.path.join(self.run_dir, relative)
            if not os.path.exists(path):
                errors.append({'detail': f'`{relative}` is missing.', 'path': relative})
            elif sha256_file(path) != entry['sha256']:
                errors.append({'detail': f'`{relative}` changed since it was recorded.', 'path': relative})
        if errors:
            raise IntegrityError('Run directory inputs changed, refusing to resume.', errors=errors)


def _process_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunLock:
    """
    Single process ownership of a run directory, through a ``.lock`` file holding
    the owner's PID. A lock whose owner is gone is taken over.

    .. code-block:: python

        with RunLock(run_dir):
            ...
    """

    filename = '.lock'

    def __init__(self, run_dir: str) -> None:
        self.path = os.path.join(run_dir, self.filename)
        self.pid = os.getpid()

    def acquire(self) -> None:
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            owner = self._owner()
            if owner is not None and owner != self.pid and _process_alive(owner):
                raise RunLockedError(f'Run directory is locked by process {owner}.')
            logger.warning('Taking over the stale lock of process %s.', owner)
            atomic_write(self.path, f'{self.pid}\n')
            return
        with os.fdopen(fd, 'w') as f:
            f.write(f'{self.pid}\n')

    def _owner(self) -> Optional[int]:
        try:
            with open(self.path) as f:
                return int(f.read().strip())
        except (OSError, ValueError):
            return None

    def release(self) -> None:
        if self._owner() == self.pid:
            os.remove(self.path)

    def __enter__(self) -> 'RunLock':
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.release()


def check_env(env: BaseEnvironment, env_id: str, what: str) -> None:
    if env.env_id != env_id:
        raise ContractViolation(f'{what} belongs to `{env_id}`, the dataset to `{env.env_id}`.')
