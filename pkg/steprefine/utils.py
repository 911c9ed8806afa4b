import hashlib
import json
import logging
import os
from typing import Iterable, Iterator, List, Union

import numpy as np

from steprefine.exceptions import DataCorruptionError, StepRefineException

logger = logging.getLogger(__name__)

_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3
_MASK_64 = 0xffffffffffffffff


def serialize_error(exc: Exception, stage: str = None) -> dict:
    """
    Serializes an exception to a machine-readable failure record.

    Errors raised by this package keep their ``errors`` list, anything else
    is reported as an internal error without leaking its message.
    """
    if isinstance(exc, StepRefineException):
        errors = exc.errors
    else:
        errors = [{'detail': 'Internal error'}]

    record = {
        'error': exc.__class__.__name__,
        'errors': errors,
    }
    if stage is not None:
        record['stage'] = stage
    return record


def stable_hash(text: str) -> int:
    """ 64-bit FNV-1a of the utf-8 encoding of ``text``, identical across runs and platforms. """
    value = _FNV_OFFSET
    for byte in text.encode('utf-8'):
        value ^= byte
        value = (value * _FNV_PRIME) & _MASK_64
    return value


def derive_rng(root_seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """
    Derives an independent random stream from ``root_seed`` and a tuple of keys.
    String keys are hashed with :func:`stable_hash`, so the stream only depends
    on the key values and never on the order streams are requested in.
    """
    entropy = [int(root_seed)]
    for key in keys:
        if isinstance(key, str):
            key = stable_hash(key)
        entropy.append(int(key) & _MASK_64)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def dumps_record(record: dict) -> str:
    """ Canonical single-line JSON: sorted keys, so equal records give equal bytes. """
    return json.dumps(record, sort_keys=True, allow_nan=False)


def atomic_write(path: str, data: Union[str, bytes]) -> None:
    """ Writes through a temporary file, so readers never observe a half written file. """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f'{path}.tmp'
    mode = 'wb' if isinstance(data, bytes) else 'w'
    with open(tmp_path, mode) as f:
        f.write(data)
    os.replace(tmp_path, path)


def write_jsonl(path: str, records: Iterable[dict]) -> None:
    atomic_write(path, ''.join(dumps_record(record) + '\n' for record in records))


def append_jsonl(path: str, record: dict) -> None:
    with open(path, 'a') as f:
        f.write(dumps_record(record) + '\n')


def iter_jsonl(path: str) -> Iterator[dict]:
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                logger.debug('Could not decode line %s of %s.', line_number, path, exc_info=True)
                raise DataCorruptionError(f'Line {line_number} of `{path}` is not valid JSON.')


def read_jsonl(path: str) -> List[dict]:
    return list(iter_jsonl(path))
