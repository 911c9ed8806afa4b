"""
The learnable agent: a linear softmax policy over hashed features of the history.

Every environment maps its actions to a fixed number of slots, the policy holds
one weight column per slot and scores the legal actions of a state only:
illegal actions get probability exactly ``0`` and no gradient.

Losses never featurize on the fly. A (prefix, suffix) pair is traced once into
:class:`DecisionPoint` objects, which carry everything the log-probability and
its gradient need.
"""
import logging
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from steprefine.constants import DEFAULT_FEATURE_DIM, FEATURE_COUNT_CLIP
from steprefine.core import BaseEnvironment, BasePolicy, HistoryPrefix, Step, TrajectorySuffix
from steprefine.exceptions import ContractViolation, DataCorruptionError
from steprefine.utils import stable_hash

logger = logging.getLogger(__name__)

#: Step indices at or above this value share a bucket.
STEP_BUCKETS = 12


class Featurizer:
    """
    Hashed bag of tokens of a history prefix: the instruction tokens, the tokens of
    the last two observations (the reset observation counts as the first), a step
    bucket and a bias. Counts are clipped, then the vector is L2 normalized.
    """

    def __init__(self, env: BaseEnvironment, dim: int = DEFAULT_FEATURE_DIM) -> None:
        if dim < 1:
            raise ContractViolation('Feature dimension must be positive.')
        self.env = env
        self.dim = dim
        self._buckets = {}  # type: Dict[str, int]

    def tokens(self, prefix: HistoryPrefix) -> List[str]:
        env = self.env
        instruction = prefix.instruction
        observations = [env.initial_observation(instruction)] + [step.observation for step in prefix.steps[-2:]]
        current, previous = observations[-1], observations[-2] if len(observations) > 1 else None

        tokens = ['bias', f'step:{min(prefix.length, STEP_BUCKETS)}']
        tokens.extend(f'ins:{token}' for token in env.instruction_tokens(instruction))
        tokens.extend(f'cur:{token}' for token in env.observation_tokens(instruction, current))
        if previous is not None:
            tokens.extend(f'prev:{token}' for token in env.observation_tokens(instruction, previous))
        return tokens

    def bucket(self, token: str) -> int:
        index = self._buckets.get(token)
        if index is None:
            index = stable_hash(token) % self.dim
            self._buckets[token] = index
        return index

    def featurize(self, prefix: HistoryPrefix) -> np.ndarray:
        counts = np.zeros(self.dim)
        for token in self.tokens(prefix):
            counts[self.bucket(token)] += 1.0
        np.minimum(counts, FEATURE_COUNT_CLIP, out=counts)
        return counts / np.linalg.norm(counts)


class PolicyParams(NamedTuple):
    """ Weights of shape ``(feature dim, n_actions)``, the environment they belong to, and a version counter. """
    weights: np.ndarray
    env_id: str
    version: int = 0

    @classmethod
    def zeros(cls, env: BaseEnvironment, dim: int = DEFAULT_FEATURE_DIM) -> 'PolicyParams':
        return cls(np.zeros((dim, env.n_actions)), env.env_id)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def updated(self, weights: np.ndarray) -> 'PolicyParams':
        """ New params after an optimizer step. """
        if not np.all(np.isfinite(weights)):
            raise ContractViolation('Policy weights must be finite.')
        return PolicyParams(weights, self.env_id, self.version + 1)

    def snapshot(self) -> 'PolicyParams':
        """ A frozen copy, e.g. the reference or the scorer policy. """
        weights = self.weights.copy()
        weights.setflags(write=False)
        return PolicyParams(weights, self.env_id, self.version)


class DecisionPoint(NamedTuple):
    features: np.ndarray
    #: Slots of the legal actions, in legal action order.
    slots: np.ndarray
    #: Index of the taken action within :attr:`slots`.
    chosen: int


def check_params(env: BaseEnvironment, params: PolicyParams) -> None:
    if params.env_id != env.env_id or params.weights.shape[1] != env.n_actions:
        raise ContractViolation(
            f'Params of `{params.env_id}` with shape {params.weights.shape} do not fit `{env.env_id}` '
            f'with {env.n_actions} actions.'
        )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def decision_logits(weights: np.ndarray, point: DecisionPoint) -> np.ndarray:
    return point.features @ weights[:, point.slots]


def trace(
    env: BaseEnvironment, featurizer: Featurizer, prefix: HistoryPrefix, steps: Sequence[Step],
) -> List[DecisionPoint]:
    """
    Replays ``prefix``, then follows ``steps`` and records one decision point per step.

    :raises: :exc:`DataCorruptionError` if a stored action is illegal at its step or
             a stored observation differs from the one the environment emits.
    """
    state = env.replay(prefix)
    current = prefix
    points = []
    for index, step in enumerate(steps):
        legal = env.legal_actions(state)
        if step.action not in legal:
            raise DataCorruptionError(
                f'Action `{step.action.text}` is not legal at step {current.length + 1} '
                f'of `{prefix.instruction.task_id}`.'
            )
        slots = np.array([env.action_slot(state, action) for action in legal], dtype=np.int64)
        points.append(DecisionPoint(featurizer.featurize(current), slots, legal.index(step.action)))
        result = env.step(state, step.action)
        if result.observation != step.observation:
            raise DataCorruptionError(
                f'Stored observation of step {current.length + 1} of `{prefix.instruction.task_id}` does not replay.'
            )
        state = result.state
        current = current.extend(step)
    return points


def sequence_logprob(weights: np.ndarray, points: Sequence[DecisionPoint]) -> float:
    return float(sum(log_softmax(decision_logits(weights, point))[point.chosen] for point in points))


def sequence_gradient(weights: np.ndarray, points: Sequence[DecisionPoint]) -> np.ndarray:
    """ Gradient of :func:`sequence_logprob`: ``features ⊗ (onehot(chosen) - π)`` on the legal columns. """
    gradient = np.zeros_like(weights)
    for point in points:
        residual = -np.exp(log_softmax(decision_logits(weights, point)))
        residual[point.chosen] += 1.0
        gradient[:, point.slots] += np.outer(point.features, residual)
    return gradient


def action_logprobs(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, prefix: HistoryPrefix,
    legal: Optional[Sequence[Any]] = None,
) -> Dict[Any, float]:
    """
    Log-probabilities of the legal actions after ``prefix``. ``legal`` defaults to
    the environment's legal actions in the state the prefix reaches.
    """
    state = env.replay(prefix)
    if legal is None:
        legal = env.legal_actions(state)
    if not legal:
        raise ContractViolation('Cannot compute action probabilities over an empty legal set.')
    slots = np.array([env.action_slot(state, action) for action in legal], dtype=np.int64)
    point = DecisionPoint(featurizer.featurize(prefix), slots, 0)
    logprobs = log_softmax(decision_logits(params.weights, point))
    return {action: float(logprob) for action, logprob in zip(legal, logprobs)}


def trajectory_logprob(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, prefix: HistoryPrefix,
    suffix: TrajectorySuffix,
) -> float:
    """ ``log π(suffix | prefix)``, the sum of the step log-probabilities of the suffix actions. """
    return sequence_logprob(params.weights, trace(env, featurizer, prefix, suffix.steps))


def logprob_gradient(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, prefix: HistoryPrefix,
    suffix: TrajectorySuffix,
) -> np.ndarray:
    return sequence_gradient(params.weights, trace(env, featurizer, prefix, suffix.steps))


class LinearPolicy(BasePolicy):
    """ Drives rollouts with a :class:`PolicyParams`. """

    def __init__(self, params: PolicyParams, featurizer: Featurizer) -> None:
        check_params(featurizer.env, params)
        self.params = params
        self.featurizer = featurizer

    def action_logits(self, env, state, prefix, legal):
        slots = np.array([env.action_slot(state, action) for action in legal], dtype=np.int64)
        return self.featurizer.featurize(prefix) @ self.params.weights[:, slots]


def describe_params(params: PolicyParams) -> dict:
    """ Summary printed by ``policy inspect``. """
    column_norms = np.linalg.norm(params.weights, axis=0)
    return {
        'env_id': params.env_id,
        'version': params.version,
        'shape': list(params.weights.shape),
        'frobenius_norm': float(np.linalg.norm(params.weights)),
        'max_abs_weight': float(np.max(np.abs(params.weights))) if params.weights.size else 0.0,
        'column_norms': [round(float(norm), 6) for norm in column_norms],
    }
