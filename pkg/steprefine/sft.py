"""
Behavior cloning on expert trajectories, and the epoch runner shared with the mixture optimizer.
"""
import logging
from typing import Callable, Iterable, List, NamedTuple, Sequence

import numpy as np

from steprefine.batching import ShuffledBatcher
from steprefine.core import BaseEnvironment, HistoryPrefix, Trajectory
from steprefine.exceptions import ContractViolation, TrainingAborted
from steprefine.policy import (
    DecisionPoint, Featurizer, PolicyParams, check_params, decision_logits, sequence_gradient, sequence_logprob,
    trace,
)

logger = logging.getLogger(__name__)

#: An epoch may increase the full loss by this much before its learning rate is halved.
LOSS_INCREASE_TOLERANCE = 1e-6


class SFTConfig(NamedTuple):
    learning_rate: float = 0.1
    epochs: int = 40
    batch_size: int = 32
    tolerance: float = 1e-4
    max_halvings: int = 8


class EpochRecord(NamedTuple):
    epoch: int
    loss: float
    train_action_agreement: float


class SFTResult(NamedTuple):
    params: PolicyParams
    history: List[EpochRecord]


class EpochOutcome(NamedTuple):
    params: PolicyParams
    loss: float
    learning_rate: float


def descend_epoch(
    params: PolicyParams,
    batches: Callable[[], Iterable],
    batch_gradient: Callable[[np.ndarray, object], np.ndarray],
    full_loss: Callable[[np.ndarray], float],
    previous_loss: float,
    learning_rate: float,
    max_halvings: int,
    label: str,
) -> EpochOutcome:
    """
    Runs one epoch of plain gradient descent from ``params``.

    An epoch whose full loss ends above ``previous_loss`` is retried from ``params``
    with half the learning rate, at most ``max_halvings`` times. Every update bumps
    the params version.

    :raises: :exc:`TrainingAborted` with ``params`` as last good params on a non-finite loss.
    """
    for attempt in range(max_halvings + 1):
        weights = params.weights.copy()
        n_updates = 0
        for batch in batches():
            weights = weights - learning_rate * batch_gradient(weights, batch)
            n_updates += 1
        loss = full_loss(weights)
        if not np.isfinite(loss) or not np.all(np.isfinite(weights)):
            raise TrainingAborted(
                f'{label} loss became non-finite.',
                last_good=params,
                diagnostics={'previous_loss': previous_loss, 'learning_rate': learning_rate, 'loss': repr(loss)},
            )
        if loss <= previous_loss + LOSS_INCREASE_TOLERANCE:
            break
        if attempt == max_halvings:
            logger.warning('%s loss still increases after %s halvings, keeping the epoch.', label, max_halvings)
            break
        learning_rate /= 2.0
        logger.warning(
            '%s loss increased from %.6f to %.6f, retrying with learning rate %s.', label, previous_loss, loss,
            learning_rate,
        )
    return EpochOutcome(PolicyParams(weights, params.env_id, params.version + n_updates), float(loss), learning_rate)


def trace_trajectories(
    env: BaseEnvironment, featurizer: Featurizer, dataset: Sequence[Trajectory],
) -> List[List[DecisionPoint]]:
    return [trace(env, featurizer, HistoryPrefix(trajectory.instruction), trajectory.steps) for trajectory in dataset]


def traced_sft_loss(weights: np.ndarray, traced: Sequence[Sequence[DecisionPoint]]) -> float:
    if not traced:
        return 0.0
    return -sum(sequence_logprob(weights, points) for points in traced) / len(traced)


def traced_sft_gradient(weights: np.ndarray, traced: Sequence[Sequence[DecisionPoint]]) -> np.ndarray:
    gradient = np.zeros_like(weights)
    for points in traced:
        gradient -= sequence_gradient(weights, points)
    return gradient / len(traced) if traced else gradient


def sft_loss(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, dataset: Sequence[Trajectory],
) -> float:
    """ Mean negative log-likelihood of the expert trajectories. """
    if not dataset:
        raise ContractViolation('SFT loss needs a non-empty dataset.')
    return traced_sft_loss(params.weights, trace_trajectories(env, featurizer, dataset))


def sft_gradient(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, dataset: Sequence[Trajectory],
) -> np.ndarray:
    if not dataset:
        raise ContractViolation('SFT loss needs a non-empty dataset.')
    return traced_sft_gradient(params.weights, trace_trajectories(env, featurizer, dataset))


def action_agreement(weights: np.ndarray, traced: Sequence[Sequence[DecisionPoint]]) -> float:
    """ Fraction of steps where the greedy action is the stored one. """
    points = [point for trajectory in traced for point in trajectory]
    if not points:
        return 0.0
    hits = sum(int(np.argmax(decision_logits(weights, point))) == point.chosen for point in points)
    return hits / len(points)


def train_sft(
    env: BaseEnvironment,
    featurizer: Featurizer,
    params: PolicyParams,
    dataset: Sequence[Trajectory],
    config: SFTConfig = SFTConfig(),
    seed: int = 0,
) -> SFTResult:
    """
    Mini-batch gradient descent on the SFT loss, stopping once an epoch changes the
    loss by less than ``config.tolerance`` or after ``config.epochs`` epochs.
    The history starts with the loss at initialization as epoch ``0``.
    """
    check_params(env, params)
    if not dataset:
        raise ContractViolation('SFT needs a non-empty dataset.')
    traced = trace_trajectories(env, featurizer, dataset)
    batcher = ShuffledBatcher(traced, config.batch_size, seed=seed, stream='sft')

    loss = traced_sft_loss(params.weights, traced)
    history = [EpochRecord(0, loss, action_agreement(params.weights, traced))]
    learning_rate = config.learning_rate
    logger.info('SFT on %s trajectories, initial loss %.6f.', len(traced), loss)

    for epoch in range(1, config.epochs + 1):
        outcome = descend_epoch(
            params,
            batches=lambda: (batch.data for batch in batcher.batches(epoch)),
            batch_gradient=traced_sft_gradient,
            full_loss=lambda weights: traced_sft_loss(weights, traced),
            previous_loss=loss,
            learning_rate=learning_rate,
            max_halvings=config.max_halvings,
            label='SFT',
        )
        change = abs(loss - outcome.loss)
        params, loss, learning_rate = outcome
        history.append(EpochRecord(epoch, loss, action_agreement(params.weights, traced)))
        logger.info('SFT epoch %s: loss %.6f, agreement %.4f.', epoch, loss, history[-1].train_action_agreement)
        if change < config.tolerance:
            logger.info('SFT converged after %s epochs.', epoch)
            break
    return SFTResult(params, history)
