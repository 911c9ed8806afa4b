"""
Mixture trajectory optimization: outcome-level DPO over trajectory pairs,
step-level DPO over step pairs sharing a prefix, and an SFT term on the winning
trajectories, summed with unit weights.

For a pair with policy log-probabilities ``lw``, ``ll`` and the same under the
reference, both DPO terms evaluate ``softplus(-beta * ((lw - ll) - (ref_w - ref_l)))``,
which equals ``ln 2`` exactly while the policy is the reference.
"""
import logging
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from steprefine.batching import ShuffledBatcher, parallel_batches
from steprefine.constants import DEFAULT_BETA
from steprefine.core import BaseEnvironment, HistoryPrefix
from steprefine.exceptions import ContractViolation
from steprefine.pairs import ContrastiveStepPair, ContrastiveTrajPair
from steprefine.policy import (
    DecisionPoint, Featurizer, PolicyParams, check_params, sequence_gradient, sequence_logprob, trace,
)
from steprefine.sft import descend_epoch, traced_sft_gradient, traced_sft_loss

logger = logging.getLogger(__name__)


class MixtureConfig(NamedTuple):
    beta: float = DEFAULT_BETA
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    use_odpo: bool = True
    use_sdpo: bool = True
    use_sft: bool = True
    max_halvings: int = 8


class LossBreakdown(NamedTuple):
    odpo: float
    sdpo: float
    sft: float
    total: float


class EpochLosses(NamedTuple):
    epoch: int
    odpo: float
    sdpo: float
    sft: float
    total: float


class MixtureResult(NamedTuple):
    params: PolicyParams
    history: List[EpochLosses]


class TracedPair(NamedTuple):
    win: List[DecisionPoint]
    lose: List[DecisionPoint]
    #: ``log π_ref(win) - log π_ref(lose)``, fixed for the whole iteration.
    ref_gap: float


def _traced_pair(weights: np.ndarray, win: List[DecisionPoint], lose: List[DecisionPoint]) -> TracedPair:
    return TracedPair(win, lose, sequence_logprob(weights, win) - sequence_logprob(weights, lose))


def trace_step_pairs(
    env: BaseEnvironment, featurizer: Featurizer, ref_params: PolicyParams, pairs: Sequence[ContrastiveStepPair],
) -> List[TracedPair]:
    return [
        _traced_pair(
            ref_params.weights,
            trace(env, featurizer, pair.prefix, pair.win_suffix.steps),
            trace(env, featurizer, pair.prefix, pair.lose_suffix.steps),
        )
        for pair in pairs
    ]


def trace_traj_pairs(
    env: BaseEnvironment, featurizer: Featurizer, ref_params: PolicyParams, pairs: Sequence[ContrastiveTrajPair],
) -> List[TracedPair]:
    traced = []
    for pair in pairs:
        start = HistoryPrefix(pair.instruction)
        traced.append(_traced_pair(
            ref_params.weights,
            trace(env, featurizer, start, pair.win_traj.steps),
            trace(env, featurizer, start, pair.lose_traj.steps),
        ))
    return traced


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ContractViolation('The DPO temperature beta must be positive.')


def traced_dpo(weights: np.ndarray, traced: Sequence[TracedPair], beta: float) -> Tuple[float, np.ndarray]:
    """ Mean DPO loss over ``traced`` and its gradient. An empty set contributes ``0``. """
    _check_beta(beta)
    gradient = np.zeros_like(weights)
    if not traced:
        return 0.0, gradient
    loss = 0.0
    for pair in traced:
        z = beta * (sequence_logprob(weights, pair.win) - sequence_logprob(weights, pair.lose) - pair.ref_gap)
        loss += float(np.logaddexp(0.0, -z))
        # d softplus(-z) / dz = -sigmoid(-z)
        weight = -beta * float(np.exp(-np.logaddexp(0.0, z)))
        gradient += weight * (sequence_gradient(weights, pair.win) - sequence_gradient(weights, pair.lose))
    return loss / len(traced), gradient / len(traced)


def traced_mixture_sft(weights: np.ndarray, traced: Sequence[TracedPair]) -> Tuple[float, np.ndarray]:
    """ Negative log-likelihood of the winning trajectories of the trajectory pairs. """
    wins = [pair.win for pair in traced]
    return traced_sft_loss(weights, wins), traced_sft_gradient(weights, wins)


def traced_total(
    weights: np.ndarray, traced_steps: Sequence[TracedPair], traced_trajs: Sequence[TracedPair],
    config: MixtureConfig,
) -> Tuple[LossBreakdown, np.ndarray]:
    """ Sum of the enabled terms, and the sum of their gradients. """
    _check_beta(config.beta)
    zero = (0.0, np.zeros_like(weights))
    odpo, odpo_gradient = traced_dpo(weights, traced_trajs, config.beta) if config.use_odpo else zero
    sdpo, sdpo_gradient = traced_dpo(weights, traced_steps, config.beta) if config.use_sdpo else zero
    sft, sft_gradient = traced_mixture_sft(weights, traced_trajs) if config.use_sft else zero
    breakdown = LossBreakdown(odpo, sdpo, sft, odpo + sdpo + sft)
    return breakdown, odpo_gradient + sdpo_gradient + sft_gradient


def odpo_loss(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, ref_params: PolicyParams,
    traj_pairs: Sequence[ContrastiveTrajPair], beta: float,
) -> float:
    traced = trace_traj_pairs(env, featurizer, ref_params, traj_pairs)
    return traced_dpo(params.weights, traced, beta)[0]


def sdpo_loss(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, ref_params: PolicyParams,
    step_pairs: Sequence[ContrastiveStepPair], beta: float,
) -> float:
    traced = trace_step_pairs(env, featurizer, ref_params, step_pairs)
    return traced_dpo(params.weights, traced, beta)[0]


def mixture_sft_loss(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, traj_pairs: Sequence[ContrastiveTrajPair],
) -> float:
    wins = [trace(env, featurizer, HistoryPrefix(pair.instruction), pair.win_traj.steps) for pair in traj_pairs]
    return traced_sft_loss(params.weights, wins)


def total_loss(
    env: BaseEnvironment, featurizer: Featurizer, params: PolicyParams, ref_params: PolicyParams,
    step_pairs: Sequence[ContrastiveStepPair], traj_pairs: Sequence[ContrastiveTrajPair],
    config: MixtureConfig = MixtureConfig(),
) -> Tuple[LossBreakdown, np.ndarray]:
    return traced_total(
        params.weights,
        trace_step_pairs(env, featurizer, ref_params, step_pairs),
        trace_traj_pairs(env, featurizer, ref_params, traj_pairs),
        config,
    )


def optimize_iteration(
    env: BaseEnvironment,
    featurizer: Featurizer,
    params: PolicyParams,
    ref_params: PolicyParams,
    step_pairs: Sequence[ContrastiveStepPair],
    traj_pairs: Sequence[ContrastiveTrajPair],
    config: MixtureConfig = MixtureConfig(),
    seed: int = 0,
) -> MixtureResult:
    """
    Mini-batch gradient descent on the mixture loss, with the step pairs and the
    trajectory pairs batched side by side. The history starts with the loss at
    ``params`` as epoch ``0``.

    :raises: :exc:`steprefine.exceptions.TrainingAborted` on a non-finite loss.
    """
    check_params(env, params)
    check_params(env, ref_params)
    _check_beta(config.beta)
    if not step_pairs and not traj_pairs:
        logger.warning('Both pair sets are empty, the agent is left unchanged.')
        return MixtureResult(params, [])

    traced_steps = trace_step_pairs(env, featurizer, ref_params, step_pairs)
    traced_trajs = trace_traj_pairs(env, featurizer, ref_params, traj_pairs)
    step_batcher = ShuffledBatcher(traced_steps, config.batch_size, seed=seed, stream='step-pairs')
    traj_batcher = ShuffledBatcher(traced_trajs, config.batch_size, seed=seed, stream='traj-pairs')

    def full_loss(weights: np.ndarray) -> LossBreakdown:
        return traced_total(weights, traced_steps, traced_trajs, config)[0]

    def batch_gradient(weights: np.ndarray, batch) -> np.ndarray:
        return traced_total(weights, batch[0], batch[1], config)[1]

    breakdown = full_loss(params.weights)
    history = [EpochLosses(0, *breakdown)]
    learning_rate = config.learning_rate
    logger.info(
        'Mixture optimization on %s step pairs and %s trajectory pairs, initial loss %.6f.', len(traced_steps),
        len(traced_trajs), breakdown.total,
    )
    for epoch in range(1, config.epochs + 1):
        outcome = descend_epoch(
            params,
            batches=lambda: parallel_batches(step_batcher, traj_batcher, epoch),
            batch_gradient=batch_gradient,
            full_loss=lambda weights: full_loss(weights).total,
            previous_loss=breakdown.total,
            learning_rate=learning_rate,
            max_halvings=config.max_halvings,
            label='Mixture',
        )
        params, _, learning_rate = outcome
        breakdown = full_loss(params.weights)
        history.append(EpochLosses(epoch, *breakdown))
        logger.info(
            'Mixture epoch %s: odpo %.6f, sdpo %.6f, sft %.6f, total %.6f.', epoch, breakdown.odpo, breakdown.sdpo,
            breakdown.sft, breakdown.total,
        )
    return MixtureResult(params, history)
