"""
A step reward model distilled from scorer labels: linear regression on the
policy features of the prefix through the scored step, trained with MSE.
"""
import logging
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from steprefine.core import BaseEnvironment, HistoryPrefix, Trajectory, prefix_key
from steprefine.exceptions import ContractViolation, InsufficientDataError
from steprefine.fields import densify
from steprefine.policy import Featurizer
from steprefine.scorer import BaseStepScorer, EstimateMethod, StepRewardEstimate
from steprefine.utils import derive_rng

logger = logging.getLogger(__name__)

#: Training refuses dumps covering fewer tasks, the held-out split would be empty.
MIN_TASKS = 10


class ScoredStep(NamedTuple):
    task_id: str
    prefix_hash: str
    #: 1-based index of the scored step.
    step_index: int
    action: str
    value: float
    std_error: float
    method: EstimateMethod
    #: Nonzero features of the prefix through the scored step.
    features: Dict[int, float]


class RewardModel(NamedTuple):
    weights: np.ndarray
    bias: float
    env_id: str

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def predict(self, features: np.ndarray) -> np.ndarray:
        """ Raw regression output, for one feature vector or a matrix of them. """
        return features @ self.weights + self.bias


class RewardModelConfig(NamedTuple):
    learning_rate: float = 0.25
    epochs: int = 300
    held_out_fraction: float = 0.1


class RewardModelResult(NamedTuple):
    model: RewardModel
    train_mse: float
    held_out_mse: float
    #: Train MSE before training and after every epoch.
    history: List[float]


def sparse_features(featurizer: Featurizer, prefix: HistoryPrefix) -> Dict[int, float]:
    vector = featurizer.featurize(prefix)
    return {int(index): float(vector[index]) for index in np.flatnonzero(vector)}


def scored_steps_from_trajectories(
    env: BaseEnvironment, featurizer: Featurizer, scorer: BaseStepScorer, trajectories: Sequence[Trajectory],
) -> List[ScoredStep]:
    """ Scores every step of ``trajectories``, the records of a step reward dump. """
    steps = []
    for trajectory in trajectories:
        for length in range(1, trajectory.length + 1):
            prefix = trajectory.prefix(length)
            estimate = scorer.score(prefix)
            steps.append(ScoredStep(
                task_id=trajectory.instruction.task_id,
                prefix_hash=prefix_key(prefix),
                step_index=length,
                action=trajectory.steps[length - 1].action.text,
                value=estimate.value,
                std_error=estimate.std_error,
                method=estimate.method,
                features=sparse_features(featurizer, prefix),
            ))
    return steps


def mse_loss(weights: np.ndarray, bias: float, features: np.ndarray, labels: np.ndarray) -> float:
    residuals = features @ weights + bias - labels
    return float(np.mean(residuals ** 2))


def mse_gradient(
    weights: np.ndarray, bias: float, features: np.ndarray, labels: np.ndarray,
) -> Tuple[np.ndarray, float]:
    residuals = features @ weights + bias - labels
    scale = 2.0 / len(labels)
    return scale * (features.T @ residuals), scale * float(residuals.sum())


def split_by_task(steps: Sequence[ScoredStep], seed: int, held_out_fraction: float = 0.1) -> Tuple[list, list]:
    """
    Splits scored steps into train and held-out steps, keeping every task on one side.

    :raises: :exc:`InsufficientDataError` with fewer than :data:`MIN_TASKS` tasks.
    """
    tasks = sorted({step.task_id for step in steps})
    if len(tasks) < MIN_TASKS:
        raise InsufficientDataError(
            f'Reward model training needs steps of at least {MIN_TASKS} tasks, got {len(tasks)}.'
        )
    order = derive_rng(seed, 'rm-split').permutation(len(tasks))
    n_held_out = max(1, int(round(held_out_fraction * len(tasks))))
    held_out = {tasks[int(index)] for index in order[:n_held_out]}
    train = [step for step in steps if step.task_id not in held_out]
    return train, [step for step in steps if step.task_id in held_out]


def _design(steps: Sequence[ScoredStep], dim: int) -> Tuple[np.ndarray, np.ndarray]:
    features = np.array([densify(step.features, dim) for step in steps]).reshape(len(steps), dim)
    return features, np.array([step.value for step in steps])


def train_reward_model(
    steps: Sequence[ScoredStep],
    dim: int,
    env_id: str,
    config: RewardModelConfig = RewardModelConfig(),
    seed: int = 0,
) -> RewardModelResult:
    """ Full batch gradient descent on the train MSE, from a zero model. """
    for step in steps:
        if not 0.0 <= step.value <= 1.0:
            raise ContractViolation(f'Step reward label {step.value} of `{step.task_id}` is outside of [0, 1].')
    train, held_out = split_by_task(steps, seed, config.held_out_fraction)
    train_x, train_y = _design(train, dim)
    held_x, held_y = _design(held_out, dim)

    weights, bias = np.zeros(dim), 0.0
    history = [mse_loss(weights, bias, train_x, train_y)]
    for _ in range(config.epochs):
        weights_gradient, bias_gradient = mse_gradient(weights, bias, train_x, train_y)
        weights = weights - config.learning_rate * weights_gradient
        bias = bias - config.learning_rate * bias_gradient
        history.append(mse_loss(weights, bias, train_x, train_y))
    held_out_mse = mse_loss(weights, bias, held_x, held_y)
    logger.info(
        'Reward model trained on %s steps: train MSE %.6f, held-out MSE %.6f over %s steps.', len(train),
        history[-1], held_out_mse, len(held_out),
    )
    return RewardModelResult(RewardModel(weights, float(bias), env_id), history[-1], held_out_mse, history)


def rm_step_reward(model: RewardModel, featurizer: Featurizer, prefix: HistoryPrefix) -> StepRewardEstimate:
    """ Clamped prediction for the last step of ``prefix``. """
    if model.dim != featurizer.dim:
        raise ContractViolation(f'Reward model of dimension {model.dim} does not fit features of {featurizer.dim}.')
    value = float(np.clip(model.predict(featurizer.featurize(prefix)), 0.0, 1.0))
    return StepRewardEstimate(value, 1, 0.0, EstimateMethod.REWARD_MODEL)


class RewardModelScorer(BaseStepScorer):
    """ Replaces scorer rollouts with reward model predictions. """

    method = EstimateMethod.REWARD_MODEL
    exact_terminal = False

    def __init__(self, env: BaseEnvironment, model: RewardModel, featurizer: Featurizer) -> None:
        super().__init__(env)
        if model.env_id != env.env_id:
            raise ContractViolation(f'Reward model of `{model.env_id}` cannot score `{env.env_id}`.')
        self.model = model
        self.featurizer = featurizer

    def estimate(self, prefix: HistoryPrefix, state) -> StepRewardEstimate:
        return rm_step_reward(self.model, self.featurizer, prefix)
