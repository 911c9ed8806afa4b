import logging
import math
from typing import Iterator, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from steprefine.exceptions import ContractViolation
from steprefine.utils import derive_rng

logger = logging.getLogger(__name__)


class MiniBatch(NamedTuple):
    """ One slice of a dataset, as handed to a gradient step. """
    #: Position of the batch within its epoch
    index: int
    #: Sequence of items of the batch
    data: Sequence


class BaseBatcher:
    """
    Base class splitting a dataset into mini-batches, one epoch at a time.
    This class is agnostic about the order in which items are visited, and can
    be subclassed to accommodate for any variant.

    Implementation will require overriding :meth:`epoch_order`.
    """
    #: The default batch size.
    #: Used if no batch size is given.
    default_batch_size = 32

    def __init__(self, data: Sequence, batch_size: Optional[int] = None) -> None:
        #: Data before batching
        self.data = data
        self.batch_size = batch_size if batch_size is not None else self.default_batch_size
        if self.batch_size < 1:
            raise ContractViolation('Batch size must be positive.')

    @property
    def n_batches(self) -> int:
        return math.ceil(len(self.data) / self.batch_size)

    def epoch_order(self, epoch: int) -> np.ndarray:
        """ Indices of :attr:`data` in visiting order for ``epoch``. Should be implemented in subclasses. """
        raise NotImplementedError()

    def slice_data(self, epoch: int, index: int) -> Sequence:
        """ Items of batch ``index`` of ``epoch``. """
        order = self.epoch_order(epoch)
        positions = order[index * self.batch_size:(index + 1) * self.batch_size]
        return [self.data[int(position)] for position in positions]

    def batches(self, epoch: int) -> Iterator[MiniBatch]:
        for index in range(self.n_batches):
            yield MiniBatch(index=index, data=self.slice_data(epoch, index))


class ShuffledBatcher(BaseBatcher):
    """ Visits items in an order drawn from ``(seed, epoch)``, so reruns see the same batches. """

    def __init__(self, data: Sequence, batch_size: Optional[int] = None, seed: int = 0, stream: str = '') -> None:
        super().__init__(data, batch_size)
        self.seed = seed
        self.stream = stream
        self._orders = {}  # type: dict

    def epoch_order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            self._orders[epoch] = derive_rng(self.seed, 'batches', self.stream, epoch).permutation(len(self.data))
        return self._orders[epoch]


def parallel_batches(first: BaseBatcher, second: BaseBatcher, epoch: int) -> Iterator[Tuple[Sequence, Sequence]]:
    """
    Walks two datasets side by side. An epoch has as many updates as the larger
    dataset has batches, the smaller dataset is cycled; an empty dataset yields empty slices.
    """
    n_updates = max(first.n_batches, second.n_batches)
    for index in range(n_updates):
        yield (
            first.slice_data(epoch, index % first.n_batches) if first.n_batches else [],
            second.slice_data(epoch, index % second.n_batches) if second.n_batches else [],
        )
