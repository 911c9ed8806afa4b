import pytest

from steprefine.batching import BaseBatcher, ShuffledBatcher, parallel_batches
from steprefine.exceptions import ContractViolation


class InOrderBatcher(BaseBatcher):
    def epoch_order(self, epoch):
        return list(range(len(self.data)))


def test_batches_follow_epoch_order():
    batcher = InOrderBatcher(list('abcde'), batch_size=2)
    assert batcher.n_batches == 3
    batches = list(batcher.batches(epoch=0))
    assert [batch.index for batch in batches] == [0, 1, 2]
    assert [batch.data for batch in batches] == [['a', 'b'], ['c', 'd'], ['e']]
    assert InOrderBatcher([]).n_batches == 0
    assert InOrderBatcher(list(range(40))).n_batches == 2


def test_batch_size_must_be_positive():
    with pytest.raises(ContractViolation):
        InOrderBatcher([1, 2], batch_size=0)


def test_epoch_order_not_implemented():
    with pytest.raises(NotImplementedError):
        list(BaseBatcher([1, 2]).batches(epoch=0))


def test_shuffled_batcher():
    data = list(range(10))
    batcher = ShuffledBatcher(data, batch_size=3, seed=11, stream='sft')
    epoch_0 = [item for batch in batcher.batches(0) for item in batch.data]
    assert sorted(epoch_0) == data

    again = ShuffledBatcher(data, batch_size=3, seed=11, stream='sft')
    assert [item for batch in again.batches(0) for item in batch.data] == epoch_0

    orders = {tuple(batcher.epoch_order(epoch)) for epoch in range(5)}
    assert len(orders) > 1
    other_stream = ShuffledBatcher(data, batch_size=3, seed=11, stream='dpo')
    other_seed = ShuffledBatcher(data, batch_size=3, seed=12, stream='sft')
    assert (
        list(other_stream.epoch_order(0)) != list(batcher.epoch_order(0))
        or list(other_seed.epoch_order(0)) != list(batcher.epoch_order(0))
    )


def test_parallel_batches_cycles_the_smaller_dataset():
    first = InOrderBatcher(list('abcde'), batch_size=2)
    second = InOrderBatcher([1], batch_size=2)
    assert list(parallel_batches(first, second, epoch=0)) == [
        (['a', 'b'], [1]),
        (['c', 'd'], [1]),
        (['e'], [1]),
    ]


def test_parallel_batches_with_empty_dataset():
    first = InOrderBatcher([], batch_size=2)
    second = InOrderBatcher([1, 2, 3], batch_size=2)
    assert list(parallel_batches(first, second, epoch=0)) == [([], [1, 2]), ([], [3])]
    assert list(parallel_batches(first, InOrderBatcher([]), epoch=0)) == []
