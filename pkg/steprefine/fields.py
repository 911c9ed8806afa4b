from typing import Dict

import numpy as np
from marshmallow import ValidationError, fields


class TokenSet(fields.Field):
    """
    A set of categorical tokens. Dumped as a sorted list, so that equal sets
    always serialize to the same bytes, and loaded back as a ``frozenset``.
    """

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return None
        return sorted(value)

    def _deserialize(self, value, attr, data, **kwargs):
        if not isinstance(value, (list, tuple)) or not all(isinstance(token, str) for token in value):
            raise ValidationError('Expected a list of strings.')
        if len(set(value)) != len(value):
            raise ValidationError('Tokens must be unique.')
        return frozenset(value)


class ActionText(fields.Field):
    """
    An environment action, stored as its canonical text rendering.

    Loading returns the text unchanged: turning it back into an action needs the
    environment, which the enclosing schema resolves in its ``post_load``.
    """

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return None
        return value.text

    def _deserialize(self, value, attr, data, **kwargs):
        if not isinstance(value, str) or not value:
            raise ValidationError('Expected a non-empty action rendering.')
        return value


class SparseVector(fields.Field):
    """
    A dense numpy vector, or a mapping of its non-zero entries, stored as ``{index: value}``.
    Loading returns the mapping, the vector dimension is a property of whoever consumes it.
    """

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return None
        if isinstance(value, dict):
            return {str(int(index)): float(entry) for index, entry in sorted(value.items())}
        vector = np.asarray(value, dtype=np.float64)
        return {str(int(index)): float(vector[index]) for index in np.flatnonzero(vector)}

    def _deserialize(self, value, attr, data, **kwargs) -> Dict[int, float]:
        if not isinstance(value, dict):
            raise ValidationError('Expected a mapping of index to value.')
        try:
            return {int(index): float(entry) for index, entry in value.items()}
        except (TypeError, ValueError):
            raise ValidationError('Sparse vector entries must be numeric.')


def densify(sparse: Dict[int, float], dim: int) -> np.ndarray:
    """ Inverse of :class:`SparseVector` serialization. """
    vector = np.zeros(dim)
    for index, value in sparse.items():
        vector[index] = value
    return vector
