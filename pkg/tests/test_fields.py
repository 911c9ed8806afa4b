import numpy as np
import pytest
from marshmallow import Schema, ValidationError

from steprefine.fields import ActionText, SparseVector, TokenSet, densify
from steprefine.toytree import Choose


class RecordSchema(Schema):
    tokens = TokenSet()
    action = ActionText()
    vector = SparseVector()


def test_token_set():
    data = RecordSchema().dump({'tokens': frozenset({'slim', 'cotton'})})
    assert data == {'tokens': ['cotton', 'slim']}
    assert RecordSchema().load({'tokens': ['slim', 'cotton']}) == {'tokens': frozenset({'cotton', 'slim'})}

    with pytest.raises(ValidationError) as exc:
        RecordSchema().load({'tokens': ['a', 'a']})
    assert exc.value.messages == {'tokens': ['Tokens must be unique.']}
    with pytest.raises(ValidationError):
        RecordSchema().load({'tokens': 'cotton'})


def test_action_text():
    assert RecordSchema().dump({'action': Choose(2)}) == {'action': 'choose a2'}
    assert RecordSchema().load({'action': 'choose a2'}) == {'action': 'choose a2'}
    with pytest.raises(ValidationError):
        RecordSchema().load({'action': ''})


def test_sparse_vector():
    assert RecordSchema().dump({'vector': np.array([0.0, 0.5, 0.0, 2.0])}) == {'vector': {'1': 0.5, '3': 2.0}}
    assert RecordSchema().dump({'vector': {3: 2, 1: 0.5}}) == {'vector': {'1': 0.5, '3': 2.0}}

    loaded = RecordSchema().load({'vector': {'1': 0.5, '3': 2.0}})['vector']
    assert loaded == {1: 0.5, 3: 2.0}
    assert densify(loaded, 5).tolist() == [0.0, 0.5, 0.0, 2.0, 0.0]

    with pytest.raises(ValidationError):
        RecordSchema().load({'vector': {'x': 1.0}})
    with pytest.raises(ValidationError):
        RecordSchema().load({'vector': [1.0]})
