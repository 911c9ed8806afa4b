from steprefine.exceptions import (
    BudgetExceededError, ConfigurationError, IntegrityError, StepRefineException, TrainingAborted,
)


def test_default_detail():
    exc = BudgetExceededError()
    assert exc.detail == 'Exact enumeration exceeded its node budget.'
    assert exc.errors == [{'detail': 'Exact enumeration exceeded its node budget.'}]
    assert str(exc) == exc.detail

    exc = BudgetExceededError(detail='Too many nodes.')
    assert exc.detail == 'Too many nodes.'
    assert isinstance(exc, StepRefineException)


def test_configuration_error():
    exc = ConfigurationError('Unknown field.', key_path='pairs.tua', suggestion='tau')
    assert exc.key_path == 'pairs.tua'
    assert exc.suggestion == 'tau'

    exc = ConfigurationError()
    assert exc.key_path is None
    assert exc.detail == 'Invalid configuration.'


def test_training_aborted():
    exc = TrainingAborted(last_good='params', diagnostics={'loss': 'nan'})
    assert exc.last_good == 'params'
    assert exc.diagnostics == {'loss': 'nan'}
    assert exc.detail == 'Training aborted on a non-finite loss.'
    assert TrainingAborted().diagnostics == {}


def test_errors_are_collected():
    errors = [{'detail': 'a.ckpt is missing.', 'path': 'a.ckpt'}]
    exc = IntegrityError('Refusing to resume.', errors=errors)
    assert exc.errors == [{'detail': 'a.ckpt is missing.', 'path': 'a.ckpt'}, {'detail': 'Refusing to resume.'}]
