from typing import List, Optional


class StepRefineException(Exception):
    """ Base error of the package, carrying a list of error representations. """

    #: Used when no ``detail`` is given.
    detail: str = 'Unexpected error.'

    def __init__(self, detail: str = None, errors: List[dict] = None) -> None:
        """
        :param detail: Optional, error detail. If not specified, the class level
                       :attr:`detail` is used.
        :param errors: Optional, list of error representations, used when several
                       errors are reported together.

                       .. code-block:: python

                           from steprefine.utils import serialize_error

                           error1 = ConfigurationError('foo')
                           error2 = ConfigurationError('bar')
                           final = ConfigurationError('final', errors=error1.errors + error2.errors)
                           assert serialize_error(final)['errors'] == [
                               {'detail': 'foo'},
                               {'detail': 'bar'},
                               {'detail': 'final'},
                           ]
        """
        self.detail = detail if detail is not None else self.detail
        super().__init__(self.detail)
        self.errors = errors or []
        self.errors.append({'detail': self.detail})


class ConfigurationError(StepRefineException):
    """ Invalid configuration, unknown task or mismatched environment. """
    detail = 'Invalid configuration.'

    def __init__(
        self, detail: str = None, errors: List[dict] = None,
        key_path: Optional[str] = None, suggestion: Optional[str] = None,
    ) -> None:
        #: Dotted path of the offending configuration key, if any.
        self.key_path = key_path
        #: Closest known key, when the offending key looks like a typo.
        self.suggestion = suggestion
        super().__init__(detail, errors)


class ContractViolation(StepRefineException):
    detail = 'Operation called outside of its contract.'


class DataCorruptionError(StepRefineException):
    detail = 'Stored data could not be replayed.'


class DatasetGenerationError(StepRefineException):
    detail = 'Dataset generation failed.'


class BudgetExceededError(StepRefineException):
    detail = 'Exact enumeration exceeded its node budget.'


class TrainingAborted(StepRefineException):
    """ Raised on a non-finite loss, keeping the last finite parameters around. """
    detail = 'Training aborted on a non-finite loss.'

    def __init__(self, detail: str = None, last_good=None, diagnostics: dict = None) -> None:
        #: The last :class:`steprefine.policy.PolicyParams` with a finite loss.
        self.last_good = last_good
        self.diagnostics = diagnostics or {}
        super().__init__(detail)


class IntegrityError(StepRefineException):
    detail = 'Run directory inputs changed since they were recorded.'


class RunLockedError(StepRefineException):
    detail = 'Run directory is owned by another process.'


class InsufficientDataError(StepRefineException):
    detail = 'Not enough data for the requested operation.'
