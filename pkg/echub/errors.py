"""Exceptions raised by echub

Everything derives from EchubError so the command line can turn any
of them into a one-line diagnostic and a nonzero exit status.
"""


class EchubError(Exception):
    """Base class for all echub errors"""


class ShapeError(EchubError):
    """Tensor dimensions do not fit together

    'axes' names the offending axes, eg: ("input.C", "kernel.C")
    """
    def __init__(self, message, axes=()):
        EchubError.__init__(self, message)
        self.axes = tuple(axes)


class ParameterError(EchubError, ValueError):
    pass


class ValidationError(EchubError, ValueError):
    pass


class ContractError(EchubError):
    pass


class ConfigError(EchubError):
    """A configuration value is unusable

    'stage' is the config key or network stage that failed
    """
    def __init__(self, message, stage=None):
        EchubError.__init__(self, message)
        self.stage = stage


class DegenerateBatchError(EchubError):
    pass


class InfeasiblePartitionError(EchubError):
    pass


class UnknownSubjectError(EchubError, LookupError):
    pass


class ConvergenceError(EchubError):
    """An iterative solver stopped before reaching its tolerance"""
    def __init__(self, message, last_iterate=None, residual=None):
        EchubError.__init__(self, message)
        self.last_iterate = last_iterate
        self.residual = residual


class AlignmentError(EchubError):
    pass


class CorpusFormatError(EchubError):
    pass


class CheckpointFormatError(EchubError):
    pass


class SuiteError(EchubError):
    """A run inside a suite failed; 'report' holds what finished before it"""
    def __init__(self, message, report=None):
        EchubError.__init__(self, message)
        self.report = report
