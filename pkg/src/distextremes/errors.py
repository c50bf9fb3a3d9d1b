"""Exception hierarchy.

The CLI maps each family onto an exit code: configuration problems exit with 2,
data problems with 3 and numerical failures with 4.
"""


class DistExtremesError(Exception):
    exit_code = 1


class ConfigError(DistExtremesError, ValueError):
    exit_code = 2


class DataError(DistExtremesError, ValueError):
    exit_code = 3


class NumericalError(DistExtremesError, ArithmeticError):
    exit_code = 4


class ParameterDomainError(ConfigError):
    """A model parameter lies outside its admissible set."""


class SupportError(DataError):
    """An observation or threshold falls outside the GEV support."""

    def __init__(self, message, site=None, value=None):
        super().__init__(message)
        self.site = site
        self.value = value


class DegenerateGeometryError(NumericalError):
    """The Gaussian covariance implied by the sites cannot be factorized."""


class ConvergenceError(NumericalError):
    def __init__(self, message, blocks=()):
        super().__init__(message)
        self.blocks = tuple(blocks)


class NumericalRankError(NumericalError):
    pass


class ProtocolError(DistExtremesError):
    """Malformed or inconsistent message between workers and the reducer."""
