"""Exception hierarchy with stable CLI exit codes."""


class SregameError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SregameError):
    """Malformed or inconsistent scenario configuration."""

    exit_code = 2


class DimensionMismatch(SregameError):
    """A coefficient shape disagrees with the declared (n, m1, m2, l)."""

    exit_code = 3


class NonPositiveScale(SregameError):
    """Cost rescaling factor must be strictly positive."""

    exit_code = 4


class SingularBlock(SregameError):
    """A diagonal block of the control-weight matrix lost its definiteness margin."""

    exit_code = 5


class MinimaxGapExceeded(SregameError):
    """Sup-inf and inf-sup of the constrained Hamiltonian disagree beyond tolerance."""

    exit_code = 6


class ConeUnsupported(SregameError):
    """No optimizer registered for the requested cone kind."""

    exit_code = 7


class BoundViolation(SregameError):
    """A certified a priori bound failed while the standing assumptions hold."""

    exit_code = 8


class StepRejected(SregameError):
    """An integrator stage produced a non-finite derivative."""

    exit_code = 9


class GridMismatch(SregameError):
    """Solutions passed together were produced on different time grids."""

    exit_code = 10


class RegressionIllConditioned(SregameError):
    """The regression normal matrix exceeds the conditioning threshold."""

    exit_code = 11


class NonFinite(SregameError):
    """Simulation produced a non-finite state or cost."""

    exit_code = 12


class MissingSolution(SregameError):
    """A feedback law was requested without the solutions it needs."""

    exit_code = 13


class SaddleViolation(SregameError):
    """A saddle-point Monte Carlo verdict failed beyond the hard threshold."""

    exit_code = 14


class ConditionRequired(SregameError):
    """A market condition required by the requested constraint regime fails."""

    exit_code = 15


class DegenerateConstants(SregameError):
    """Derived constants are non-finite or otherwise unusable."""

    exit_code = 16


class SignViolation(SregameError):
    """A market quantity broke its guaranteed sign under claimed conditions."""

    exit_code = 17


EXIT_CODES = {
    cls.__name__: cls.exit_code
    for cls in [
        ConfigError, DimensionMismatch, NonPositiveScale, SingularBlock,
        MinimaxGapExceeded, ConeUnsupported, BoundViolation, StepRejected,
        GridMismatch, RegressionIllConditioned, NonFinite, MissingSolution,
        SaddleViolation, ConditionRequired, DegenerateConstants, SignViolation,
    ]
}
