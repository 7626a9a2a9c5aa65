"""Exception types shared across the package."""


class GridSynthError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(GridSynthError):
    """A case file or data file is syntactically malformed."""


class ValidationError(GridSynthError):
    """Inputs are well-formed but violate a documented constraint."""


class SchemaError(GridSynthError):
    """A persisted artifact has the wrong columns, keys, or version."""


class DimensionMismatch(GridSynthError):
    """Array shapes do not agree with the grid they claim to describe."""


class NormNotFrozen(GridSynthError):
    """Normalization stats were used before being frozen."""


class DigestMismatch(GridSynthError):
    """Artifacts built against different grids or norm stats were mixed."""


class SingularJacobian(GridSynthError):
    """The power-flow Jacobian is numerically singular."""


class FeasibilityError(GridSynthError):
    """A solved state violates operating limits."""


class GenerationExhausted(GridSynthError):
    """Scenario sampling hit its attempt budget before filling the dataset."""


class DivergenceError(GridSynthError):
    """Training or sampling produced non-finite numbers."""


class NegativeRadicand(GridSynthError):
    """A sampler variance term left its valid range."""
