"""Exception hierarchy shared by all estimation and simulation routines."""


class SpatArchError(Exception):
    """Base class for every error raised by this package."""


class InvalidDimensionError(SpatArchError, ValueError):
    pass


class InvalidWeightsError(SpatArchError, ValueError):
    pass


class NonRealSpectrumError(SpatArchError, ArithmeticError):
    pass


class ParameterSpaceError(SpatArchError, ValueError):
    """A parameter (usually rho) lies outside the admissible region."""


class DegenerateObservationError(SpatArchError, ValueError):
    """An outcome equals zero, so its log-square is undefined."""

    def __init__(self, i, t):
        super().__init__(f"zero outcome at (i={i}, t={t}); log-square undefined")
        self.i = i
        self.t = t


class StationarityError(SpatArchError, ValueError):
    pass


class CollinearityError(SpatArchError, ArithmeticError):
    pass


class BoundarySolutionError(SpatArchError, ArithmeticError):
    pass


class SingularInformationError(SpatArchError, ArithmeticError):
    pass


class UnsupportedSplitError(SpatArchError, ValueError):
    pass


class DegenerateInstrumentsError(SpatArchError, ValueError):
    pass


class EstimationFailure(SpatArchError, RuntimeError):
    """Estimation did not produce a usable solution."""


class EmptyReportError(SpatArchError, ValueError):
    pass


class ConfigError(SpatArchError, ValueError):
    pass
