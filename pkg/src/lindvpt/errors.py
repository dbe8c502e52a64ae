"""Exception types raised across the package."""


class LindVPTError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(LindVPTError, ValueError):
    pass


class SingularMatrix(LindVPTError, ArithmeticError):
    pass


class BreakdownZeroPivot(SingularMatrix):
    """Incomplete factorization hit a zero pivot even after a diagonal shift."""


class EmptyInput(LindVPTError, ValueError):
    pass


class NonTracePreservingDirection(LindVPTError, ValueError):
    pass


class ReducedSystemSingular(LindVPTError, ArithmeticError):
    pass


class NonConvergentPoint(LindVPTError):
    """A grid point failed to converge even when used as its own base point."""

    def __init__(self, message, index=None, residual=None):
        super().__init__(message)
        self.index = index
        self.residual = residual


class MissingDeltaGrid(LindVPTError, ValueError):
    pass


class TruncationTooSmall(LindVPTError, ValueError):
    pass


class SeriesNonConvergent(LindVPTError, ArithmeticError):
    pass


class ZeroDrive(LindVPTError, ValueError):
    pass


class LatticeTooLarge(LindVPTError, ValueError):
    pass


class NonCommutingSymmetry(LindVPTError, ValueError):
    pass


class SectorMissingSteadyState(LindVPTError, ValueError):
    pass


class DegenerateKernel(LindVPTError, ArithmeticError):
    pass


class DivergingSeries(LindVPTError, ArithmeticError):
    pass


class IterativeNonConvergence(LindVPTError, ArithmeticError):
    pass


class ConfigError(LindVPTError, ValueError):
    pass


class OracleTooLarge(LindVPTError, ValueError):
    pass
