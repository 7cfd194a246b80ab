"""Exception types shared across the library.

Errors split into two families: input/validation problems (bad generators,
mismatched grids, malformed configs) and numerical failures (non-convergent
solves, singular systems).  The CLI maps the first family to exit code 1 and
the second to exit code 2.
"""


class MmldpError(Exception):
    """Base class for all library errors."""


# -- validation ---------------------------------------------------------------

class NonSquareError(MmldpError):
    """Generator matrix is not square (or has fewer than two states)."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        super().__init__(f"generator matrix must be square with d >= 2, got shape {self.shape}")


class RowSumNonzeroError(MmldpError):
    """A generator row does not sum to zero."""

    def __init__(self, row, row_sum):
        self.row = row
        self.row_sum = row_sum
        super().__init__(f"generator row {row} sums to {row_sum!r}, expected 0")


class NonpositiveOffDiagonalError(MmldpError):
    """An off-diagonal generator entry is not strictly positive."""

    def __init__(self, row, col, value):
        self.row = row
        self.col = col
        self.value = value
        super().__init__(f"generator entry ({row},{col}) = {value!r} must be strictly positive")


class NonpositiveTiltError(MmldpError):
    """A tilt vector/field has an entry <= 0."""

    def __init__(self, minimum):
        self.minimum = minimum
        super().__init__(f"tilt values must be strictly positive, min entry is {minimum!r}")


class GridMismatchError(MmldpError):
    """Two grid-based objects cover different horizons (or incompatible grids)."""

    def __init__(self, detail):
        super().__init__(f"grid mismatch: {detail}")


class ParseError(MmldpError):
    """Config document is not well-formed JSON."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"config parse error{where}: {message}")


class ValidationError(MmldpError):
    """Config is well-formed but violates a field constraint."""

    def __init__(self, field, constraint):
        self.field = field
        self.constraint = constraint
        super().__init__(f"invalid config field '{field}': {constraint}")


# -- numerical ----------------------------------------------------------------

class SingularSystemError(MmldpError):
    """A linear solve that should be well-posed broke down numerically."""


class NoConvergenceError(MmldpError):
    """An iterative solver hit its iteration cap with a large residual."""

    def __init__(self, iterations, gradient_norm):
        self.iterations = iterations
        self.gradient_norm = gradient_norm
        super().__init__(
            f"no convergence after {iterations} iterations, gradient norm {gradient_norm:.3e}"
        )


class SingularDiffusionError(MmldpError):
    """Mixture diffusion vanishes on a cell and no regularization is active."""

    def __init__(self, cell):
        self.cell = cell
        super().__init__(
            f"mixture diffusion is zero on cell {cell} with gamma=0; "
            "regularize or choose an interior kernel"
        )


class InfeasibleTargetError(MmldpError):
    """Endpoint target cannot be reached with finite cost."""

    def __init__(self, target):
        self.target = target
        super().__init__(f"target {target!r} unreachable: objective is infinite for every trial kernel")


class NoDescentError(MmldpError):
    """Line search failed while the gradient was still significantly nonzero."""

    def __init__(self, gradient_norm):
        self.gradient_norm = gradient_norm
        super().__init__(f"line search failed with gradient norm {gradient_norm:.3e}")


VALIDATION_ERRORS = (
    NonSquareError,
    RowSumNonzeroError,
    NonpositiveOffDiagonalError,
    NonpositiveTiltError,
    GridMismatchError,
    ParseError,
    ValidationError,
)

NUMERICAL_ERRORS = (
    SingularSystemError,
    NoConvergenceError,
    SingularDiffusionError,
    InfeasibleTargetError,
    NoDescentError,
)
