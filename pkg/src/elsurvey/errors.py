"""Exception types shared across the package.

Input problems (bad files, bad schemas, bad shapes) raise ``DataError`` or
``ConfigError``; statistical failures (infeasible constraints, solvers that do
not converge) raise ``InfeasibleError`` or ``ConvergenceError``.  The CLI maps
the first group to exit code 1 and the second to exit code 2.
"""


class DataError(ValueError):
    """Invalid data, schema, or argument values."""


class ConfigError(ValueError):
    """Invalid run configuration."""


class InfeasibleError(RuntimeError):
    """A population constraint cannot be met by any interior weight vector."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to converge."""
