"""Exception types shared across modules.

The command line maps these onto its exit codes: configuration problems
exit 1, data problems 2, divergence 3, metric gates 4.
"""


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class DataError(ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss, logit, or gradient norm."""


class MetricError(RuntimeError):
    """A metric cannot be trusted (missing extractor, failed sanity gate, ...)."""
