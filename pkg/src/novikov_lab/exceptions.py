"""Exception hierarchy shared by all pipeline stages."""


class NovikovLabError(Exception):
    """Base class; ``reason`` is a short machine-readable code."""

    reason = "error"


class LatticeMismatchError(NovikovLabError):
    reason = "lattice_mismatch"


class ActionCollisionError(NovikovLabError):
    reason = "action_collision"


class InsufficientDataError(NovikovLabError):
    reason = "insufficient_data"


class IllConditionedError(NovikovLabError):
    reason = "ill_conditioned"


class NoIntegerFitError(NovikovLabError):
    reason = "no_integer_fit"


class DegenerateZeroError(NovikovLabError):
    reason = "degenerate_zero"


class IntegrationFailure(NovikovLabError):
    reason = "integration_failure"


class TransversalityViolation(NovikovLabError):
    reason = "transversality_violation"


class NumericalInstability(NovikovLabError):
    reason = "numerical_instability"


class CoverageError(NovikovLabError):
    reason = "missing_pair_coverage"


class DSquaredError(NovikovLabError):
    reason = "d_squared_nonzero"

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ConvergenceError(NovikovLabError):
    reason = "eigensolver_nonconvergence"


class GapError(NovikovLabError):
    reason = "gap_count_mismatch"

    def __init__(self, message, spectrum=None):
        super().__init__(message)
        self.spectrum = spectrum


class QuasimodeError(NovikovLabError):
    reason = "quasimode_cutoff_too_large"


class ExhaustionError(NovikovLabError):
    reason = "insufficient_exhaustion"


class ChainMapError(NovikovLabError):
    reason = "chain_map_residual"

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


class BasisError(NovikovLabError):
    reason = "basis_failure"


class LeakageError(NovikovLabError):
    reason = "small_subspace_leakage"


class ConfigError(NovikovLabError):
    reason = "config_error"
