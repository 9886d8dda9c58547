"""Exception hierarchy shared by all hybridbem modules."""


class HybridBEMError(Exception):
    """Base class for every error raised by this package."""


# markov_chain

class GeneratorError(HybridBEMError, ValueError):
    """A rate matrix is not a valid conservative irreducible generator."""


class NegativeOffDiagonal(GeneratorError):
    pass


class RowSumNonzero(GeneratorError):
    pass


class Reducible(GeneratorError):
    pass


class SingularSystem(HybridBEMError):
    pass


# hybrid_model

class DegenerateBox(HybridBEMError, ValueError):
    pass


# bem_stepper

class SolverError(HybridBEMError):
    pass


class NoConvergence(SolverError):
    """The implicit solve did not reach tolerance.

    ``best`` holds the best iterate found and ``residual`` its residual norm.
    """

    def __init__(self, message, best=None, residual=None, step=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.step = step


class NonFiniteEvaluation(SolverError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SingularJacobian(SolverError):
    pass


# simulator

class EnsembleFailure(HybridBEMError):
    """Too many paths of an ensemble failed to integrate."""


class OffGridTime(HybridBEMError, ValueError):
    pass


# measure_lab

class InvalidP(HybridBEMError, ValueError):
    pass


class SizeCapExceeded(HybridBEMError, ValueError):
    pass


class EmptySample(HybridBEMError, ValueError):
    pass


class NonPositiveValues(HybridBEMError, ValueError):
    pass


class TooFewPoints(HybridBEMError, ValueError):
    pass


# cli

class ConfigError(HybridBEMError, ValueError):
    """Invalid experiment configuration; the message names the field."""
