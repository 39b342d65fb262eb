"""Exception hierarchy.

Every error raised on purpose by the package derives from ``LoopPerturbError``
so callers (the CLI in particular) can separate invalid input from bugs.
"""

from __future__ import annotations


class LoopPerturbError(Exception):
    pass


class ChainError(LoopPerturbError, ValueError):
    """Invalid rate matrix / reference measure."""


class NonTransient(ChainError):
    pass


class NegativeOffDiagonal(ChainError):
    pass


class NonPositiveReference(ChainError):
    pass


class PositiveRowSum(ChainError):
    pass


class NotDualAdmissible(ChainError):
    pass


class NotSymmetric(ChainError):
    pass


class NonPositiveA(ChainError):
    pass


class SingularSolve(LoopPerturbError, ArithmeticError):
    pass


class KTooLarge(LoopPerturbError, ValueError):
    pass


class KUnsupported(LoopPerturbError, ValueError):
    pass


class LevyModelError(LoopPerturbError, ValueError):
    pass


class EpsilonTooLarge(LevyModelError):
    pass


class Condition38Violated(LevyModelError):
    """The perturbation exponent is not dominated by the base exponent."""


class MarginalAsymmetry(LoopPerturbError, ValueError):
    pass


class SeriesDiverged(LoopPerturbError, ArithmeticError):
    pass


class EvaluatorFailed(LoopPerturbError, RuntimeError):
    pass


class QuadratureFailed(LoopPerturbError, ArithmeticError):
    pass


class GenerationFailed(LoopPerturbError, RuntimeError):
    pass


class ConfigInvalid(LoopPerturbError, ValueError):
    pass
