"""Exception types raised across the package."""


class BemDtnError(Exception):
    """Base class for package errors."""


class ParseError(BemDtnError, ValueError):
    """A mesh or correspondence file could not be parsed."""


class MeshIndexError(BemDtnError, IndexError):
    """A face references a vertex index outside the vertex array."""


class DegenerateVolume(BemDtnError, ValueError):
    pass


class EmptyMesh(BemDtnError, ValueError):
    pass


class DegenerateTriangle(BemDtnError, ValueError):
    pass


class NonManifoldEdge(BemDtnError, ValueError):
    pass


class InvertedTet(BemDtnError, ValueError):
    pass


class SingularInteriorBlock(BemDtnError, ValueError):
    pass


class SingularEvaluation(BemDtnError, ArithmeticError):
    """A kernel was asked to evaluate at coincident points."""


class CoincidentPoints(SingularEvaluation):
    pass


class BreakdownError(BemDtnError, ArithmeticError):
    """Conjugate gradient met non-positive curvature."""


class NoConvergence(BemDtnError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InnerSolveDiverged(NoConvergence):
    pass


class NotConverged(NoConvergence):
    def __init__(self, message, report=None, result=None):
        super().__init__(message, report)
        self.result = result


class IllConditionedBasis(BemDtnError, ArithmeticError):
    pass


class RankDeficient(BemDtnError, ValueError):
    pass


class SingularGram(BemDtnError, ArithmeticError):
    pass


class RankDeficiencyWarning(UserWarning):
    pass
