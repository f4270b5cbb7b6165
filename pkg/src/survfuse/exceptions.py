"""Exception hierarchy shared by all survfuse modules."""


class SurvfuseError(Exception):
    """Base class for every error raised by this package."""


class NoComparablePairs(SurvfuseError, ValueError):
    pass


class NoEvents(SurvfuseError, ValueError):
    pass


class LengthMismatch(SurvfuseError, ValueError):
    pass


class DimensionMismatch(SurvfuseError, ValueError):
    pass


class ShapeMismatch(SurvfuseError, ValueError):
    pass


class RowCountMismatch(SurvfuseError, ValueError):
    pass


class EmptyGrid(SurvfuseError, ValueError):
    pass


class AllGridPointsDegenerate(SurvfuseError, ValueError):
    pass


class AlphaZero(SurvfuseError, ValueError):
    """Pure ridge has no finite lambda that zeroes every coefficient."""


class EmptyPath(SurvfuseError, ValueError):
    pass


class StaleTape(SurvfuseError, RuntimeError):
    """Parameters were updated after the forward pass that built the tape."""


class AllRunsDiscarded(SurvfuseError, RuntimeError):
    pass


class ParseError(SurvfuseError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class EmptyIntersection(SurvfuseError, ValueError):
    pass


class KTooLarge(SurvfuseError, ValueError):
    pass


class StratumTooSmall(SurvfuseError, ValueError):
    pass


class IncompatibleModel(SurvfuseError, ValueError):
    pass


class ConfigError(SurvfuseError, ValueError):
    pass
