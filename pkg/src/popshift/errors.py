"""Exception hierarchy.

Every error raised on bad *data* derives from :class:`DataError`; the CLI
maps those to exit code 2.
"""


class PopShiftError(Exception):
    pass


class DataError(PopShiftError):
    pass


# volume ingestion
class MalformedHeader(DataError):
    pass


class NonIntegerData(DataError):
    pass


class UnknownLabel(DataError):
    pass


class GridMismatch(DataError):
    pass


class SpacingMismatch(DataError):
    pass


# metrics / phantoms
class EmptyMask(DataError):
    pass


class OutOfBounds(DataError):
    pass


class IoFailure(DataError):
    pass


# registry / cohorts
class MissingColumn(DataError):
    pass


class DuplicateSubjectId(DataError):
    pass


class UnparseableAge(DataError):
    pass


class InsufficientSubjects(DataError):
    pass


class InfeasibleMatch(DataError):
    pass


class KTooLarge(DataError):
    pass


# gap statistics
class DegenerateDenominator(DataError):
    pass


class MismatchedSamples(DataError):
    pass


class ZeroVariance(DataError):
    pass


class TooFewSamples(DataError):
    pass


class IncompleteGrid(DataError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(str(m) for m in self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"{len(self.missing)} missing cells: {shown}{more}")


class ConfigError(PopShiftError):
    pass
