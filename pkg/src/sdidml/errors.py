"""Exception and warning types raised across the package."""


class SdidmlError(ValueError):
    """Base class for every error raised by sdidml."""


# panel data
class MissingColumn(SdidmlError):
    pass


class ParseError(SdidmlError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r} as a number")


class DuplicateKey(SdidmlError):
    pass


class EmptyData(SdidmlError):
    pass


class InsufficientPanel(SdidmlError):
    pass


class RoleOverlap(SdidmlError):
    pass


class NonBinaryTreatment(SdidmlError):
    pass


class TreatmentReversal(SdidmlError):
    pass


class UnknownUnit(SdidmlError):
    pass


class TimingOutOfRange(SdidmlError):
    pass


class ZeroVariance(SdidmlError):
    pass


class NameCollision(SdidmlError):
    pass


class InconsistentGroup(SdidmlError):
    pass


class EmptySubgroup(SdidmlError):
    pass


# learners
class SingularDesign(SdidmlError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"design matrix is rank deficient at column {column!r}")


class InsufficientData(SdidmlError):
    pass


class ShapeMismatch(SdidmlError):
    pass


# cross-fitting
class TooFewUnits(SdidmlError):
    pass


class FoldFitError(SdidmlError):
    def __init__(self, fold, error):
        self.fold = fold
        self.error = error
        super().__init__(f"fold {fold}: {type(error).__name__}: {error}")


class NoResidualTreatmentVariation(SdidmlError):
    pass


# estimators
class DegenerateClusters(SdidmlError):
    pass


class WeakDenominator(SdidmlError):
    pass


class MissingInstrument(SdidmlError):
    pass


class CollinearAfterDemeaning(SdidmlError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"regressor {column!r} is collinear with the absorbed fixed effects")


class NonConvergence(SdidmlError):
    pass


# diagnostics
class UnknownVariable(SdidmlError):
    pass


class PerfectCollinearity(SdidmlError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"{column!r} is perfectly explained by the other regressors")


class NotPositiveSemiDefinite(SdidmlError):
    pass


class SingularCorrelation(SdidmlError):
    pass


# robustness / mechanisms
class NoPrePeriods(SdidmlError):
    pass


class NoControlUnits(SdidmlError):
    pass


class TooManyFailedReps(SdidmlError):
    pass


class ConstantModerator(SdidmlError):
    pass


class ConstantMediator(SdidmlError):
    pass


class GroupTooSmall(SdidmlError):
    def __init__(self, group, required, available):
        self.group = group
        self.required = required
        self.available = available
        super().__init__(f"group {group!r} has {available} units, needs at least {required}")


# simulator / cli
class ConfigInvalid(SdidmlError):
    pass


class ConfigError(SdidmlError):
    def __init__(self, key, expected):
        self.key = key
        self.expected = expected
        super().__init__(f"{key}: expected {expected}")


class StepFailure(SdidmlError):
    def __init__(self, step, error):
        self.step = step
        self.error = error
        super().__init__(f"step {step!r} failed: {type(error).__name__}: {error}")


class ReportIoError(SdidmlError, OSError):
    def __init__(self, path, error):
        self.path = path
        super().__init__(f"cannot write {path}: {error}")


class PanelWarning(UserWarning):
    pass


class WeakInstrumentWarning(UserWarning):
    pass


class LassoPathWarning(UserWarning):
    pass
