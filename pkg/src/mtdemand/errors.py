"""Exception types raised across the package."""


class DemandError(ValueError):
    """Base class for recoverable estimation and data errors."""


class NonNegativeSlope(DemandError):
    pass


class AllPricesEqual(DemandError):
    pass


class SingularDesign(DemandError):
    pass


class InsufficientTasks(DemandError):
    pass


class DimensionMismatch(DemandError):
    pass


class EmptyTrainSet(DemandError):
    pass


class EmptyInput(DemandError):
    pass


class OracleUnavailable(DemandError):
    pass


class MalformedRow(DemandError):
    pass


class MissingColumn(DemandError):
    pass
