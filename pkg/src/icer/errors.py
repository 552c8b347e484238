"""Exception hierarchy shared by all icer modules."""


class IcerError(Exception):
    """Base class for every error raised by icer."""


class NotPositiveDefinite(IcerError, ValueError):
    pass


class DimensionMismatch(IcerError, ValueError):
    pass


class InvalidParams(IcerError, ValueError):
    pass


class NegativeWeight(IcerError, ValueError):
    pass


class MissingTarget(IcerError, ValueError):
    pass


class NonFiniteLoss(IcerError, FloatingPointError):
    pass


class InvalidTemperature(IcerError, ValueError):
    pass


class InvalidK(IcerError, ValueError):
    pass


class NoSupervision(IcerError, ValueError):
    pass


class RankDeficient(IcerError, ValueError):
    pass


class InvalidConfig(IcerError, ValueError):
    pass


class MissingGroundTruth(IcerError, ValueError):
    pass


class SchemaError(IcerError, ValueError):
    """Scenario or result file has the wrong schema version or layout."""
