"""Exception hierarchy shared by all modules."""


class HmflowError(Exception):
    """Base class; the CLI maps any subclass to exit status 1."""

    stage = "module"


class ResourceLimitError(HmflowError):
    pass


class InvalidMetricError(HmflowError):
    pass


class MeshMismatchError(HmflowError):
    pass


class DegreeAmbiguousError(HmflowError):
    def __init__(self, raw):
        super().__init__(f"degree ambiguous: raw signed area / 4pi = {raw:.6f}")
        self.raw = raw


class InvariantError(HmflowError):
    pass


class StalledFlowError(HmflowError):
    pass


class ResolutionError(HmflowError):
    pass


class AnnulusSearchError(HmflowError):
    pass


class InconsistentDegreeError(HmflowError):
    pass


class ClusteringError(HmflowError):
    pass


class ReplacementUnsafeError(HmflowError):
    def __init__(self, osc, limit):
        super().__init__(f"boundary oscillation {osc:.4f} >= {limit:.4f}")
        self.osc = osc


class FitFailure(HmflowError):
    pass


class ConfigError(HmflowError):
    pass


class CorruptFileError(HmflowError):
    pass
