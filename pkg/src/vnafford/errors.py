"""Exception types raised across the package."""


class VNAffordError(Exception):
    pass


class InvalidRotationError(VNAffordError, ValueError):
    pass


class DegenerateFrameError(VNAffordError, ValueError):
    pass


class InsufficientPointsError(VNAffordError, ValueError):
    pass


class NoValidProposalError(VNAffordError, RuntimeError):
    pass


class TrainingInfeasibleError(VNAffordError, ValueError):
    pass


class DatasetLoadError(VNAffordError, IOError):
    pass


class CheckpointLoadError(VNAffordError, IOError):
    pass


class UndefinedMetricError(VNAffordError, ValueError):
    pass
