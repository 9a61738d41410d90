"""Exception types shared across the toolkit."""


class GridGrecError(Exception):
    """Base class for all toolkit errors."""


class ConfigInfeasible(GridGrecError):
    pass


class OutOfFrustum(GridGrecError):
    pass


class TargetOccluded(GridGrecError):
    pass


class EmptyCandidates(GridGrecError):
    pass


class MalformedExpr(GridGrecError):
    pass


class NoExpressible(GridGrecError):
    pass


class TargetInvisible(GridGrecError):
    pass


class DegenerateCrop(GridGrecError):
    pass


class BackendUnavailable(GridGrecError):
    pass


class CompositionRejected(GridGrecError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class MisalignedTargets(GridGrecError):
    pass


class MissingPrediction(GridGrecError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        super().__init__(f"no prediction for sample ids: {', '.join(self.ids)}")


class DuplicatePrediction(GridGrecError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        super().__init__(f"duplicate predictions for sample ids: {', '.join(self.ids)}")


class UnknownPrediction(GridGrecError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        super().__init__(f"predictions for unknown sample ids: {', '.join(self.ids)}")


class DuplicateSampleId(GridGrecError):
    pass


class QuotaUnsatisfiable(GridGrecError):
    pass


class SchemaMismatch(GridGrecError):
    pass


class ManifestMismatch(GridGrecError):
    pass
