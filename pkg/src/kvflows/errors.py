"""Exception types raised across the package."""


class KVFlowsError(Exception):
    pass


class DegeneratePoint(KVFlowsError, ValueError):
    """Point outside the domain where projection onto the manifold is unique."""


class ManifoldMismatch(KVFlowsError, ValueError):
    pass


class UnsupportedOrder(KVFlowsError, NotImplementedError):
    """Analytic derivative requested for a kernel of interaction order >= 2."""


class SupportTooLarge(KVFlowsError, ValueError):
    pass


class InvalidGrid(KVFlowsError, ValueError):
    pass


class NonFinite(KVFlowsError, FloatingPointError):
    pass


class MissingAuxiliary(KVFlowsError, LookupError):
    pass


class BudgetExhausted(KVFlowsError, RuntimeError):
    pass


class ConfigInvalid(KVFlowsError, ValueError):
    pass


class OutputUnwritable(KVFlowsError, OSError):
    pass
