class CavSafeError(Exception):
    """Base class for errors raised by this package."""


class RegistrationError(CavSafeError, ValueError):
    pass


class UnknownPathError(CavSafeError, KeyError):
    pass


class ProtocolError(CavSafeError, RuntimeError):
    """A coordinator invariant was broken by the caller (e.g. planning out of order)."""


class DegenerateHorizonError(CavSafeError, ValueError):
    pass


class InfeasibleWindowError(CavSafeError, ValueError):
    pass


class PositionOutOfRangeError(CavSafeError, ValueError):
    pass


class PlannerInfeasibleError(CavSafeError):
    """No exit time in the feasible window satisfies the safety margins.

    ``best`` carries the candidate plan with the largest worst-case margin so
    the caller can still admit the vehicle and flag it.
    """

    def __init__(self, message, best=None, margin=float("-inf")):
        super().__init__(message)
        self.best = best
        self.margin = margin


class ScenarioError(CavSafeError, ValueError):
    pass
