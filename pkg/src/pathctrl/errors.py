"""Exception types raised by the library."""


class PathCtrlError(Exception):
    """Base class for library errors."""


class AssumptionViolation(PathCtrlError):
    """Coefficients break the well-posedness assumption at some probed tuple.

    ``offending`` holds ``(path_index, t_index, control_index, message)`` tuples.
    """

    def __init__(self, offending, message=None):
        self.offending = list(offending)
        if message is None:
            head = "; ".join(
                f"path {p} t-index {k} control {u}: {msg}"
                for p, k, u, msg in self.offending[:5]
            )
            more = len(self.offending) - 5
            message = head + (f" (+{more} more)" if more > 0 else "")
        super().__init__(message)


class WellPosednessError(PathCtrlError):
    """Requested step size exceeds the admissible bound h0."""

    def __init__(self, h, h0):
        self.h = h
        self.h0 = h0
        super().__init__(f"step h={h:.6g} exceeds admissible h0={h0:.6g}")


class EvaluationError(PathCtrlError, FloatingPointError):
    """A coefficient callable returned a non-finite value."""

    def __init__(self, what, control_index=None, t_index=None):
        self.control_index = control_index
        self.t_index = t_index
        where = []
        if t_index is not None:
            where.append(f"t-index {t_index}")
        if control_index is not None:
            where.append(f"control {control_index}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"non-finite {what}{suffix}")


class DimensionUnsupported(PathCtrlError):
    pass


class EngineUnsupported(PathCtrlError):
    pass


class LiftMismatch(PathCtrlError):
    def __init__(self, what, t_index, path_index=None, control_index=None, err=None):
        self.what = what
        self.t_index = t_index
        self.path_index = path_index
        self.control_index = control_index
        self.err = err
        super().__init__(
            f"lifted {what} disagrees with path functional at t-index {t_index}"
            f" (path {path_index}, control {control_index}, |diff|={err:.3g})"
        )


class RegressionFailure(PathCtrlError):
    def __init__(self, message, t_index=None):
        self.t_index = t_index
        super().__init__(message if t_index is None else f"step {t_index}: {message}")


class StrategyUnavailable(PathCtrlError):
    pass


class SizeLimitExceeded(PathCtrlError, ValueError):
    pass
