"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class IWError(Exception):
    exit_code = 3

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        out = {"type": type(self).__name__, "message": str(self)}
        for k, v in self.details.items():
            if isinstance(v, (str, int, float, bool)) or v is None:
                out[k] = v
            else:
                out[k] = repr(v)[:2000]
        return out


class ValidationError(IWError, ValueError):
    """Bad input. `field` names the offending entry when known."""

    exit_code = 2

    def __init__(self, message, field=None, **details):
        super().__init__(message, field=field, **details)
        self.field = field


class OutOfRangeError(ValidationError):
    pass


class NumericalError(IWError):
    exit_code = 3


class QuadratureError(NumericalError):
    pass


class ScaleDegenerateError(NumericalError):
    pass


class TruncationError(NumericalError):
    pass


class NotItoWatanabePairError(NumericalError):
    pass


class KernelIterationError(NumericalError):
    pass


class KappaZeroRegime(NumericalError):
    """Raised by the boundary identity when A blows up at the boundary (kappa = 0)."""


class SingularDecompositionError(NumericalError):
    pass


class RecurrentError(ValidationError):
    pass


class MCAcceptanceError(IWError):
    exit_code = 4
