"""Exception hierarchy shared by every module.

Each class carries a short machine-readable ``code`` so the CLI can report
failures as JSON without string matching.
"""


class EdivError(Exception):
    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        out = {"error": self.code, "message": str(self)}
        for key, val in self.details.items():
            out[key] = _plain(val)
        return out


def _plain(val):
    if hasattr(val, "tolist"):
        return val.tolist()
    if isinstance(val, (str, int, float, bool, type(None))):
        return val
    if isinstance(val, (list, tuple)):
        return [_plain(v) for v in val]
    return repr(val)


class DimensionError(EdivError, ValueError):
    code = "dimension"


class ContractError(EdivError, ValueError):
    code = "contract"


class ParseError(EdivError, ValueError):
    code = "parse"


class ConfigError(EdivError, ValueError):
    code = "config"


class DegenerateError(EdivError, ValueError):
    code = "degenerate"


class WeakVariationError(EdivError, ArithmeticError):
    code = "weak_variation"


class WeakInstrumentError(EdivError, ArithmeticError):
    code = "weak_instrument"


class ConvergenceError(EdivError, RuntimeError):
    code = "convergence"


class DivergenceError(EdivError, RuntimeError):
    code = "divergence"
