"""Exception types shared across the package."""


class TamclError(Exception):
    """Base class for every error raised by tamcl."""


class ShapeError(TamclError, ValueError):
    pass


class NumericError(TamclError, ArithmeticError):
    pass


class ContractError(TamclError, RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigError(TamclError, ValueError):
    pass


class RegistryError(TamclError, KeyError):
    pass


class RoutingError(TamclError, KeyError):
    """No token/head is registered for the requested task."""


class VocabularyError(TamclError, IndexError):
    pass


class DegenerateReferenceError(TamclError, ValueError):
    """Reference accuracy is at or below chance, so forgetting is undefined."""


class CompletenessError(TamclError, ValueError):
    pass


class ValidationError(TamclError, ValueError):
    pass
