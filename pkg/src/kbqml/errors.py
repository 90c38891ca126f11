"""Exception types shared across the package."""


class KBQMLError(Exception):
    pass


class ConfigError(KBQMLError):
    """Bad configuration or command-line input (CLI exit code 2)."""


class NumericalError(KBQMLError):
    """A numerical procedure failed (CLI exit code 3)."""


class DomainError(NumericalError, ValueError):
    """A state or query lies outside the admissible domain."""


class UnsupportedModelError(KBQMLError, TypeError):
    pass


class AssemblyError(NumericalError):
    pass


class MatrixExpError(NumericalError):
    pass


class SimulationError(NumericalError):
    pass
