"""Exception hierarchy shared by all stages."""


class LatoptError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(LatoptError, ValueError):
    """An argument or configuration value is outside its valid domain."""


class SolverError(LatoptError, RuntimeError):
    """A linear or eigenvalue solve failed (singular system, no convergence)."""


class InfeasibleError(LatoptError):
    """The feasible set of an optimization problem is empty."""


class EmptyUnitError(LatoptError):
    """Pruning removed every bar of a lattice unit."""


class ConnectorError(LatoptError):
    """No connector bar could be placed across a cell interface."""

    def __init__(self, interface, message):
        super().__init__(f"{interface}: {message}")
        self.interface = interface


class ConfigError(ParameterError):
    """A configuration file is malformed or holds an unknown or out-of-range key."""


class StageError(LatoptError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` holds the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
