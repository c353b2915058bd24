"""Lattice structure design: free material optimization on a macro mesh, tensor
clustering, and buckling-aware inverse homogenization of bar-lattice cells."""

__version__ = "0.1.0"

from .exceptions import (ConfigError, ConnectorError, EmptyUnitError, InfeasibleError, LatoptError,
                         ParameterError, SolverError, StageError)

__all__ = ["__version__", "ConfigError", "ConnectorError", "EmptyUnitError", "InfeasibleError",
           "LatoptError", "ParameterError", "SolverError", "StageError"]
