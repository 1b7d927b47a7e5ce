"""Multi-task structural learning on dense networks."""

from mtsl.errors import ConfigError, ContractError, NumericError, ParseError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "NumericError", "ParseError", "ShapeError", "__version__"]
