"""Geostatistical evaluation of regressors that predict apparent electrical
conductivity from ground-penetrating-radar features along survey tracks."""

from .errors import (
    ConfigError,
    DataError,
    TerravarioError,
)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "TerravarioError", "__version__"]
