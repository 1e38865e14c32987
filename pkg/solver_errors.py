"""
Error types shared by the solver modules.

The command-line front end maps them onto exit codes:
ConfigError -> 2, IllPosedProblemError -> 3, NumericalFailureError -> 4.
"""

from typing import Any, Dict, Optional


class ConfigError(ValueError):
    """Configuration file is missing keys, has unknown keys or invalid values."""


class IllPosedProblemError(ValueError):
    """The mathematics says no: ill-posed multiplier, no multiplier, no price."""

    def __init__(self, message: str, report: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.report = report or {}


class NumericalFailureError(RuntimeError):
    """A numerical routine did not reach its tolerance."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
