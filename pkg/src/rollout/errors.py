"""Exception types shared across the package."""


class RolloutError(ValueError):
    """Base class for all package errors.

    ``code`` is a short machine-readable tag used by the CLI error JSON.
    """

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class PanelFormatError(RolloutError):
    code = "panel_format"


class DesignError(RolloutError):
    code = "design"


class IdentificationError(RolloutError):
    """Raised when the effect columns are collinear with the nuisance columns."""

    code = "not_identified"

    def __init__(self, message, directions=None):
        super().__init__(message)
        self.directions = directions or []

    def to_dict(self):
        out = super().to_dict()
        out["directions"] = [list(map(float, d)) for d in self.directions]
        return out


class SearchSpaceError(RolloutError):
    code = "search_space"
