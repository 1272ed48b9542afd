"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ValidationError -> 2,
DivergenceError -> 3, OutputError -> 4.
"""


class DrapeError(Exception):
    """Base class for all package errors."""


class MeshFormatError(DrapeError):
    """Malformed mesh file; carries the offending line number when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc += f" [{path}"
            loc += f":{line}]" if line is not None else "]"
        super().__init__(message + loc)


class TopologyError(DrapeError):
    """Mesh connectivity violates the edge-manifold / orientation contract."""


class DegenerateGeometryError(DrapeError):
    """A rest-pose element is too small to build material quantities from."""


class ValidationError(DrapeError):
    """Invalid argument, configuration key, or scene description."""


class NumericError(DrapeError):
    """Non-finite values encountered where finite input is required."""


class DivergenceError(DrapeError):
    """The explicit relaxation blew up; reports the failing iteration."""

    def __init__(self, iteration, max_force):
        self.iteration = iteration
        self.max_force = max_force
        super().__init__(
            f"relaxation diverged at iteration {iteration}: max |f| = {max_force:.3e} N"
        )


class PlacementError(DrapeError):
    """No collision-free initial placement found within the attempt budget."""


class CheckpointError(DrapeError):
    """Checkpoint file missing, malformed, or inconsistent with the config."""


class OutputError(DrapeError):
    """Failed to write an output artifact."""
