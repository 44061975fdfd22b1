"""Domain errors shared across the package."""


class BehindCameraError(ValueError):
    """A point with non-positive depth was pushed through the projection."""


class SurfaceExtractionError(RuntimeError):
    """Surface sampling could not collect the requested number of points."""


class InitializationError(ValueError):
    """Detection does not contain enough valid depth to seed the filter."""


class DegenerateFilterError(RuntimeError):
    """Every particle weight collapsed; the posterior is gone."""


class CodebookFormatError(ValueError):
    """Codebook file is malformed or has an unsupported version."""


class SceneGenerationError(RuntimeError):
    """The configured trajectory cannot be rendered into a usable frame."""
