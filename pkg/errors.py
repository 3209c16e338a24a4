class SceneKitError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(SceneKitError, ValueError):
    pass


class CameraError(SceneKitError, ValueError):
    pass


class FieldError(SceneKitError):
    pass


class CheckpointFormatError(FieldError):
    pass


class RenderError(SceneKitError):
    pass


class LossError(SceneKitError):
    pass


class MissingCacheError(SceneKitError):
    pass


class NonFiniteGradientError(SceneKitError):
    """Raised by the optimizer when a gradient buffer holds NaN or inf."""

    def __init__(self, group: str, name: str, count: int):
        self.group = group
        self.name = name
        self.count = count
        super().__init__(
            f"{count} non-finite gradient value(s) in parameter group '{group}' ({name})"
        )


class FitDivergedError(SceneKitError):
    """Raised when the total loss turns NaN.

    ``field`` holds the parameters of the last iteration whose loss was finite
    (the initial ones when the first loss diverges). ``checkpoint`` is where
    they were saved when a checkpoint directory was given.
    """

    def __init__(self, iteration: int, checkpoint=None, field=None):
        self.iteration = iteration
        self.checkpoint = checkpoint
        self.field = field
        where = f", last checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"Total loss diverged at iteration {iteration}{where}")


class MeshError(SceneKitError):
    pass


class GeoDataError(SceneKitError):
    pass


class GridFormatError(GeoDataError):
    pass


class UnitsError(GeoDataError):
    pass


class MetricsError(SceneKitError):
    pass


class RegistryError(SceneKitError):
    pass
