"""Exception types shared across the pipeline."""


class MvsyncError(Exception):
    """Base class for all mvsync errors."""


class ParseError(MvsyncError):
    """A structured text file could not be parsed.

    Carries the file path and 1-based line number of the offending line.
    """

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class MissingCameraError(MvsyncError):
    """An image record references a camera id that was never declared."""


class UnsupportedModelError(MvsyncError):
    """Camera model other than PINHOLE / SIMPLE_PINHOLE."""


class SizeMismatchError(MvsyncError):
    """A binary payload does not contain the expected number of values."""


class FormatError(MvsyncError):
    """A binary file is neither a recognized PFM nor a raw float32 blob."""


class ConfigError(MvsyncError):
    """Invalid or unknown configuration key/value."""


class BehindCameraError(MvsyncError):
    """A point projects behind the camera (z <= 0)."""


class InvalidDepthError(MvsyncError):
    """Backprojection requested with a nonpositive depth."""


class OutOfFrameError(MvsyncError):
    """A pixel coordinate falls outside the image bounds."""


class MissingDepthError(MvsyncError):
    """A view required by graph construction has no depth map."""


class UnknownViewError(MvsyncError):
    """A view id is not present in the scene bundle or graph."""


class ShapeMismatchError(MvsyncError):
    """Grid operands do not agree in shape."""


class UnknownLayerError(MvsyncError):
    """Feature aggregation requested for a layer outside the aligned set."""


class EmptyMaskError(MvsyncError):
    """Soft-mask construction requires at least one foreground pixel."""


class NoObservationsError(MvsyncError):
    """Keypoint depth loss evaluated over an empty observation set."""


class EmptyViewListError(MvsyncError):
    """Anchor selection requires at least one view."""


class MaskInconsistencyError(MvsyncError):
    """replaced_mask contains pixels outside the foreground mask."""


class PredictorProtocolError(MvsyncError):
    """Wire-protocol violation or ERROR reply from the score predictor."""


class NonFiniteLatentError(MvsyncError):
    """Latents became NaN/Inf during denoising; carries the step index."""

    def __init__(self, step_index: int, message: str = ""):
        detail = message or f"non-finite latent at step {step_index}"
        super().__init__(detail)
        self.step_index = step_index


class StageError(MvsyncError):
    """A pipeline stage failed; wraps the original error with a stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
