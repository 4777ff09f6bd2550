"""
Error Types Module
Exception hierarchy shared by every stage, grouped by the CLI exit code they map to
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PIPELINE = 4


class PanoColorError(Exception):
    """Base class for all errors raised by this package"""

    exit_code = EXIT_PIPELINE


# Configuration (exit 2)

class ConfigError(PanoColorError, ValueError):
    """Unknown key, unparsable value or invalid combination in the configuration"""

    exit_code = EXIT_CONFIG


# Input data (exit 3)

class DataError(PanoColorError):
    """Malformed or unreadable input file"""

    exit_code = EXIT_IO


class PlyFormatError(DataError):
    """PLY header or body could not be parsed"""


class UnsupportedPropertyError(DataError):
    """PLY property has a type this reader does not accept"""


class EmptyCloudError(DataError):
    """Point cloud has no points"""


class CloudShapeError(DataError, ValueError):
    """Positions, colors or leaf ids do not describe the same points"""


class NonFiniteError(DataError):
    """Coordinates contain NaN or infinity"""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class TrajectoryFormatError(DataError):
    """A trajectory line could not be parsed"""

    def __init__(self, message, line_number=None):
        super().__init__(message)
        self.line_number = line_number


class NonMonotonicTimestampError(DataError):
    """Trajectory timestamps are not strictly increasing"""


class ImageDecodeError(DataError):
    """Image file could not be decoded"""


# Pipeline (exit 4)

class PipelineError(PanoColorError):
    """A processing stage could not produce a result"""


class ParameterError(PipelineError, ValueError):
    """Operation called with parameters outside their valid range"""


class OutOfRangeError(PipelineError):
    """Query time outside the trajectory span"""


class MalformedTrajectoryError(PipelineError):
    """Trajectory has too few samples or unordered timestamps"""


class SpanTooShortError(PipelineError):
    """Trajectory is too short for the requested resampling step"""


class DegenerateSignalError(PipelineError):
    """Signal has zero variance so correlation is undefined"""


class ImageBoundsError(PipelineError, IndexError):
    """Pixel coordinate outside the image"""


class EmptyVisibilityError(PipelineError):
    """No point lies within range of a viewpoint"""


class NoCovisibilityError(PipelineError):
    """Co-visibility graph has no edges, so no pose is observable"""


class DegenerateTextureError(PipelineError, ValueError):
    """Synthetic texture is constant or too high-frequency"""
