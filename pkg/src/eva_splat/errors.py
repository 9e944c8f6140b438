"""Exception hierarchy. Every error carries a stable machine-readable ``code``."""

class EvaSplatError(Exception):
    code = "EvaSplatError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


# camera
class PointBehindCamera(EvaSplatError):
    code = "PointBehindCamera"


class NonPositiveDepth(EvaSplatError):
    code = "NonPositiveDepth"


class DimensionMismatch(EvaSplatError):
    code = "DimensionMismatch"


class InvalidCamera(EvaSplatError):
    code = "InvalidCamera"


# gaussians
class ZeroQuaternion(EvaSplatError):
    code = "ZeroQuaternion"


class BehindCamera(EvaSplatError):
    code = "BehindCamera"


class InvalidGaussianSet(EvaSplatError):
    code = "InvalidGaussianSet"


# rasterizer
class ImageTooLarge(EvaSplatError):
    code = "ImageTooLarge"


class TooManyGaussiansForOracle(EvaSplatError):
    code = "TooManyGaussiansForOracle"


class EmptyInput(EvaSplatError):
    code = "EmptyInput"


# attention
class WindowWiderThanImage(EvaSplatError):
    code = "WindowWiderThanImage"


class ShapeMismatch(EvaSplatError):
    code = "ShapeMismatch"


class FewerThanTwoViews(EvaSplatError):
    code = "FewerThanTwoViews"


class InvalidParams(EvaSplatError):
    code = "InvalidParams"


class OutOfMemoryBudget(EvaSplatError):
    code = "OutOfMemoryBudget"


# losses
class EmptyMask(EvaSplatError):
    code = "EmptyMask"


class NoMatchedLandmarks(EvaSplatError):
    code = "NoMatchedLandmarks"


class NonFiniteComponent(EvaSplatError):
    code = "NonFiniteComponent"


# pipeline
class InvalidRing(EvaSplatError):
    code = "InvalidRing"


class MaskMismatch(EvaSplatError):
    code = "MaskMismatch"


class DivergenceDetected(EvaSplatError):
    code = "DivergenceDetected"


# io / cli
class BundleNotFound(EvaSplatError):
    code = "BundleNotFound"


class FormatError(EvaSplatError):
    code = "FormatError"


class ConfigError(EvaSplatError):
    code = "ConfigError"
