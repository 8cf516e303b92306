"""Exception hierarchy shared by every stage of the pipeline."""


class CascadeSegError(Exception):
    """Base class for all errors raised by this package."""


class RangeError(CascadeSegError, ValueError):
    pass


class DegenerateVolume(CascadeSegError, ValueError):
    pass


class FormatError(CascadeSegError, ValueError):
    pass


class IoError(CascadeSegError, OSError):
    pass


class ParamError(CascadeSegError, ValueError):
    pass


class PlacementError(CascadeSegError, RuntimeError):
    pass


class ShapeError(CascadeSegError, ValueError):
    pass


class DegenerateMask(CascadeSegError, ValueError):
    pass


class ConfigError(CascadeSegError, ValueError):
    pass


class EmptyForeground(CascadeSegError, ValueError):
    pass


class EmptyMask(CascadeSegError, ValueError):
    pass


class BoundsError(CascadeSegError, ValueError):
    pass


class ClassMissing(CascadeSegError, ValueError):
    pass


class SizeError(CascadeSegError, ValueError):
    pass


class MissingPrediction(CascadeSegError, KeyError):
    pass


class UsageError(CascadeSegError):
    pass
