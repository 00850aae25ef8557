"""Exception hierarchy shared by every pipeline module."""


class SegCascadeError(Exception):
    """Base class for all pipeline errors."""


# nifti_io
class NiftiError(SegCascadeError, ValueError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class RankNotThree(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


# geometry / volumes
class GeometryMismatch(SegCascadeError, ValueError):
    pass


class EmptyMask(SegCascadeError, ValueError):
    pass


class EmptyVolume(SegCascadeError, ValueError):
    pass


# normalize
class DegenerateDistribution(SegCascadeError, ValueError):
    pass


# labels
class CodeOutOfRange(SegCascadeError, ValueError):
    pass


# network / training
class ShapeMismatch(SegCascadeError, ValueError):
    pass


class NonFiniteLoss(SegCascadeError, FloatingPointError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class NonFiniteUpdate(SegCascadeError, FloatingPointError):
    pass


class TooFewCases(SegCascadeError, ValueError):
    pass


# cascade / phantom
class MissingPrior(SegCascadeError, ValueError):
    pass


class SpecGeometryError(SegCascadeError, ValueError):
    pass


# cli
class ConfigError(SegCascadeError):
    pass


class MissingArtifact(SegCascadeError):
    pass


class CheckpointMismatch(ConfigError):
    """A stored network config disagrees with the run config."""
