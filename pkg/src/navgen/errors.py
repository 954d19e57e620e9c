"""Exception types shared across the package."""


class NavgenError(Exception):
    """Base class for all package errors."""


# -- world generation / planning --

class InvalidSpec(NavgenError):
    pass


class GenerationFailed(NavgenError):
    pass


class InvalidPose(NavgenError):
    pass


class NoPath(NavgenError):
    pass


class LengthOutOfRange(NavgenError):
    pass


# -- tokenization --

class TooFewPatches(NavgenError):
    pass


class DimensionMismatch(NavgenError):
    pass


class BadTokenId(NavgenError):
    pass


class ContextSizeMismatch(NavgenError):
    pass


class TargetKindMismatch(NavgenError):
    pass


# -- losses --

class ShapeMismatch(NavgenError):
    pass


class NonVisualGroundTruth(NavgenError):
    pass


class BadEpsilon(NavgenError):
    pass


# -- model / backends --

class ContextOverflow(NavgenError):
    pass


class NonFiniteLoss(NavgenError):
    pass


class BackendError(NavgenError):
    pass


class DecodeError(NavgenError):
    pass


class EmptyOutput(NavgenError):
    pass


# -- reasoning --

class CountExceedsCandidates(NavgenError):
    pass


# -- metrics --

class NoReferences(NavgenError):
    pass


class LengthMismatch(NavgenError):
    pass


class ZeroNormEmbedding(NavgenError):
    pass


# -- dataset --

class TrajectoryTooShort(NavgenError):
    pass


class BadRatios(NavgenError):
    pass


class ManifestCorrupt(NavgenError):
    pass


class MissingReference(NavgenError):
    pass
