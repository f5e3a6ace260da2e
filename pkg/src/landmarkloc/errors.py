"""Exception types shared across the package."""


class LandmarkLocError(Exception):
    """Base class for all package-specific errors."""


# --- geometry ---------------------------------------------------------------

class MinimalSampleUnavailable(LandmarkLocError):
    """Fewer correspondences than the solver's minimal sample size."""


class DegenerateConfiguration(LandmarkLocError):
    """Input geometry does not constrain the solution (collinear or
    coincident 3D points, rank-deficient normal equations, ...)."""


class NoConsensus(LandmarkLocError):
    """RANSAC exhausted its iteration budget without a usable consensus set."""


# --- map model / serialization ----------------------------------------------

class ParseError(LandmarkLocError):
    """Malformed reconstruction or query input (missing keys, wrong types,
    descriptor norms too far from unit)."""


class LinkageError(LandmarkLocError):
    """Track/keypoint cross-references are inconsistent or dangling."""


class DescriptorDimMismatch(LandmarkLocError):
    """Descriptors of differing dimension where one dimension is required."""


class BadMagic(LandmarkLocError):
    """Serialized container does not start with the expected magic bytes."""


class UnsupportedVersion(LandmarkLocError):
    """Serialized container declares a version this code does not read."""


class ChecksumMismatch(LandmarkLocError):
    """Serialized container is truncated or its payload fails the CRC-32."""


class InvariantViolation(LandmarkLocError):
    """A deserialized or hand-built object violates a structural invariant."""


class ShapeMismatch(LandmarkLocError):
    """Weight container tensors missing, misnamed, or of the wrong shape."""


# --- builder / evaluation ----------------------------------------------------

class TooFewPoints(LandmarkLocError):
    """Not enough (distinct) points to produce the requested clustering."""


class LengthMismatch(LandmarkLocError):
    """Parallel sequences that must align have different lengths."""
