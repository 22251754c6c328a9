"""Exception hierarchy for the i2x toolkit.

Every contract violation raises a dedicated subclass of :class:`I2XError`
so callers (and the CLI) can distinguish user/input errors from internal
bugs without parsing messages.
"""


class I2XError(Exception):
    """Base class for all toolkit errors."""


# --- numerics ---------------------------------------------------------------

class NonFiniteError(I2XError):
    """Input contains NaN or Inf."""


class NonSymmetricError(I2XError):
    """Matrix asymmetry exceeds tolerance."""


class NotPositiveDefiniteError(I2XError):
    """Cholesky factorization hit a non-positive pivot."""


class DimensionMismatchError(I2XError):
    """Operand shapes are incompatible."""


# --- datasets ---------------------------------------------------------------

class BadMagicError(I2XError):
    """File does not start with the expected magic number."""


class CountMismatchError(I2XError):
    """Image and label record counts disagree."""


class TruncatedFileError(I2XError):
    """File ends before its declared payload."""


class EmptyDatasetError(I2XError):
    """Dataset holds zero records."""


class BadFractionError(I2XError):
    """Sampling fraction outside (0, 1]."""


class SpecOverflowError(I2XError):
    """Glyph stroke exceeds image bounds."""


# --- refnet -----------------------------------------------------------------

class BadSpecError(I2XError):
    """Model specification is invalid."""


class ShapeMismatchError(I2XError):
    """Tensor shape does not match the model or archive contract."""


class NonFiniteLossError(I2XError):
    """Training loss became NaN/Inf."""


class EmptyStageError(I2XError):
    """A fine-tuning stage has no samples."""


# --- artifact store ---------------------------------------------------------

class InvariantViolationError(I2XError):
    """Archive fails its invariants before writing."""


class VersionUnsupportedError(I2XError):
    """Container version is newer than this reader."""


class CorruptBlobError(I2XError):
    """Tensor blob offset/length inconsistent with the file."""


# --- prototype extraction ---------------------------------------------------

class DegenerateDataError(I2XError):
    """PCA input carries no variance (or too few rows)."""


class TooFewPointsError(I2XError):
    """Fewer (distinct) points than the operation requires."""


# --- trajectory analysis ----------------------------------------------------

class LengthMismatchError(I2XError):
    """Saliency and assignment lengths differ."""


class InsufficientCheckpointsError(I2XError):
    """Need at least two checkpoints to form deltas."""


class NoClustersError(I2XError):
    """HDBSCAN labeled every sample as noise."""


class SingularError(I2XError):
    """Ridge system singular at lambda = 0."""


# --- explanation assembly ---------------------------------------------------

class NotSupportingError(I2XError):
    """Prototype does not support the class (beta <= 0)."""


class EmptyClassError(I2XError):
    """Class has no samples."""


# --- guidance ---------------------------------------------------------------

class EmptyCurationError(I2XError):
    """Curation excluded every sample."""


class BadPairError(I2XError):
    """Class pair invalid (equal, or out of range)."""


class UnknownScheduleError(I2XError):
    """Schedule name not present in the experiment stats."""
