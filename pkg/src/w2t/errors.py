"""Exception types shared across the package.

Every error raised by the library derives from W2TError so callers can
catch the whole family with one clause.
"""


class W2TError(Exception):
    pass


# --- checkpoint files and manifests ---

class InvalidCheckpoint(W2TError):
    pass


class BadMagic(InvalidCheckpoint):
    pass


class TruncatedPayload(InvalidCheckpoint):
    pass


class NonFiniteEntry(InvalidCheckpoint):
    pass


class MixedRank(InvalidCheckpoint):
    pass


class ManifestError(W2TError):
    pass


class MissingEntryFile(ManifestError):
    pass


class LabelDimMismatch(ManifestError):
    pass


# --- canonical decomposition ---

class NonFiniteInput(W2TError):
    pass


class DegenerateDimensions(W2TError):
    pass


class TooLargeForOracle(W2TError):
    pass


class ShapeMismatch(W2TError):
    pass


class RankMismatch(W2TError):
    pass


class ResampleBudgetExhausted(W2TError):
    pass


# --- tensor engine ---

class NonFiniteActivation(W2TError):
    pass


class DetachedGraph(W2TError):
    pass


# --- encoder / training ---

class ConfigMismatch(W2TError):
    pass


class EmptySplit(W2TError):
    pass


class LabelSchemaMismatch(W2TError):
    pass


class LayoutMismatch(W2TError):
    pass


# --- synthetic generation ---

class InvalidSpec(W2TError):
    pass


class UnlabeledCollection(W2TError):
    pass


# --- metrics ---

class DegenerateLabels(W2TError):
    pass


class ZeroVariance(W2TError):
    pass


class DimMismatch(W2TError):
    pass


class EmptyGallery(W2TError):
    pass
