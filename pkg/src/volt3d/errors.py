"""Exception types raised across the package.

Every error derives from :class:`Volt3dError` so the CLI can map them to exit
codes in one place.  Numeric failures during training (``NonFiniteLoss``)
derive from :class:`NumericError`; everything else is a data, usage or
format problem.
"""


class Volt3dError(Exception):
    pass


class NumericError(Volt3dError):
    pass


# --- file formats -----------------------------------------------------------

class BadMagic(Volt3dError, ValueError):
    pass


class BadSize(Volt3dError, ValueError):
    pass


class InvalidHeader(Volt3dError, ValueError):
    pass


class UnsupportedRank(Volt3dError, ValueError):
    pass


class UnsupportedDatatype(Volt3dError, ValueError):
    pass


class TruncatedData(Volt3dError, ValueError):
    pass


class IoFailure(Volt3dError, OSError):
    pass


class VersionMismatch(Volt3dError, ValueError):
    pass


class CorruptRecord(Volt3dError, ValueError):
    pass


# --- volumes and tensors ----------------------------------------------------

class NonFiniteInput(Volt3dError, ValueError):
    pass


class BadAxis(Volt3dError, ValueError):
    pass


class ShapeMismatch(Volt3dError, ValueError):
    pass


class SpatialTooSmall(Volt3dError, ValueError):
    pass


class StaleRecord(Volt3dError, ValueError):
    pass


class DegenerateBatch(Volt3dError, ValueError):
    pass


class BadRate(Volt3dError, ValueError):
    pass


class BadLabel(Volt3dError, ValueError):
    pass


class NonFiniteGradient(NumericError):
    pass


# --- model / training -------------------------------------------------------

class InfeasibleSpec(Volt3dError, ValueError):
    pass


class StaleTape(Volt3dError, RuntimeError):
    pass


class KeyMismatch(Volt3dError, KeyError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, epoch, batch_index, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index
        self.value = value


# --- datasets ---------------------------------------------------------------

class LayoutError(Volt3dError, ValueError):
    pass


class EmptyClass(Volt3dError, ValueError):
    pass


class TooFewSamples(Volt3dError, ValueError):
    pass


class RadiiTooLarge(Volt3dError, ValueError):
    pass


# --- metrics ----------------------------------------------------------------

class LengthMismatch(Volt3dError, ValueError):
    pass


class EmptyMatrix(Volt3dError, ValueError):
    pass


class OneClassOnly(Volt3dError, ValueError):
    pass


# --- configuration ----------------------------------------------------------

class ConfigError(Volt3dError, ValueError):
    pass
