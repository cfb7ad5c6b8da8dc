"""Exception hierarchy shared by every stage of the pipeline."""


class GanCnnError(Exception):
    pass


class ShapeError(GanCnnError, ValueError):
    """An operand or volume has dimensions the operation cannot accept."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class InvalidShapeError(ShapeError):
    pass


class ContractError(GanCnnError, ValueError):
    """A documented precondition was violated by the caller."""


class TapeConsumedError(ContractError):
    pass


class InvalidRateError(ContractError):
    pass


class DegenerateBatchError(ContractError):
    pass


class ConfigError(ContractError):
    pass


class GanDivergenceError(GanCnnError, ArithmeticError):
    def __init__(self, epoch, g_loss, d_loss):
        super().__init__(f"non-finite GAN loss at epoch {epoch} (g={g_loss}, d={d_loss})")
        self.epoch = epoch


class NiftiError(GanCnnError, ValueError):
    """Malformed NIfTI-1 input. ``field`` names the offending header field."""

    field = "header"

    def __init__(self, message, field=None):
        if field is not None:
            self.field = field
        super().__init__(f"{self.field}: {message}")


class BadMagicError(NiftiError):
    field = "magic"


class UnsupportedDatatypeError(NiftiError):
    field = "datatype"


class TruncatedPayloadError(NiftiError):
    field = "vox_offset"


class BadDimError(NiftiError):
    field = "dim"
