"""Exception hierarchy shared across the workbench."""


class TrustbenchError(Exception):
    """Base class for all workbench errors."""


class ValidationError(TrustbenchError):
    """Invalid argument, configuration, or input file content."""


class InvalidBitLength(ValidationError):
    """Bit sequence length not divisible by the scheme's bits per symbol."""


class InvalidRolloff(ValidationError):
    """RRC roll-off outside (0, 1]."""


class SymbolCountMismatch(ValidationError):
    """Symbol sequence length does not match the frame geometry."""


class ShapeError(ValidationError):
    """Tensor shape inconsistent with the graph; message names the layer."""


class InvalidFraction(ValidationError):
    """Train fraction outside the usable (0, 1) range."""


class MissingLevel(ValidationError):
    """An SNR level required by a sweep has no frames."""


class InvalidBit(ValidationError):
    """Bit position outside 0..31."""


class InvalidTrialCount(ValidationError):
    """Fault campaign trial count below 1."""


class EmptyEvalSet(ValidationError):
    """Fault campaign evaluation subset is empty."""


class ConfigError(ValidationError):
    """Attack configuration is incomplete or inconsistent."""


class TrainingDiverged(TrustbenchError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")


class IoError(TrustbenchError):
    """File could not be read or written; message carries the path."""

    def __init__(self, path, detail=""):
        self.path = str(path)
        msg = f"I/O failure on {self.path}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class FormatError(IoError):
    """On-disk structure corrupt; message carries the byte offset."""

    def __init__(self, path, offset: int, detail=""):
        self.offset = offset
        super(IoError, self).__init__(
            f"bad file structure in {path} at offset {offset}"
            + (f": {detail}" if detail else "")
        )
        self.path = str(path)


class IntegrityError(IoError):
    """Payload disagrees with the embedded directory (shape/size mismatch)."""

    def __init__(self, path, detail=""):
        super(IoError, self).__init__(
            f"integrity check failed for {path}" + (f": {detail}" if detail else "")
        )
        self.path = str(path)


class BlackBoxViolation(TrustbenchError):
    """A black-box attack tried to reach a gradient channel."""
