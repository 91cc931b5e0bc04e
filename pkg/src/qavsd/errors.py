"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class WavError(IOError):
    """Malformed or unsupported WAV input."""


class RateError(WavError):
    """WAV sample rate other than 16 kHz."""


class LengthError(ValueError):
    """Input too short for the requested operation."""


class AlignmentError(ValueError):
    """Audio and visual streams diverge by more than the tolerated amount."""


class GenerationError(RuntimeError):
    """Synthetic data generator could not meet its target."""


class EnrollmentError(ValueError):
    """A speaker lacks enough attributed frames to be enrolled."""


class SamplingError(ValueError):
    """Not enough speech in a scene to draw training pairs."""


class TrainingError(RuntimeError):
    """Training diverged; carries the last good checkpoint path."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class RTTMParseError(ValueError):
    """Malformed RTTM line."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
