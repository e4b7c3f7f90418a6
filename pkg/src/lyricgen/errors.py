"""Exception hierarchy shared across the package."""


class LyricGenError(Exception):
    """Base class for all errors raised by lyricgen."""


class DimensionError(LyricGenError, ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(LyricGenError, ValueError):
    """A precondition of an operation was violated."""


class ParseError(LyricGenError, ValueError):
    """Malformed textual input (melody files, structure tokens)."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class AlignmentError(LyricGenError, ValueError):
    """Lyrics and melody disagree on line or syllable counts."""


class DegenerateBatchError(ContractError):
    """A loss was requested over a batch with no unmasked positions."""


class TrainingDivergenceError(LyricGenError, RuntimeError):
    """Non-finite loss or gradient encountered during training."""

    def __init__(self, message, last_good_checkpoint=None):
        self.last_good_checkpoint = last_good_checkpoint
        if last_good_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_good_checkpoint})"
        super().__init__(message)


class CheckpointError(LyricGenError, IOError):
    """A checkpoint file could not be read or is incompatible."""


class ConfigError(ContractError):
    """A configuration value is out of range; ``field`` names the offender."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
