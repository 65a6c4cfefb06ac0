"""Exception types shared across the pipeline."""


class OpshieldError(Exception):
    """Base class for all package errors."""


class FormatError(OpshieldError):
    """Malformed input text or binary blob."""

    def __init__(self, line_no, reason):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class EmptyInput(OpshieldError, ValueError):
    pass


class EmptySequence(OpshieldError, ValueError):
    pass


class EmptyCorpus(OpshieldError, ValueError):
    pass


class EmptyDataset(OpshieldError, ValueError):
    pass


class SingleClassDataset(OpshieldError, ValueError):
    pass


class InvalidConfig(OpshieldError, ValueError):
    pass


class TokenOutOfRange(OpshieldError, IndexError):
    pass


class SequenceTooLong(OpshieldError, ValueError):
    pass


class DimMismatch(OpshieldError, ValueError):
    pass


class LengthMismatch(OpshieldError, ValueError):
    pass


class TooFewSamples(OpshieldError, ValueError):
    pass
