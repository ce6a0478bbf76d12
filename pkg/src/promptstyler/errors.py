"""Exception hierarchy shared by every stage of the pipeline."""


class PromptStylerError(Exception):
    """Base class for all library errors."""


class ZeroVector(PromptStylerError, ValueError):
    pass


class DimensionMismatch(PromptStylerError, ValueError):
    pass


class NotNormalized(PromptStylerError, ValueError):
    pass


class MissingIndex(PromptStylerError, ValueError):
    pass


class UnknownClass(PromptStylerError, KeyError):
    pass


class MissingStyleVector(PromptStylerError, ValueError):
    pass


class MissingStyleSlot(PromptStylerError, ValueError):
    pass


class SequenceTooLong(PromptStylerError, ValueError):
    pass


class BadArchitecture(PromptStylerError, ValueError):
    pass


class BadDistribution(PromptStylerError, ValueError):
    pass


class NonFiniteLoss(PromptStylerError, ArithmeticError):
    """Raised when a loss or gradient becomes NaN/Inf during optimization."""

    def __init__(self, message, *, iteration=None, style_index=None):
        super().__init__(message)
        self.iteration = iteration
        self.style_index = style_index


class LabelOutOfRange(PromptStylerError, ValueError):
    pass


class EmptyDataset(PromptStylerError, ValueError):
    pass


class ConfigInvalid(PromptStylerError, ValueError):
    """Configuration failed validation; ``problems`` maps field paths to messages."""

    def __init__(self, problems):
        self.problems = dict(problems)
        detail = "; ".join(f"{k}: {v}" for k, v in sorted(self.problems.items()))
        super().__init__(f"invalid config: {detail}")


class FormatError(PromptStylerError, ValueError):
    """A binary container had a bad magic, version or truncated payload."""
