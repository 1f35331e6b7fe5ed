"""Exception hierarchy shared across the pipeline."""


class SelfscreenError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(SelfscreenError, ValueError):
    """Input violates a documented contract (bad item score, bad record...)."""


class DuplicateIdError(ValidationError):
    def __init__(self, sample_id: str, where: str = ""):
        self.sample_id = sample_id
        msg = f"duplicate sample_id {sample_id!r}"
        super().__init__(f"{msg} ({where})" if where else msg)


class DegenerateDataError(ValidationError):
    """Training or evaluation data lacks one of the two classes."""


class NumericError(SelfscreenError, ArithmeticError):
    pass


class TransportError(SelfscreenError):
    """Network failure talking to a provider, after retries were exhausted."""

    def __init__(self, message: str, attempts: int = 1):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempt(s))")


class ProviderHTTPError(SelfscreenError):
    """Non-retryable HTTP error returned by a provider."""

    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"provider returned HTTP {status}: {body[:500]}")


class AuthenticationError(ProviderHTTPError):
    pass


class ProtocolError(SelfscreenError):
    """Provider replied, but with something we cannot use."""


class UnparseableVerdictError(ProtocolError):
    def __init__(self, raw_text: str, reason: str):
        self.raw_text = raw_text
        super().__init__(f"unparseable zero-shot verdict: {reason}")


class MissingEmbeddingError(SelfscreenError, KeyError):
    def __init__(self, sample_id: str):
        self.sample_id = sample_id
        super().__init__(f"no embedding for sample_id {sample_id!r}")

    def __str__(self) -> str:
        return self.args[0]


class StageError(SelfscreenError):
    """Failure in one stage (describe | embed | classify) of a screening request."""

    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")
