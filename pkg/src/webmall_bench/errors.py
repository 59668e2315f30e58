"""Exception hierarchy shared by all webmall-bench modules."""

from typing import Optional


class WebMallError(Exception):
    """Base class for every error raised by webmall-bench."""


class ConfigError(WebMallError, ValueError):
    """Missing or invalid configuration (files, env vars, options)."""


class CatalogError(WebMallError, ValueError):
    """The catalog file violates the catalog format or an Offer/Shop invariant."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NormalizationError(WebMallError, ValueError):
    """A URL could not be parsed into canonical form."""


class IndexBuildError(WebMallError, ValueError):
    """Index construction or index file loading failed."""


class EmbeddingError(WebMallError):
    """The embedding provider failed to produce vectors."""

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class CommerceError(WebMallError, ValueError):
    """Base class for transactional errors surfaced to shop interfaces."""


class UnknownSessionError(CommerceError):
    pass


class UnknownOfferError(CommerceError):
    pass


class ShopMismatchError(CommerceError):
    pass


class InvalidQuantityError(CommerceError):
    pass


class EmptyCartError(CommerceError):
    pass


class ShippingError(CommerceError):
    pass


class PaymentError(CommerceError):
    pass


class PolicyError(WebMallError):
    """The decision policy could not produce an action."""


class NetworkError(WebMallError):
    """A shop endpoint is unreachable or a port cannot be bound."""


class EvaluationError(WebMallError, ValueError):
    """Scoring, aggregation or reporting could not proceed."""


# exit codes used by the CLI
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NETWORK = 3
EXIT_SCORING = 4
EXIT_POLICY = 5


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, NetworkError):
        return EXIT_NETWORK
    if isinstance(error, EvaluationError):
        return EXIT_SCORING
    if isinstance(error, PolicyError):
        return EXIT_POLICY
    return EXIT_CONFIG
