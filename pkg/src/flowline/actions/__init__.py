from .protocol import (  # noqa: F401
    ACTIVE,
    SUCCEEDED,
    FAILED,
    ActionProvider,
    ProviderHost,
    ProviderError,
    Unauthorized,
    SchemaViolation,
    UnknownAction,
    NotTerminal,
    InvalidRequest,
    ProviderUnavailable,
)
from .builtin import build_providers  # noqa: F401
