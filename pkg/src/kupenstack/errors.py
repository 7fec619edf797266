"""Exception vocabulary shared by the store, runtime, controllers and simulator."""


class KupenStackError(Exception):
    """Base class for all engine errors."""


# --- resource model ---

class UnknownKindError(KupenStackError):
    pass


class ValidationFailedError(KupenStackError):
    """Raised on writes of structurally invalid objects.

    Carries the field-path violations so callers can surface them.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(f"{v.path}: {v.message}" for v in self.violations)
        super().__init__(f"validation failed: {lines}")


class ManifestParseError(KupenStackError):
    """Malformed manifest document (syntax, missing envelope fields)."""

    def __init__(self, message, source=None):
        self.source = source
        super().__init__(f"{source}: {message}" if source else message)


# --- state store ---

class NotFoundError(KupenStackError):
    pass


class AlreadyExistsError(KupenStackError):
    pass


class ConflictError(KupenStackError):
    """Compare-and-swap failed: the caller's resourceVersion is stale."""


class CompactedRevisionError(KupenStackError):
    """Watch start revision is older than the retained history window."""


# --- controller runtime ---

class DuplicateControllerError(KupenStackError):
    pass


# --- simulated planes ---

class ServiceUnavailableError(KupenStackError):
    """No ready service unit for the target service, or an API error burst is active."""


class QuotaExceededError(KupenStackError):
    """Node capacity (or an address pool) is exhausted."""


class NoValidHostError(KupenStackError):
    """No healthy node matches the placement constraint."""


class ProjectNotEmptyError(KupenStackError):
    pass
