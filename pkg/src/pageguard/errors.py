class PageGuardError(Exception):
    """Base class for all pageguard errors."""


class RegistryFull(PageGuardError):
    """No free op slot or page-index capacity; fall back to copy-send."""


class DuplicateOpError(PageGuardError, ValueError):
    pass


class UnknownOpError(PageGuardError, KeyError):
    pass


class OpInFlightError(PageGuardError):
    """Attempt to release an op whose send has not completed."""


class ProtectionError(PageGuardError, OSError):
    """The platform refused to change page protection."""


class GuardInitError(PageGuardError):
    pass


class TransportError(PageGuardError):
    pass


class UnknownDestination(TransportError, ValueError):
    pass


class TransportClosed(TransportError):
    pass


class StaleHandle(TransportError):
    pass


class IncompleteHandle(TransportError):
    pass


class MessageTooLarge(TransportError):
    def __init__(self, required, capacity):
        super().__init__(f"message of {required} bytes does not fit a {capacity}-byte buffer")
        self.required = required
        self.capacity = capacity
