"""Exception types shared across modules."""


class DomainError(ValueError):
    """Argument outside the function's mathematical domain."""


class KeyExhausted(Exception):
    """Not enough secret key material left."""


class LengthMismatch(Exception):
    pass


class ProtocolViolation(Exception):
    """A message arrived that the current protocol state does not allow."""
