"""Exception hierarchy shared by every fusefl module."""


class FuseFLError(Exception):
    """Base class for all library errors."""


class OutOfRange(FuseFLError, ValueError):
    pass


class ShapeMismatch(FuseFLError, ValueError):
    pass


class PartyMismatch(FuseFLError, ValueError):
    pass


class TripleReuse(FuseFLError, RuntimeError):
    pass


class KeyReuse(FuseFLError, RuntimeError):
    pass


class DealerExhausted(FuseFLError, RuntimeError):
    pass


class UnknownArchitecture(FuseFLError, KeyError):
    pass


class ArchMismatch(FuseFLError, ValueError):
    pass


class BadMagic(FuseFLError, ValueError):
    pass


class TruncatedFile(FuseFLError, ValueError):
    pass


class OddClientCount(FuseFLError, ValueError):
    pass


class TooLarge(FuseFLError, ValueError):
    pass


class ConfigError(FuseFLError, ValueError):
    """Raised for malformed or unknown experiment configuration."""
