"""Exception hierarchy shared by every layer of the stack."""


class PhenoAuthError(Exception):
    """Base class for all errors raised by this package."""


# crypto
class LengthExceeded(PhenoAuthError, ValueError):
    pass


class AuthFailure(PhenoAuthError):
    """AEAD decryption or tag verification failed."""


class NonceReuse(PhenoAuthError):
    pass


# puf simulator / phenotype
class BadConfig(PhenoAuthError, ValueError):
    pass


class OutOfRange(PhenoAuthError, IndexError):
    pass


class LengthMismatch(PhenoAuthError, ValueError):
    pass


class InsufficientStableCells(PhenoAuthError):
    pass


# authenticator
class InsufficientData(PhenoAuthError, ValueError):
    pass


class DegenerateLabels(PhenoAuthError):
    pass


class ShapeMismatch(PhenoAuthError, ValueError):
    pass


# protocol / wire / transport
class UnknownPeer(PhenoAuthError, KeyError):
    pass


class SessionBusy(PhenoAuthError):
    """A session with the same peer is already live on this device."""


class PhaseError(PhenoAuthError):
    """Message received outside the protocol phase that permits it."""


class DecodeError(PhenoAuthError, ValueError):
    pass


class ChannelClosed(PhenoAuthError):
    pass
