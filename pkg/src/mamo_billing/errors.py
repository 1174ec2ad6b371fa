"""Exception hierarchy shared by all pipeline stages."""


class MamoError(Exception):
    """Base class for every error raised by this package."""


# authz
class IncompatibleModeSet(MamoError):
    pass


class UndefinedDiagonal(MamoError):
    pass


# envelope
class EnvelopeError(MamoError):
    pass


class InvalidText(EnvelopeError):
    pass


class InvalidAlphabet(EnvelopeError):
    pass


class TamperDetected(EnvelopeError):
    """The segment cannot be opened: its rules or body were altered."""


class WrongKey(TamperDetected):
    """The supplied key does not match the header's key check value.

    A key-check mismatch is indistinguishable from a corrupted key-check
    field, so this is a specialisation of TamperDetected.
    """


class MalformedFrame(EnvelopeError):
    pass


class EditRejected(EnvelopeError):
    def __init__(self, mode, reason):
        super().__init__(f"edit rejected under {mode}: {reason}")
        self.mode = mode
        self.reason = reason


# reconciler
class NoCoveringSchedule(MamoError):
    pass


# assurance
class ScheduleMismatch(MamoError):
    pass


class UnknownField(MamoError):
    pass


class InsufficientBalance(MamoError):
    def __init__(self, subscriber, balance, charge):
        super().__init__(
            f"{subscriber}: charge {charge} would take balance {balance} below floor"
        )
        self.subscriber = subscriber
        self.balance = balance
        self.charge = charge


# cli
class ConfigError(MamoError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{field}: {msg}" for field, msg in self.problems))
