"""Exception hierarchy shared by every canfed module."""


class CanFedError(Exception):
    """Base class; the CLI turns these into a one-line diagnostic."""


# can-data
class MalformedLine(CanFedError):
    pass


class InvalidId(CanFedError):
    pass


class DlcMismatch(CanFedError):
    pass


class EmptySpec(CanFedError):
    pass


class ZeroVehicles(CanFedError):
    pass


# segmentation
class TooFewFrames(CanFedError):
    pass


# attack-gen
class OutOfRange(CanFedError):
    pass


class MissingLayout(CanFedError):
    pass


class NotAPhysicalSignal(CanFedError):
    pass


# autoencoder
class ShapeMismatch(CanFedError):
    pass


class EmptyDataset(CanFedError):
    pass


class EmptyErrors(CanFedError):
    pass


# fed-core
class NoUpdates(CanFedError):
    pass


class TransportFailure(CanFedError):
    pass


class StalledRound(CanFedError):
    pass


# pubsub
class MalformedFrame(CanFedError):
    pass


class BindFailure(CanFedError):
    pass


class RetryExhausted(TransportFailure):
    pass


class Disconnected(TransportFailure):
    pass


class AuthRejected(TransportFailure):
    pass
