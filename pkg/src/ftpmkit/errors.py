"""Exception hierarchy.

Two families matter to callers: :class:`FormatError` and friends signal
malformed input (CLI exit code 2), while :class:`DomainFailure` subclasses
signal that well-formed input did not yield a result, e.g. a wrong key or an
exhausted search (CLI exit code 1).
"""


class FtpmError(Exception):
    pass


# -- malformed input / usage --------------------------------------------------

class FormatError(FtpmError):
    pass


class SizeMismatch(FormatError):
    pass


class TruncatedEntry(FormatError):
    pass


class InvalidKey(FormatError):
    pass


class InvalidLength(FormatError):
    pass


class InvalidNonce(FormatError):
    pass


class InvalidPin(FormatError):
    pass


class CapacityError(FormatError):
    pass


class BadPcrIndex(FormatError):
    pass


class AmbiguousSections(FormatError):
    pass


# -- co-processor simulator ---------------------------------------------------

class LsbError(FtpmError):
    pass


class BadAddress(LsbError):
    pass


class ReadProtected(LsbError):
    pass


class WriteProtected(LsbError):
    pass


class AlignmentViolation(LsbError):
    pass


# -- domain failures ------------------------------------------------------------

class DomainFailure(FtpmError):
    pass


class AuthFailure(DomainFailure):
    pass


class IntegrityError(DomainFailure):
    pass


class WrongSeedOrTampered(DomainFailure):
    pass


class NotFound(DomainFailure):
    pass


class SeedNotFound(NotFound):
    pass


class UnsealFailed(DomainFailure):
    pass


class WrongPin(DomainFailure):
    pass


class Exhausted(DomainFailure):
    pass


class ExtractionFailed(DomainFailure):
    pass


class ExtractionImpossible(DomainFailure):
    pass
