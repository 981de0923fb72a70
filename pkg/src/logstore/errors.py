"""Exception hierarchy shared by all engine layers."""


class LogStoreError(Exception):
    pass


class StoreClosedError(LogStoreError):
    pass


class StorageFullError(LogStoreError):
    pass


class PayloadTooLargeError(LogStoreError):
    pass


class ChecksumError(LogStoreError):
    """A complete frame, index file or checkpoint failed its checksum."""


class AddressError(LogStoreError):
    pass


class MissingSegmentError(AddressError):
    pass


class SegmentInUseError(LogStoreError):
    pass


class CodecError(LogStoreError):
    pass


class ConflictError(LogStoreError):
    """Transaction failed validation; retry with a fresh begin()."""


class TransactionStateError(LogStoreError):
    pass


class CompactionError(LogStoreError):
    pass


class SchemaError(LogStoreError):
    pass


class KeyRangeError(LogStoreError):
    pass
