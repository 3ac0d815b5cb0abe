# errors.py
# Exception hierarchy for the migrado archive gateway.


class MigradoError(Exception):
    """Base class for every error raised by migrado."""


class ConfigError(MigradoError):
    pass


class UsageError(MigradoError):
    pass


# Negotiation

class MalformedMediaType(MigradoError):
    pass


class MalformedAccept(MigradoError):
    pass


class MalformedQValue(MalformedAccept):
    pass


# Registry

class RegistryError(MigradoError):
    pass


class DuplicateId(RegistryError):
    pass


class InvalidDescriptor(RegistryError):
    pass


# Store

class StoreError(MigradoError):
    pass


class InvalidUrl(StoreError):
    pass


class EmptyBody(StoreError):
    pass


class StorageFailure(StoreError):
    pass


class IntegrityFailure(StoreError):
    """Stored bytes no longer hash to the recorded digest."""

    def __init__(self, url: str, message: str = ""):
        self.url = url
        super().__init__(message or f"integrity failure: {url}")


class FetchFailed(StoreError):
    def __init__(self, url: str, reason: str, status: int = None):
        self.url = url
        self.status = status
        super().__init__(f"fetch of {url} failed: {reason}")


class PermissionDenied(StoreError):
    pass


class MissingContentType(StoreError):
    pass


# Converters

class ConversionError(MigradoError):
    pass


class SourceTargetMismatch(ConversionError):
    pass


class MalformedInput(ConversionError):
    pass


class ConversionFailed(ConversionError):
    pass


class ConverterCrashed(ConversionError):
    pass


class ConverterTimeout(ConversionError):
    pass


class EmptyOutput(ConversionError):
    pass


# Registry client

class RegClientError(MigradoError):
    pass


class MalformedManifest(RegClientError):
    pass


class DigestMismatch(RegClientError):
    pass


# Gateway

class UpstreamFailure(MigradoError):
    pass
