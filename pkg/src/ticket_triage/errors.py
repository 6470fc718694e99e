"""Exception hierarchy shared across the package."""


class TriageError(Exception):
    """Base class for all package errors."""


# features / models
class EmptyCorpus(TriageError):
    pass


class EmptyVocabulary(TriageError):
    pass


class DegenerateLabels(TriageError):
    pass


class ShapeMismatch(TriageError):
    pass


class FeatureOutOfRange(TriageError):
    pass


class ModelFormatError(TriageError):
    """A serialized model could not be parsed or failed validation."""


# taxonomy / templates
class TaxonomyViolation(TriageError):
    pass


class NoTemplate(TriageError):
    pass


class FileFormatError(TriageError):
    """Raised by the taxonomy/template/corpus loaders with a line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


# gateway
class GatewayError(TriageError):
    pass


class AuthError(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class Transport(GatewayError):
    pass


class MalformedPayload(GatewayError):
    pass


class NotFound(GatewayError):
    pass


class EmptyBody(GatewayError):
    pass


class PortInUse(GatewayError):
    pass


# runner
class GatewayUnavailable(TriageError):
    """The whole cycle failed because tickets could not be fetched."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class BundleError(TriageError):
    pass


class MissingComponent(BundleError):
    pass


class HashMismatch(BundleError):
    pass


class IncompatibleVersions(BundleError):
    pass


class TaxonomyMismatch(BundleError):
    pass


class IoFailure(TriageError):
    pass


# evaluation
class EmptyPartition(TriageError):
    pass


class LengthMismatch(TriageError):
    pass
