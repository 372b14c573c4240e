"""
Exception hierarchy for the geodata retrieval agent.

Every error raised by the modules in this repository derives from GeoDataError,
grouped by concern so callers (the agent loop, the CLI, the Flask server) can
catch a whole family at once.
"""


class GeoDataError(Exception):
    """Root of all errors raised by this project."""


# --- registry -------------------------------------------------------------

class RegistryError(GeoDataError):
    pass


class DuplicateAlias(RegistryError):
    pass


class MalformedManifest(RegistryError):
    pass


class MissingHandbook(RegistryError):
    pass


class EmptyRegistry(RegistryError):
    pass


class UnknownAlias(RegistryError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class AliasMismatch(RegistryError, ValueError):
    pass


class MissingSecret(RegistryError):
    pass


class MalformedPlaceholder(RegistryError, ValueError):
    pass


# --- prompting ------------------------------------------------------------

class PromptError(GeoDataError):
    pass


class EmptyRequest(PromptError, ValueError):
    pass


class EmptyIndex(PromptError, ValueError):
    pass


class EmptyErrorReport(PromptError, ValueError):
    pass


class UnparsableReply(PromptError):
    pass


class NoCodeBlock(PromptError):
    pass


class MissingEntryFunction(PromptError):
    pass


# --- llm client -----------------------------------------------------------

class LlmError(GeoDataError):
    pass


class TransportError(LlmError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class EmptyReply(LlmError):
    pass


class CassetteMiss(LlmError):
    pass


class RateLimited(TransportError):
    def __init__(self, message, retry_after=None):
        super().__init__(message, status=429)
        self.retry_after = retry_after


# --- sandbox --------------------------------------------------------------

class SandboxError(GeoDataError):
    pass


class InterpreterMissing(SandboxError):
    pass


class SandboxSetupError(SandboxError):
    pass


# --- agent ----------------------------------------------------------------

class SelectionUnparsable(GeoDataError):
    pass


class ConfigurationError(GeoDataError):
    pass


# --- osm geometry ---------------------------------------------------------

class GeometryError(GeoDataError):
    pass


class ParseError(GeometryError, ValueError):
    pass


class EmptyRelation(GeometryError):
    pass


class IoError(GeometryError, OSError):
    pass


# --- geo sources ----------------------------------------------------------

class SourceError(GeoDataError):
    pass


class HttpError(SourceError):
    def __init__(self, message, status=None, url=None):
        super().__init__(message)
        self.status = status
        self.url = url


class NoMatch(SourceError):
    pass


class OverpassRemark(SourceError):
    def __init__(self, remark):
        super().__init__(f"Overpass returned a remark instead of data: {remark}")
        self.remark = remark


class BBoxError(SourceError, ValueError):
    pass


class LatitudeOutOfRange(SourceError, ValueError):
    pass


class GridTooLarge(SourceError):
    pass


class NotAnImage(SourceError):
    pass


class DimensionMismatch(SourceError, ValueError):
    pass


class IncompleteGrid(SourceError, ValueError):
    pass


class ScopeRequired(SourceError, ValueError):
    pass


class BadVariableCode(SourceError, ValueError):
    pass


class EmptyVariables(SourceError, ValueError):
    pass


class ForecastTooLong(SourceError, ValueError):
    pass


class HistoricalTooEarly(SourceError, ValueError):
    pass


class EmptyRange(SourceError, ValueError):
    pass


class RangeError(SourceError, ValueError):
    pass


class MalformedCsv(SourceError):
    pass


class UnknownDemType(SourceError, ValueError):
    pass


class InvalidQuery(SourceError, ValueError):
    pass
