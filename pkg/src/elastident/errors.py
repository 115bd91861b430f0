"""Exception hierarchy.

Every error carries a ``category`` string used by the command-line layer to
emit one machine-parsable failure line. Catch :class:`ElastidentError` to
handle any error from this package generically.
"""


class ElastidentError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class DomainError(ElastidentError):
    """A physical parameter is outside its admissible range."""

    category = "domain-error"


class DegenerateDeformationError(ElastidentError):
    """Deformation gradient is (numerically) non-invertible or inverted."""

    category = "degenerate-deformation"


class OutOfDomainError(ElastidentError):
    """A particle's interpolation stencil leaves the background grid."""

    category = "out-of-domain"


class InstabilityError(ElastidentError):
    """Simulation exceeded the CFL speed guard or produced non-finite state."""

    category = "instability"


class CorrespondenceError(ElastidentError):
    """Two particle snapshots cannot be matched index-by-index."""

    category = "correspondence-error"


class DimensionMismatchError(ElastidentError):
    """Two fields/images do not share the same pixel dimensions."""

    category = "dimension-mismatch"


class MalformedHeaderError(ElastidentError):
    """A binary file header failed to parse. ``offset`` is the byte position."""

    category = "malformed-header"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedPayloadError(ElastidentError):
    """A binary payload ended early. ``missing`` is the missing byte count."""

    category = "truncated-payload"

    def __init__(self, message, missing=None):
        if missing is not None:
            message = f"{message} (missing {missing} bytes)"
        super().__init__(message)
        self.missing = missing


class SceneParseError(ElastidentError):
    """Scene file failed to parse; carries 1-based line and column."""

    category = "parse-error"

    def __init__(self, message, line=None, column=None):
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "")
            message = f"{message} ({where})"
        super().__init__(message)
        self.line = line
        self.column = column


class SceneValidationError(ElastidentError):
    """Scene parsed but violates an invariant; names the offending field."""

    category = "validation-error"


class MissingMaterialError(ElastidentError):
    """One or more scene objects have no material assignment."""

    category = "missing-material"

    def __init__(self, object_ids):
        self.object_ids = tuple(sorted(object_ids))
        super().__init__(
            "no material for object id(s): " + ", ".join(str(i) for i in self.object_ids)
        )


class NoUnfrozenObjectsError(ElastidentError):
    """Optimization requested but every material-field entry is frozen."""

    category = "no-unfrozen-objects"


class GradientUnavailableError(ElastidentError):
    """Finite differencing failed on both sides of a parameter point."""

    category = "gradient-unavailable"


class TransportError(ElastidentError):
    """HTTP request to the material-initialization service failed."""

    category = "transport-error"


class SchemaViolationError(ElastidentError):
    """Service response violated the JSON contract; names the field."""

    category = "schema-violation"

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{message} (field: {field})"
        super().__init__(message)
        self.field = field


class NoFallbackError(ElastidentError):
    """Service unusable and no fallback material field was provided."""

    category = "no-fallback"


class UsageError(ElastidentError):
    """Command-line arguments are inconsistent."""

    category = "usage-error"
