"""Exception hierarchy. Every error carries enough context to locate the bad input."""


class DrrQuantError(Exception):
    """Base class for all package errors."""


class ParseError(DrrQuantError):
    """Malformed header or file content."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class IntegrityError(DrrQuantError):
    """Payload size or content disagrees with its header."""


class UnsupportedFormatError(DrrQuantError):
    pass


class GeometryError(DrrQuantError):
    """Two grids that must be paired do not share geometry."""


class InvariantError(DrrQuantError):
    """A value violates a documented type invariant."""


class UsageError(DrrQuantError, ValueError):
    pass


class DegenerateError(DrrQuantError):
    """Input is valid in form but yields an empty or undefined result."""


class UnsupportedSpecError(DrrQuantError):
    pass


class UndefinedStatisticError(DrrQuantError):
    """A statistic has no value on this sample (e.g. zero variance)."""


class ValidationError(DrrQuantError):
    """Manifest validation failure, tagged with the case and field at fault."""

    def __init__(self, message, case_id=None, field=None):
        self.case_id = case_id
        self.field = field
        where = ", ".join(
            p for p in (f"case {case_id!r}" if case_id else "", f"field {field!r}" if field else "") if p
        )
        super().__init__(f"{where}: {message}" if where else message)


class CaseError(DrrQuantError):
    """A per-case pipeline failure during evaluation."""

    def __init__(self, case_id, cause):
        self.case_id = case_id
        self.cause = cause
        super().__init__(f"case {case_id!r}: {cause}")
