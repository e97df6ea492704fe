"""Exception taxonomy shared by all oblix modules."""


class OblixError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OblixError):
    """Operand shapes are incompatible; message names both shapes."""


class RangeError(OblixError):
    """Value exceeds a representable range (e.g. binary16 overflow)."""


class StepError(OblixError):
    """Step index outside the schedule, or non-monotone step pair."""


class ConfigError(OblixError):
    """Invalid configuration parameter."""


class InputError(OblixError):
    """Invalid user-facing input (e.g. empty prompt)."""


class SessionError(OblixError):
    """State object used outside the session that owns it."""


class ProtocolError(OblixError):
    """Malformed or inconsistent wire traffic.

    ``offset`` points at the first offending byte when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class FrameError(OblixError):
    """Message cannot be framed (oversize payload, invalid contents)."""


class TemplateError(OblixError):
    """Prompt template references an unknown placeholder."""


class InternalError(OblixError):
    """Invariant violation that indicates a bug, not misuse."""
