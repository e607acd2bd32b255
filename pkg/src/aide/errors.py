"""Error types shared across the server.

Every error carries a stable ``kind`` string (the class name) that is used
verbatim on the wire: REST responses put it in the error body, JSON-RPC
responses put it in ``error.data.kind``.
"""

from __future__ import annotations


class AideError(Exception):
    """Base class for all application errors."""

    def __init__(self, message: str, **details: object) -> None:
        super().__init__(message)
        self.message = message
        self.details = {k: v for k, v in details.items() if v is not None}

    @property
    def kind(self) -> str:
        return type(self).__name__

    def to_wire(self) -> dict:
        body: dict = {"kind": self.kind, "message": self.message}
        body.update(self.details)
        return body


class ValidationError(AideError):
    def __init__(self, field: str, reason: str) -> None:
        super().__init__(f"{field}: {reason}", field=field)
        self.field = field
        self.reason = reason


# -- storage ---------------------------------------------------------------

class StorageFull(AideError):
    pass


class CorruptLog(AideError):
    def __init__(self, message: str, path: str | None = None, offset: int | None = None) -> None:
        super().__init__(message, path=path, offset=offset)
        self.path = path
        self.offset = offset


# -- ingest / query --------------------------------------------------------

class DuplicateTraceId(AideError):
    pass


class BatchTooLarge(AideError):
    pass


class UnknownProject(AideError):
    pass


class UnknownTrace(AideError):
    pass


class UnknownField(AideError):
    pass


class InvalidRange(AideError):
    pass


class WindowTooWide(AideError):
    pass


# -- prompt registry -------------------------------------------------------

class UnknownPrompt(AideError):
    pass


class UnknownVersion(AideError):
    pass


class VersionConflict(AideError):
    pass


class EmptyTemplate(AideError):
    pass


class NoHistory(AideError):
    pass


class UnknownBinding(AideError):
    pass


# -- ci gate ---------------------------------------------------------------

class EmptyRun(AideError):
    pass


class UnknownRun(AideError):
    pass


class EmptyWindow(AideError):
    pass


# -- control plane ---------------------------------------------------------

class ExperimentNotRunning(AideError):
    pass


class ExperimentAlreadyRunning(AideError):
    pass


class UnknownExperiment(AideError):
    pass


class ScoreOutOfRange(AideError):
    pass


class PausedAgent(AideError):
    pass


# -- monitor ---------------------------------------------------------------

class UnknownRule(AideError):
    pass


class UnknownProposal(AideError):
    pass


class IllegalTransition(AideError):
    pass


class EvaluatorError(AideError):
    def __init__(self, name: str, reason: str) -> None:
        super().__init__(f"evaluator {name}: {reason}", name=name)
        self.name = name
        self.reason = reason


# -- transport -------------------------------------------------------------

class LaggingSubscriber(AideError):
    pass


class Unauthorized(AideError):
    pass
