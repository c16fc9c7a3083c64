"""Exception hierarchy shared by every module."""


class SchedError(Exception):
    """Base class for all toolkit errors."""


class ConflictError(SchedError):
    """A launch targets a GPU that is still occupied."""


class UnknownJobError(SchedError):
    """A job id is not present where it was expected."""


class ParseError(SchedError):
    def __init__(self, path, line, msg):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {msg}")


class MissingProfileError(SchedError):
    """No profile row covers the requested GPU count."""


class ConfigError(SchedError):
    def __init__(self, key, msg):
        self.key = key
        super().__init__(f"{key}: {msg}")


class IncompleteWindowError(SchedError):
    """A measured job was still unfinished when the run stopped."""


class StallError(SchedError):
    """The engine made no progress for too many rounds."""


class DeadlockError(SchedError):
    """The lease harness ran out of deliverable events before all workers exited."""
