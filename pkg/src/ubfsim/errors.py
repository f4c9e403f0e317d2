"""Exception hierarchy shared by every model in the package."""


class UbfsimError(Exception):
    """Base class for all model errors."""


class DirectoryError(UbfsimError):
    pass


class HostError(UbfsimError):
    pass


class IdentProtocolError(UbfsimError, ValueError):
    """A line does not conform to the identity-query wire grammar."""


class UnsupportedProtoError(IdentProtocolError):
    """The line is well formed but names a protocol other than TCP or UDP."""


class PermError(UbfsimError):
    pass


class PermissionDenied(PermError):
    pass


class SchedulerError(UbfsimError):
    pass


class ScenarioError(UbfsimError):
    """Scenario failed to parse or validate.

    ``where`` carries the JSON path (``events[3].args.user``) or a
    ``line:col`` position for parse errors.
    """

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)
