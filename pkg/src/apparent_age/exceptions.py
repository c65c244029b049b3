class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class EmptyInputError(ValueError):
    """Raised when an aggregate is requested over zero items."""


class ManifestError(ValueError):
    """A manifest file failed validation.

    ``diagnostics`` holds one ``"line N: message"`` string per rejected row.
    """

    def __init__(self, message, diagnostics=()):
        self.diagnostics = list(diagnostics)
        if self.diagnostics:
            message = message + "\n" + "\n".join(self.diagnostics)
        super().__init__(message)


class ProjectorUnavailableError(RuntimeError):
    """The requested 2D projector depends on a package that is not installed."""

    def __init__(self, projector, package, extra=None):
        self.projector = projector
        self.package = package
        hint = f"pip install {package}"
        if extra:
            hint += f"  (or: pip install 'artifact[{extra}]')"
        super().__init__(f"projector '{projector}' requires the optional package '{package}'; install it with: {hint}")
