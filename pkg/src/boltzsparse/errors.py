"""Exception types raised across the package."""


class InvalidConfig(ValueError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class NonConvergence(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class GeometryMismatch(ValueError):
    pass


class EmptyEnsemble(ValueError):
    pass


class MissingArtifacts(FileNotFoundError):
    pass
