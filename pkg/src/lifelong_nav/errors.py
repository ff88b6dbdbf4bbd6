"""Exception types raised across the package."""


class LifelongNavError(Exception):
    pass


class DimensionError(LifelongNavError, ValueError):
    pass


class ConfigurationError(LifelongNavError, ValueError):
    pass


class PreconditionError(LifelongNavError, ValueError):
    pass


class ContractViolation(LifelongNavError, RuntimeError):
    pass


class ProtocolViolation(LifelongNavError, RuntimeError):
    """A task reuses a scene that was already learned."""


class TrainingDivergence(LifelongNavError, FloatingPointError):
    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


class GenerationError(LifelongNavError, RuntimeError):
    pass


class RoutingError(LifelongNavError, RuntimeError):
    pass


class InputError(LifelongNavError, ValueError):
    pass
