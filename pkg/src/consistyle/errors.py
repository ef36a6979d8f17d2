"""Exception hierarchy shared by every layer of the package.

The CLI maps these onto its exit codes: ``ConfigError`` -> 2,
``ArtifactError`` -> 3, anything else -> 1.
"""


class ConsiStyleError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(ConsiStyleError, ValueError):
    pass


class NonFiniteError(ConsiStyleError, ValueError):
    pass


class ConfigError(ConsiStyleError, ValueError):
    def __init__(self, key, constraint):
        self.key = key
        self.constraint = constraint
        super().__init__(f"config key '{key}': {constraint}")


class ArtifactError(ConsiStyleError):
    """A file on disk is unreadable or corrupt."""

    def __init__(self, path, offset, reason):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{path}: corrupt at byte {offset}: {reason}")


class HookError(ConsiStyleError, RuntimeError):
    def __init__(self, step, layer, cause):
        self.step = step
        self.layer = layer
        super().__init__(f"hook failed at step {step}, layer {layer}: {cause}")


class PhaseError(ConsiStyleError, RuntimeError):
    def __init__(self, phase, cause):
        self.phase = phase
        self.cause = cause
        super().__init__(f"[{phase}] {cause}")
