"""Exception hierarchy shared by every holdfield module."""

from __future__ import annotations


class HoldfieldError(Exception):
    """Base class for all holdfield failures."""


class InvalidTransform(HoldfieldError, ValueError):
    pass


class BehindCamera(HoldfieldError, ValueError):
    pass


class OutOfBounds(HoldfieldError, ValueError):
    pass


class InsideForeground(HoldfieldError, ValueError):
    pass


class DegenerateMesh(HoldfieldError, ValueError):
    pass


class EmptyLevelSet(HoldfieldError, ValueError):
    pass


class SceneScriptError(HoldfieldError, ValueError):
    """Invalid scene script. ``field`` is the dotted key path, ``line`` the TOML line."""

    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class SingularBlend(HoldfieldError, RuntimeError):
    pass


class NonFiniteLoss(HoldfieldError, RuntimeError):
    def __init__(self, message: str, *, step: int | None = None):
        self.step = step
        suffix = f" (step {step})" if step is not None else ""
        super().__init__(f"{message}{suffix}")


class StageFailed(HoldfieldError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")
