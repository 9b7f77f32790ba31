"""
Aseg Exceptions - error types shared by every module.

Each error carries the process exit code the CLI reports for it:
validation problems (bad config, missing files, malformed inputs) exit with 1,
everything else that goes wrong at runtime exits with 2.
"""

from typing import Any, Dict, Iterable, Optional, Sequence

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class AsegError(Exception):
    """Base error with an exit code and a detail message.

    Usage:
        raise AsegError("forward failed")
        raise ConfigError("unknown key 'model.widht'")
    """

    exit_code: int = EXIT_RUNTIME

    def __init__(self, detail: str = "", exit_code: Optional[int] = None):
        self.detail = detail or self.__class__.__name__
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(self.detail)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.__class__.__name__,
            "detail": self.detail,
            "exit_code": self.exit_code,
        }


class ShapeError(AsegError):
    """A tensor operation received operands of incompatible shape."""


class GradientError(AsegError):
    """Backward was requested on something that is not a scalar loss."""


class ConfigError(AsegError):
    """Invalid configuration: unknown keys, bad values, bad overrides."""

    exit_code = EXIT_VALIDATION


class CheckpointError(AsegError):
    """A weight checkpoint cannot be read or does not match the graph."""

    exit_code = EXIT_VALIDATION

    def __init__(self, detail: str, missing: Sequence[str] = (),
                 unexpected: Sequence[str] = ()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        super().__init__(detail)

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["missing"] = self.missing
        data["unexpected"] = self.unexpected
        return data


class NetpbmError(AsegError):
    """Malformed or truncated PPM/PGM file."""

    exit_code = EXIT_VALIDATION

    def __init__(self, detail: str, offset: int = 0, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{detail} (at byte offset {offset})")


class UndefinedMetricError(AsegError):
    """A metric was requested on an empty confusion matrix or band."""


class PruneError(AsegError):
    """A pruning plan or ranking request is invalid for the graph."""


class TrainingError(AsegError):
    """Training cannot proceed (no valid pixels, missing stage artifacts)."""

    exit_code = EXIT_VALIDATION


# Convenience factory functions
def shape_mismatch(op: str, expected: Any, got: Any) -> ShapeError:
    return ShapeError(f"{op}: expected {expected}, got {got}")


def unknown_keys(section: str, keys: Iterable[str]) -> ConfigError:
    listed = ", ".join(sorted(keys))
    where = section or "<root>"
    return ConfigError(f"unknown key(s) in {where}: {listed}")


def missing_file(path: str, what: str = "file") -> ConfigError:
    return ConfigError(f"{what} not found: {path}")
