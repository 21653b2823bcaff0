#!/usr/bin/env python3
"""Shared helpers: logging, error types, numeric constants."""

import sys
from dataclasses import dataclass

VERBOSE = False

# Every array in the package is 64-bit; oracle tolerances assume it.
DTYPE = "float64"


@dataclass(frozen=True)
class Colours:
    red: str = "\033[31m"
    endc: str = "\033[m"
    green: str = "\033[32m"
    yellow: str = "\033[33m"
    blue: str = "\033[34m"


class PcgpError(Exception):
    """Base class for every error raised by the package."""


class InputError(PcgpError, ValueError):
    """Invalid shapes, dimensions, or parameter values."""


class NumericalError(PcgpError, ArithmeticError):
    """A factorization failed or an intermediate value is not finite."""

    def __init__(self, message: str, jitter: float | None = None, tensor: str | None = None):
        super().__init__(message)
        self.jitter = jitter
        self.tensor = tensor


class FormatError(PcgpError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        location = f"{path}: " if path else ""
        super().__init__(f"{location}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


class UsageError(PcgpError):
    """Bad configuration keys or values; reported like a flag error."""


def die(message: str) -> None:
    print(f"{Colours.red}[ERROR]{Colours.endc} {message}", file=sys.stderr)
    sys.exit(1)


def info(message: str) -> None:
    print(f"{Colours.blue}[INFO]{Colours.endc} {message}")


def warn(message: str) -> None:
    print(f"{Colours.yellow}[WARN]{Colours.endc} {message}")


def debug(message: str) -> None:
    if VERBOSE:
        print(f"{Colours.green}[DEBUG]{Colours.endc} {message}")
