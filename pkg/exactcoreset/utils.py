import json
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np


class ExactCoresetError(Exception):
    """Base class for every error raised by exactcoreset."""


class DimensionMismatch(ExactCoresetError, ValueError):
    pass


class InvalidTarget(ExactCoresetError, ValueError):
    pass


class InvalidClusterCount(ExactCoresetError, ValueError):
    pass


class NoNullspace(ExactCoresetError, ArithmeticError):
    pass


class TooFewRows(ExactCoresetError, ValueError):
    pass


class IndexOutOfRange(ExactCoresetError, IndexError):
    pass


class TooFewPoints(ExactCoresetError, ValueError):
    pass


class NoOverlap(ExactCoresetError):
    pass


class SingularSystem(ExactCoresetError, ArithmeticError):
    pass


class LengthMismatch(ExactCoresetError, ValueError):
    pass


class Degenerate(ExactCoresetError, ArithmeticError):
    pass


class Timer:
    """Accumulates wall-clock time (milliseconds) per named phase."""

    def __init__(self):
        self.totals = {}
        self.counts = {}

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = 1e3 * (time.perf_counter() - start)
            self.totals[name] = self.totals.get(name, 0.0) + elapsed
            self.counts[name] = self.counts.get(name, 0) + 1

    def merge(self, other: "Timer"):
        for name, total in other.totals.items():
            self.totals[name] = self.totals.get(name, 0.0) + total
            self.counts[name] = self.counts.get(name, 0) + other.counts[name]

    def state_dict(self) -> Mapping[str, Any]:
        return {
            name: {"ms": self.totals[name], "calls": self.counts[name]}
            for name in sorted(self.totals)
        }


@contextmanager
def timed(timer: Timer | None, name: str) -> Iterator[None]:
    if timer is None:
        yield
    else:
        with timer.phase(name):
            yield


def threads_from_env(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, threads)
    return max(1, int(os.environ.get("EXACTCORESET_THREADS", "1")))


def _to_builtin(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(state: Mapping[str, Any]) -> str:
    return json.dumps(state, sort_keys=True, indent=2, default=_to_builtin) + "\n"


def save_json(path: Path, state: Mapping[str, Any], logger=None):
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    path.write_text(dumps(state))
    if logger is not None:
        logger.info(f"Saved {path}")


def load_json(path: Path) -> Mapping[str, Any]:
    return json.loads(Path(path).read_text())
