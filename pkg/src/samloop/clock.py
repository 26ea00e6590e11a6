"""Time sources. A run records every clock reading so replay can reproduce
time-dependent decisions (slices, wall-time limits, timestamps) exactly."""

from __future__ import annotations

import time
from datetime import datetime, timezone
from pathlib import Path

from .errors import ReplayDiverged


def iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


class SystemClock:
    def now(self) -> float:
        return time.time()


class RecordingClock:
    """Wall clock that appends each reading to a tape file."""

    def __init__(self, path: str | Path, source=None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.source = source or SystemClock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def now(self) -> float:
        t = self.source.now()
        self._fh.write(repr(t) + "\n")
        self._fh.flush()
        return t

    def close(self) -> None:
        self._fh.close()


class ReplayClock:
    def __init__(self, path: str | Path):
        self.readings = [float(line) for line in Path(path).read_text(encoding="utf-8").split()]
        self.position = 0

    def now(self) -> float:
        if self.position >= len(self.readings):
            raise ReplayDiverged("replayed run read the clock more often than the recording")
        t = self.readings[self.position]
        self.position += 1
        return t

