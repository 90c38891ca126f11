"""CSV output with a provenance comment line, and the ``t,x`` data format."""

from __future__ import annotations

import csv
import io
import threading
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError
from .qml import ObservationSeries

__all__ = ["CsvWriter", "write_csv", "write_series", "read_series", "fmt"]

_write_lock = threading.Lock()


def fmt(v) -> str:
    """Deterministic text for a cell; floats use shortest round-trip repr."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _comment(meta: dict | None) -> str:
    parts = [f"kbqml {__version__}"]
    for k, v in (meta or {}).items():
        parts.append(f"{k}={v}")
    return "# " + " ".join(parts) + "\n"


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], meta: dict | None = None) -> Path:
    """Write ``rows`` under ``header`` with a leading ``#`` comment line."""
    buf = io.StringIO(newline="")
    buf.write(_comment(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    p = Path(path)
    with _write_lock:
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            with open(p, "w", encoding="utf-8", newline="") as fh:
                fh.write(buf.getvalue())
        except OSError as exc:
            raise ConfigError(f"cannot write {p}: {exc}") from None
    return p


class CsvWriter:
    """Collects rows from several producers and writes them once, sorted."""

    def __init__(self, header: Sequence[str], sort_key=None):
        self.header = list(header)
        self.rows: list[list] = []
        self._sort_key = sort_key
        self._lock = threading.Lock()

    def add(self, row: Sequence) -> None:
        with self._lock:
            self.rows.append(list(row))

    def save(self, path, meta=None) -> Path:
        rows = sorted(self.rows, key=self._sort_key) if self._sort_key else self.rows
        return write_csv(path, self.header, rows, meta)


def write_series(path, series: ObservationSeries, meta: dict | None = None) -> Path:
    return write_csv(path, ("t", "x"), zip(series.times, series.states), meta)


def read_series(path) -> ObservationSeries:
    """Read a ``t,x`` file; lines starting with ``#`` are skipped."""
    p = Path(path)
    try:
        lines = [ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise ConfigError(f"cannot read data {p}: {exc}") from None
    if not lines or [c.strip() for c in lines[0].split(",")] != ["t", "x"]:
        raise ConfigError(f"{p}: expected header 't,x'")
    try:
        arr = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{p}: bad number ({exc})") from None
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError(f"{p}: every row needs exactly two fields")
    try:
        return ObservationSeries(arr[:, 0], arr[:, 1])
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}") from None
