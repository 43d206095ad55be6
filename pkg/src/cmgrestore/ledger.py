"""Append-only run ledger. One row per (stage, hour, slot, step, name);
vectors are stored ';'-joined. The digest ignores solver wall times so it is
stable across machines and repeated runs."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER = ["stage", "t", "h", "k", "name", "value"]
TIMING_NAMES = ("wall_time",)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    a = np.atleast_1d(np.asarray(v, dtype=float))
    return ";".join("%.10g" % x for x in a)


@dataclass
class RunLedger:
    rows: list[tuple] = field(default_factory=list)
    _last: tuple = (-1, -1, -1)
    path: Path | None = None
    _fh: object = field(default=None, repr=False)
    _w: object = field(default=None, repr=False)

    def stream(self, path: str | Path) -> None:
        """Also append every row to ``path`` as it arrives (flushed per row),
        so an interrupted run leaves a readable prefix."""
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(HEADER)
        self._w.writerows(self.rows)
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = self._w = None

    @property
    def last_key(self) -> tuple:
        return self._last

    def add(self, stage: str, t: int, h: int, k: int, name: str, value) -> None:
        key = (t, h, k)
        if key < self._last:
            raise ValueError(f"ledger key {key} goes back in time (last {self._last})")
        self._last = key
        row = (stage, int(t), int(h), int(k), name, _fmt(value))
        self.rows.append(row)
        if self._w is not None:
            self._w.writerow(row)
            self._fh.flush()

    def add_many(self, stage: str, t: int, h: int, k: int, values: dict) -> None:
        for name, v in values.items():
            self.add(stage, t, h, k, name, v)

    def select(self, stage: str | None = None, name: str | None = None):
        return [r for r in self.rows if (stage is None or r[0] == stage)
                and (name is None or r[4] == name)]

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.rows:
            if r[4].endswith(TIMING_NAMES):
                continue
            h.update(("|".join(map(str, r)) + "\n").encode())
        return h.hexdigest()

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HEADER)
            w.writerows(self.rows)

    @classmethod
    def read(cls, path: str | Path) -> "RunLedger":
        out = cls()
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            if next(rd) != HEADER:
                raise ValueError(f"{path} is not a run ledger")
            for row in rd:
                if len(row) != len(HEADER):
                    break  # torn final row of an interrupted run
                s, t, h, k, name, val = row
                out.rows.append((s, int(t), int(h), int(k), name, val))
        return out


def parse_value(v: str) -> np.ndarray:
    return np.array([float(x) for x in v.split(";")]) if v else np.zeros(0)
