"""Tick-by-tick run recording.

The recorder writes into one preallocated float64 block sized for the whole
run, so recording never allocates after construction.  Column layout, per
robot with n joints:

    q(n) qd(n) tau_cmd(n) tau_meas(n) f_ee(6) x_ee(7: pos + quat wxyz)
    task(n) null(n) cor(n) ca(n) ma(n) presat(n) flags(1)

with a single leading tick column shared by all robots.  The five term
vectors and presat are stored exactly as computed, so the decomposition
invariant (task + null + cor + ca + ma == presat, summed in that order)
survives a save/load round trip bit for bit; values are written with %.17g,
which round-trips float64 exactly.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .controllets import TorqueTerms
from .dynamics import CartesianState, Observation
from .geometry import matrix_to_quaternion

_BLOCKS = (("q", "n"), ("qd", "n"), ("tau_cmd", "n"), ("tau_meas", "n"),
           ("f_ee", 6), ("x_ee", 7), ("task", "n"), ("null", "n"),
           ("cor", "n"), ("ca", "n"), ("ma", "n"), ("presat", "n"),
           ("flags", 1))


def _block_sizes(n: int) -> list[tuple[str, int]]:
    return [(name, n if size == "n" else size) for name, size in _BLOCKS]


def _robot_width(n: int) -> int:
    return sum(size for _, size in _block_sizes(n))


def column_names(robots: Sequence[int], n: int) -> list[str]:
    names = ["tick"]
    for r in robots:
        for block, size in _block_sizes(n):
            if size == 1:
                names.append(f"r{r}_{block}")
            else:
                names.extend(f"r{r}_{block}{i + 1}" for i in range(size))
    return names


class TraceRecorder:
    """Fixed-capacity recorder for one run."""

    def __init__(self, robots: Sequence[int], n: int, capacity: int,
                 dt: float = 1e-3):
        self.robots = tuple(robots)
        self.n = int(n)
        self.dt = float(dt)
        self.capacity = int(capacity)
        width = 1 + len(self.robots) * _robot_width(self.n)
        self._data = np.empty((self.capacity, width), dtype=np.float64)
        self._rows = 0
        self._offsets: dict[int, int] = {}
        off = 1
        for r in self.robots:
            self._offsets[r] = off
            off += _robot_width(self.n)

    def record(self, tick: int, obs: Mapping[int, Observation],
               terms: Mapping[int, TorqueTerms],
               poses: Mapping[int, CartesianState]) -> None:
        if self._rows >= self.capacity:
            raise IndexError(f"trace full at {self.capacity} rows")
        row = self._data[self._rows]
        row[0] = float(tick)
        n = self.n
        for r in self.robots:
            o, tt, cs = obs[r], terms[r], poses[r]
            i = self._offsets[r]
            row[i:i + n] = o.q;              i += n
            row[i:i + n] = o.qd;             i += n
            row[i:i + n] = tt.cmd;           i += n
            row[i:i + n] = o.tau;            i += n
            row[i:i + 6] = o.f_ee;           i += 6
            row[i:i + 3] = cs.position;      i += 3
            row[i:i + 4] = matrix_to_quaternion(cs.rotation); i += 4
            for term in (tt.task, tt.null, tt.cor, tt.ca, tt.ma, tt.presat):
                row[i:i + n] = term
                i += n
            row[i] = float(tt.flags)
        self._rows += 1

    @property
    def rows(self) -> int:
        return self._rows

    def data(self) -> np.ndarray:
        return self._data[:self._rows]

    def finish(self) -> "Trace":
        return Trace(self.robots, self.n, self.dt, self.data().copy())

    def save(self, path) -> None:
        self.finish().save(path)


class Trace:
    """A completed (or loaded) recording with named column access."""

    def __init__(self, robots: Sequence[int], n: int, dt: float,
                 data: np.ndarray):
        self.robots = tuple(robots)
        self.n = int(n)
        self.dt = float(dt)
        self.data = data
        self.columns = {name: i for i, name in
                        enumerate(column_names(self.robots, self.n))}

    @property
    def ticks(self) -> np.ndarray:
        return self.data[:, 0]

    @property
    def t(self) -> np.ndarray:
        return self.data[:, 0] * self.dt

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self.columns[name]]

    def block(self, robot: int, name: str) -> np.ndarray:
        """All columns of one named block for one robot, shape (rows, size)."""
        off = 1
        for r in self.robots:
            for block, size in _block_sizes(self.n):
                if r == robot and block == name:
                    return self.data[:, off:off + size]
                off += size
        raise KeyError(f"no block {name!r} for robot {robot}")

    def flags(self, robot: int) -> np.ndarray:
        return self.block(robot, "flags")[:, 0].astype(np.int64)

    def save(self, path) -> None:
        names = column_names(self.robots, self.n)
        with open(path, "w") as fh:
            fh.write(f"# robots={','.join(str(r) for r in self.robots)}"
                     f" n={self.n} dt={self.dt:.17g}\n")
            fh.write(",".join(names) + "\n")
            np.savetxt(fh, self.data, fmt="%.17g", delimiter=",")

    @classmethod
    def load(cls, path) -> "Trace":
        with open(path) as fh:
            meta = fh.readline().strip()
            fh.readline()
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        fields = dict(part.split("=", 1) for part in meta.lstrip("# ").split())
        robots = tuple(int(x) for x in fields["robots"].split(","))
        return cls(robots, int(fields["n"]), float(fields["dt"]), data)
