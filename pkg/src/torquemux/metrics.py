"""Fidelity metrics between paired runs, delay estimation, loop timing.

The fidelity report compares two traces of the same scenario tick by tick
over six channels: joint position, joint velocity, tool position, measured
tool force, measured joint torque, and the torque control error (commanded
minus measured).  Channel values are root-mean-square differences; vector
channels pool over joints, the tool channels use per-tick Euclidean norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trace import Trace

CHANNELS = ("q", "qd", "x_ee", "f_ee", "tau", "control_error")


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(np.asarray(x, dtype=np.float64)))))


def control_error(trace: Trace, robot: int) -> np.ndarray:
    """Commanded minus measured joint torque, shape (rows, n)."""
    return trace.block(robot, "tau_cmd") - trace.block(robot, "tau_meas")


def _aligned(a: Trace, b: Trace) -> tuple[np.ndarray, np.ndarray]:
    """Row indices pairing the two traces on their common ticks."""
    ta = a.ticks.astype(np.int64)
    tb = b.ticks.astype(np.int64)
    common, ia, ib = np.intersect1d(ta, tb, return_indices=True)
    if common.size == 0:
        raise ValueError("traces share no ticks")
    return ia, ib


def channel_rmse(a: Trace, b: Trace, robot: int) -> dict[str, float]:
    ia, ib = _aligned(a, b)

    def diff(name):
        return a.block(robot, name)[ia] - b.block(robot, name)[ib]

    out = {
        "q": rms(diff("q")),
        "qd": rms(diff("qd")),
        "x_ee": rms(np.linalg.norm(diff("x_ee")[:, :3], axis=1)),
        "f_ee": rms(np.linalg.norm(diff("f_ee")[:, :3], axis=1)),
        "tau": rms(diff("tau_meas")),
        "control_error": rms(control_error(a, robot)[ia]
                             - control_error(b, robot)[ib]),
    }
    return out


@dataclass
class FidelityReport:
    robots: tuple[int, ...]
    channels: dict[int, dict[str, float]]
    ticks: int
    delay_ms: float | None = None
    valid: bool = True
    note: str = ""

    @classmethod
    def from_traces(cls, a: Trace, b: Trace) -> "FidelityReport":
        if a.robots != b.robots:
            raise ValueError("traces cover different robots")
        ia, _ = _aligned(a, b)
        per = {r: channel_rmse(a, b, r) for r in a.robots}
        return cls(robots=a.robots, channels=per, ticks=int(ia.size))

    @classmethod
    def average(cls, reports) -> "FidelityReport":
        reports = list(reports)
        robots = reports[0].robots
        per = {r: {c: float(np.mean([rep.channels[r][c] for rep in reports]))
                   for c in CHANNELS} for r in robots}
        return cls(robots=robots, channels=per,
                   ticks=int(np.mean([rep.ticks for rep in reports])),
                   valid=all(rep.valid for rep in reports),
                   note=f"mean of {len(reports)} trials")

    def to_kv(self) -> dict:
        body: dict = {"ticks": self.ticks, "valid": self.valid}
        if self.delay_ms is not None:
            body["delay_ms"] = self.delay_ms
        if self.note:
            body["note"] = self.note
        for r in self.robots:
            body[f"robot_{r}"] = {c: self.channels[r][c] for c in CHANNELS}
        return {"fidelity": body}

    def to_text(self) -> str:
        lines = [f"fidelity over {self.ticks} ticks"
                 + ("" if self.valid else "  [INVALID]")]
        head = "robot " + "".join(f"{c:>14}" for c in CHANNELS)
        lines.append(head)
        for r in self.robots:
            row = f"{r:>5} " + "".join(f"{self.channels[r][c]:>14.6g}"
                                       for c in CHANNELS)
            lines.append(row)
        return "\n".join(lines)


# -- delay estimation ------------------------------------------------------


def estimate_delay(t_a, y_a, t_b, y_b, max_lag: float = 0.05) -> float:
    """Time offset of series b relative to series a, in milliseconds.

    Positive result: b lags a, i.e. b(t) looks like a(t - delay).  Both
    series are linearly interpolated onto the union of their timestamps
    inside the overlap window, then mean-removed normalized
    cross-correlation is scanned over the lag range; the peak is refined
    with a parabola through its neighbours, so the estimate resolves below
    the lag step (the median union spacing).  Timestamps and max_lag are
    in seconds; only the return value is in milliseconds.
    """
    t_a = np.asarray(t_a, dtype=np.float64)
    t_b = np.asarray(t_b, dtype=np.float64)
    y_a = np.atleast_2d(np.asarray(y_a, dtype=np.float64).T).T
    y_b = np.atleast_2d(np.asarray(y_b, dtype=np.float64).T).T
    if y_a.shape[0] != t_a.size or y_b.shape[0] != t_b.size:
        raise ValueError("timestamp and value lengths differ")
    if min(t_a[-1] - t_a[0], t_b[-1] - t_b[0]) < 0.1:
        raise ValueError("need at least 100 ms of overlapping support")

    union = np.unique(np.concatenate([t_a, t_b]))
    lo = max(t_a[0], t_b[0]) + max_lag
    hi = min(t_a[-1], t_b[-1]) - max_lag
    grid = union[(union >= lo) & (union <= hi)]
    if grid.size < 2:
        raise ValueError("series overlap shorter than the lag window")
    h = float(np.median(np.diff(grid)))
    if h <= 0.0:
        raise ValueError("degenerate timestamp spacing")

    cols = y_a.shape[1]
    a_g = np.stack([np.interp(grid, t_a, y_a[:, c]) for c in range(cols)], axis=1)
    a_g -= a_g.mean(axis=0)
    denom_a = float(np.sum(a_g * a_g))
    if denom_a == 0.0:
        raise ValueError("delay undefined for a flat series")

    k_max = int(np.ceil(max_lag / h))
    lags = np.arange(-k_max, k_max + 1)
    score = np.empty(lags.size)
    for i, k in enumerate(lags):
        b_g = np.stack([np.interp(grid + k * h, t_b, y_b[:, c])
                        for c in range(cols)], axis=1)
        b_g -= b_g.mean(axis=0)
        denom_b = float(np.sum(b_g * b_g))
        if denom_b == 0.0:
            raise ValueError("delay undefined for a flat series")
        score[i] = float(np.sum(a_g * b_g)) / np.sqrt(denom_a * denom_b)

    peak = int(np.argmax(score))
    lag = lags[peak] * h
    if 0 < peak < lags.size - 1:
        r0, r1, r2 = score[peak - 1], score[peak], score[peak + 1]
        curv = r0 - 2.0 * r1 + r2
        if curv < 0.0:
            lag += 0.5 * (r0 - r2) / curv * h
    return float(lag * 1e3)


# -- loop timing -----------------------------------------------------------


@dataclass
class TimingReport:
    """Per-tick compute cost statistics, all in seconds."""

    count: int
    mean: float
    std: float
    p50: float
    p99: float
    max: float
    overruns: int = 0
    condition: str = ""

    @classmethod
    def from_samples(cls, samples, budget: float | None = None,
                     condition: str = "") -> "TimingReport":
        s = np.asarray(samples, dtype=np.float64)
        if s.size == 0:
            raise ValueError("no timing samples")
        if np.any(s < 0.0):
            raise ValueError("negative loop duration")
        over = int(np.sum(s > budget)) if budget is not None else 0
        return cls(count=int(s.size), mean=float(s.mean()), std=float(s.std()),
                   p50=float(np.percentile(s, 50)),
                   p99=float(np.percentile(s, 99)),
                   max=float(s.max()), overruns=over, condition=condition)

    def to_kv(self) -> dict:
        return {"timing": {"condition": self.condition,
                           "count": self.count,
                           "mean_us": self.mean * 1e6,
                           "std_us": self.std * 1e6,
                           "p50_us": self.p50 * 1e6,
                           "p99_us": self.p99 * 1e6,
                           "max_us": self.max * 1e6,
                           "overruns": self.overruns}}

    def to_text(self) -> str:
        label = f" [{self.condition}]" if self.condition else ""
        return (f"loop cost{label} over {self.count} ticks: "
                f"mean {self.mean * 1e6:.1f} us, std {self.std * 1e6:.1f} us, "
                f"p50 {self.p50 * 1e6:.1f} us, p99 {self.p99 * 1e6:.1f} us, "
                f"max {self.max * 1e6:.1f} us, overruns {self.overruns}")
