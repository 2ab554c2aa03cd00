"""Controllet multiplexer: one control process, many robots, live switching.

The manager owns the robot cell.  Each tick it drains a mailbox of switch
requests, lets every active controllet compute its owned robots, and stamps
a command into the shared bus for every robot in the cell, owned or not.
A robot without an owner gets an explicit zero hold (the drives add gravity
themselves), so there is no tick in which a command slot is left stale.

Switches are boundary-synchronized.  A request posted at time r becomes
visible at the first tick boundary strictly after r; the outgoing
controllet computes normally up to that boundary and the incoming one
computes at it.  The request-to-active distance is therefore one tick in
virtual time, and at most two when a wall-clock sender races the drain.

A controllet that raises, or emits a non-finite command, is removed on the
spot; its robots fall back to the zero hold in the same tick.  Nothing a
faulted controllet produced that tick reaches the bus.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import controllets as ct
from .controllets import Controllet, TorqueTerms
from .dynamics import Observation
from .model import RobotModel


class RobotBus:
    """Preallocated observation and command slots, one set per robot.

    Slots are fixed-size numpy buffers allocated once.  `growth_events`
    counts every time a publish forced a buffer to be replaced; in a
    correctly sized system it stays at zero for the life of the run, and
    the tests pin it there."""

    def __init__(self, models: Mapping[int, RobotModel]):
        self.robots = tuple(sorted(models))
        self.growth_events = 0
        self._q = {r: np.zeros(models[r].n) for r in self.robots}
        self._qd = {r: np.zeros(models[r].n) for r in self.robots}
        self._tau = {r: np.zeros(models[r].n) for r in self.robots}
        self._f = {r: np.zeros(6) for r in self.robots}
        self._t = {r: 0.0 for r in self.robots}
        self.cmd = {r: np.zeros(models[r].n) for r in self.robots}
        self.cmd_stamp = {r: -1 for r in self.robots}
        self.cmd_source = {r: "" for r in self.robots}

    def _fit(self, slot: dict, robot: int, value: np.ndarray) -> np.ndarray:
        if slot[robot].shape != value.shape:
            slot[robot] = np.empty_like(value)
            self.growth_events += 1
        return slot[robot]

    def publish(self, robot: int, obs: Observation) -> None:
        np.copyto(self._fit(self._q, robot, obs.q), obs.q)
        np.copyto(self._fit(self._qd, robot, obs.qd), obs.qd)
        np.copyto(self._fit(self._tau, robot, obs.tau), obs.tau)
        np.copyto(self._fit(self._f, robot, obs.f_ee), obs.f_ee)
        self._t[robot] = obs.t

    def snapshot(self) -> dict[int, Observation]:
        return {r: Observation(q=self._q[r], qd=self._qd[r], tau=self._tau[r],
                               f_ee=self._f[r], t=self._t[r])
                for r in self.robots}

    def stamp(self, robot: int, cmd: np.ndarray, tick: int, source: str) -> None:
        np.copyto(self._fit(self.cmd, robot, cmd), cmd)
        self.cmd_stamp[robot] = tick
        self.cmd_source[robot] = source


@dataclass
class SwitchRecord:
    ticket: int
    kind: str
    robots: tuple[int, ...]
    request_time: float
    status: str = "pending"              # pending/active/replaced/stopped/faulted
    activation_tick: int = -1
    activation_time: float = math.nan
    latency_ticks: int = -1
    latency_s: float = math.nan          # request until a full command tick applied
    fault: str = ""


@dataclass
class _Pending:
    record: SwitchRecord
    controllet: Controllet | None        # None: stop request


class Manager:
    def __init__(self, models: Mapping[int, RobotModel], *, dt: float = 1e-3,
                 clock: Callable[[], float] | None = None):
        self.models = dict(models)
        self.dt = float(dt)
        self.bus = RobotBus(self.models)
        self.clock = clock
        self.tick_index = 0
        self.owner: dict[int, Controllet] = {}
        self.active: list[Controllet] = []
        self.records: list[SwitchRecord] = []
        self._by_controllet: dict[int, SwitchRecord] = {}
        self._mailbox: list[_Pending] = []
        self._lock = threading.Lock()
        self.registry: dict[str, type[Controllet]] = dict(ct.KINDS)

    # -- requests ----------------------------------------------------------

    def _now(self) -> float:
        if self.clock is not None:
            return float(self.clock())
        # virtual time: a request posted between ticks is stamped mid-tick,
        # so it lands strictly before the next boundary and activates there
        return (self.tick_index - 0.5) * self.dt

    def build(self, kind: str, robots, **params) -> Controllet:
        cls = self.registry[kind]
        return cls(self.models, tuple(robots), dt=self.dt, **params)

    def request_switch(self, controllet: Controllet,
                       request_time: float | None = None) -> SwitchRecord:
        t = self._now() if request_time is None else float(request_time)
        rec = SwitchRecord(ticket=len(self.records), kind=controllet.kind,
                           robots=controllet.robots, request_time=t)
        with self._lock:
            self.records.append(rec)
            self._mailbox.append(_Pending(rec, controllet))
        return rec

    def request_stop(self, robots, request_time: float | None = None) -> SwitchRecord:
        t = self._now() if request_time is None else float(request_time)
        rec = SwitchRecord(ticket=len(self.records), kind="stop",
                           robots=tuple(robots), request_time=t)
        with self._lock:
            self.records.append(rec)
            self._mailbox.append(_Pending(rec, None))
        return rec

    def install(self, controllet: Controllet) -> SwitchRecord:
        """Pre-loop installation: activates at the very first boundary."""
        return self.request_switch(controllet, request_time=-self.dt)

    # -- the tick ----------------------------------------------------------

    def tick(self, obs: Mapping[int, Observation]) -> dict[int, TorqueTerms]:
        for r, o in obs.items():
            self.bus.publish(r, o)
        snap = self.bus.snapshot()
        self._boundary(snap)

        out: dict[int, TorqueTerms] = {}
        for c in list(self.active):
            try:
                terms = c.compute(snap)
                for r, tt in terms.items():
                    if not np.all(np.isfinite(tt.cmd)):
                        raise FloatingPointError(
                            f"non-finite command for robot {r}")
            except Exception as exc:            # noqa: BLE001  fault fence
                self._fault(c, repr(exc))
                for r in c.robots:
                    held = TorqueTerms.hold(self.models[r].n)
                    held.flags |= ct.FLAG_FAULT
                    out[r] = held
            else:
                out.update(terms)

        for r in self.bus.robots:
            if r not in out:
                out[r] = TorqueTerms.hold(self.models[r].n)
        for r, tt in out.items():
            src = self.owner[r].kind if r in self.owner else "hold"
            self.bus.stamp(r, tt.cmd, self.tick_index, src)
        self.tick_index += 1
        return out

    def _boundary(self, snap: Mapping[int, Observation]) -> None:
        t = self.tick_index * self.dt
        with self._lock:
            due = [p for p in self._mailbox if p.record.request_time < t]
            self._mailbox = [p for p in self._mailbox if p.record.request_time >= t]
        for p in due:
            rec = p.record
            self._release(rec.robots, "replaced" if p.controllet else "stopped")
            if p.controllet is None:
                rec.status = "stopped"
                continue
            c = p.controllet
            c.on_activate(snap)
            self.active.append(c)
            for r in c.robots:
                self.owner[r] = c
            self._by_controllet[id(c)] = rec
            rec.status = "active"
            rec.activation_tick = self.tick_index
            rec.activation_time = t
            rec.latency_ticks = self.tick_index - math.floor(rec.request_time / self.dt)
            rec.latency_s = (self.tick_index + 1) * self.dt - rec.request_time

    def _release(self, robots, status: str) -> None:
        evicted = {self.owner[r] for r in robots if r in self.owner}
        for c in evicted:
            # a controllet losing any robot loses them all; partial
            # ownership has no meaning for a coupled law
            self.active.remove(c)
            for r in c.robots:
                self.owner.pop(r, None)
            rec = self._by_controllet.pop(id(c), None)
            if rec is not None and rec.status == "active":
                rec.status = status

    def _fault(self, c: Controllet, message: str) -> None:
        if c in self.active:
            self.active.remove(c)
        for r in c.robots:
            self.owner.pop(r, None)
        rec = self._by_controllet.pop(id(c), None)
        if rec is not None:
            rec.status = "faulted"
            rec.fault = message


class WallClock:
    """Monotonic seconds from construction; the request clock in real time."""

    def __init__(self):
        self._t0 = time.monotonic()

    def __call__(self) -> float:
        return time.monotonic() - self._t0


class ControlEndpoint:
    """Line protocol over any text stream.

    switch <kind> <r0[,r1...]> [name=value ...]
    stop <r0[,r1...]>
    status

    Values parse as int, float, true/false, else string.  Each line yields
    one reply: 'ok ...' or 'err ...'."""

    def __init__(self, manager: Manager):
        self.manager = manager

    @staticmethod
    def _value(token: str):
        low = token.lower()
        if low == "true":
            return True
        if low == "false":
            return False
        for cast in (int, float):
            try:
                return cast(token)
            except ValueError:
                continue
        return token

    def handle_line(self, line: str) -> str:
        parts = line.strip().split()
        if not parts or parts[0].startswith("#"):
            return ""
        op, args = parts[0], parts[1:]
        try:
            if op == "switch":
                kind, robots = args[0], tuple(int(r) for r in args[1].split(","))
                params = {}
                for tok in args[2:]:
                    name, _, raw = tok.partition("=")
                    if not _:
                        return f"err malformed parameter {tok!r}"
                    params[name] = self._value(raw)
                c = self.manager.build(kind, robots, **params)
                rec = self.manager.request_switch(c)
                return f"ok ticket={rec.ticket}"
            if op == "stop":
                robots = tuple(int(r) for r in args[0].split(","))
                rec = self.manager.request_stop(robots)
                return f"ok ticket={rec.ticket}"
            if op == "status":
                owners = " ".join(
                    f"{r}:{self.manager.owner[r].kind}"
                    if r in self.manager.owner else f"{r}:hold"
                    for r in self.manager.bus.robots)
                return f"ok tick={self.manager.tick_index} {owners}"
            return f"err unknown command {op!r}"
        except KeyError as exc:
            return f"err unknown kind {exc}"
        except (IndexError, ValueError, TypeError) as exc:
            return f"err {exc}"

    def serve(self, stream) -> list[str]:
        replies = []
        for line in stream:
            reply = self.handle_line(line)
            if reply:
                replies.append(reply)
        return replies
