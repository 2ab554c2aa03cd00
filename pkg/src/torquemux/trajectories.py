"""Scenario geometry and reference sources for the validation tasks and the
timing benchmark.

A scene bundles everything a runner needs to reproduce a scenario: rebased
robot models, initial postures, the controllet to install, contact surfaces,
and a reference source.  Sources are pure functions of time so that two runs
of the same scene are tick-for-tick identical; the runner samples them once
per control tick.

Five validation tasks:

  1  joint-space sinusoidal sweep, free space
  2  Cartesian circle, free space
  3  fixed pose on a flat surface, pressing force swept 0 -> peak -> 0
     over one period
  4  Cartesian circle on the surface under a constant pressing force
  5  two arms squeezing a box from opposite sides while the grasp frame
     rides a vertical up-and-down profile

Benchmark conditions reuse one dual-arm scene and differ only in which
controller features are switched on: NF (none), CA (collision avoidance),
MA (singularity avoidance), CA-MA (both), C-MA (coupled arms plus MA).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .controllets import AvoidanceConfig, CartesianTarget, JointTarget
from .dynamics import SingularityAvoidance
from .model import RobotModel
from .plant import BoxContact, PlaneContact

TWO_PI = 2.0 * np.pi

CONDITIONS = ("NF", "CA", "MA", "CA-MA", "C-MA")


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class TaskScene:
    """Everything needed to run one scenario end to end."""

    name: str
    robots: tuple[int, ...]
    models: dict[int, RobotModel]
    start: dict[int, np.ndarray]
    controllet: str
    params: dict
    source: "ReferenceSource"
    surfaces: tuple = ()
    duration: float = 10.0
    shared_goal: bool = False     # drive via set_goal instead of per-robot targets


class ReferenceSource:
    """Base: timestamped targets per robot, evaluated at the tick rate."""

    def targets(self, t: float) -> dict[int, CartesianTarget | JointTarget]:
        raise NotImplementedError

    def goal(self, t: float):
        """Shared-goal form (position, rotation or None, twist)."""
        raise NotImplementedError


class JointSweep(ReferenceSource):
    """Per-joint raised-cosine sweep starting at rest from q0."""

    def __init__(self, robot: int, q0: np.ndarray, amplitude: np.ndarray,
                 frequency: np.ndarray):
        self.robot = robot
        self.q0 = np.asarray(q0, dtype=np.float64)
        self.amplitude = np.asarray(amplitude, dtype=np.float64)
        self.frequency = np.asarray(frequency, dtype=np.float64)

    def targets(self, t: float):
        w = TWO_PI * self.frequency
        q = self.q0 + 0.5 * self.amplitude * (1.0 - np.cos(w * t))
        qd = 0.5 * self.amplitude * w * np.sin(w * t)
        return {self.robot: JointTarget(q=q, qd=qd)}


class HoldPose(ReferenceSource):
    """Fixed pose with a time-varying desired wrench."""

    def __init__(self, robot: int, position: np.ndarray, rotation: np.ndarray,
                 wrench_fn=None):
        self.robot = robot
        self.position = np.asarray(position, dtype=np.float64)
        self.rotation = np.asarray(rotation, dtype=np.float64)
        self.wrench_fn = wrench_fn

    def targets(self, t: float):
        w = np.zeros(6) if self.wrench_fn is None else self.wrench_fn(t)
        return {self.robot: CartesianTarget(position=self.position.copy(),
                                            rotation=self.rotation.copy(),
                                            wrench=w)}


class CircleSource(ReferenceSource):
    """Horizontal circle through the start point, fixed orientation.

    The phase offsets let two arms run the same circle in opposition; the
    parametrization keeps p(0) at the given start for any phase.
    """

    def __init__(self, robots, starts, rotations, radius: float,
                 frequency: float, phases=None, wrench_fn=None):
        self.robots = tuple(robots)
        self.starts = {r: np.asarray(starts[r], dtype=np.float64) for r in self.robots}
        self.rotations = {r: np.asarray(rotations[r], dtype=np.float64)
                          for r in self.robots}
        self.radius = float(radius)
        self.frequency = float(frequency)
        self.phases = {r: 0.0 for r in self.robots} if phases is None else dict(phases)
        self.wrench_fn = wrench_fn

    def _point(self, r: int, t: float):
        w = TWO_PI * self.frequency
        th = w * t + self.phases[r]
        c0, s0 = np.cos(self.phases[r]), np.sin(self.phases[r])
        p = self.starts[r] + self.radius * np.array(
            [np.cos(th) - c0, np.sin(th) - s0, 0.0])
        v = self.radius * w * np.array([-np.sin(th), np.cos(th), 0.0])
        return p, v

    def targets(self, t: float):
        wr = np.zeros(6) if self.wrench_fn is None else self.wrench_fn(t)
        out = {}
        for r in self.robots:
            p, v = self._point(r, t)
            tw = np.zeros(6)
            tw[:3] = v
            out[r] = CartesianTarget(position=p, rotation=self.rotations[r].copy(),
                                     twist=tw, wrench=wr.copy())
        return out

    def goal(self, t: float):
        p, v = self._point(self.robots[0], t)
        tw = np.zeros(6)
        tw[:3] = v
        return p, None, tw


class BoxLift(ReferenceSource):
    """Grasp points riding a vertical raised cosine while squeezing."""

    def __init__(self, grasps, rotations, wrenches, lift: float, period: float):
        self.grasps = {r: np.asarray(p, dtype=np.float64) for r, p in grasps.items()}
        self.rotations = {r: np.asarray(R, dtype=np.float64)
                          for r, R in rotations.items()}
        self.wrenches = {r: np.asarray(w, dtype=np.float64)
                         for r, w in wrenches.items()}
        self.lift = float(lift)       # peak-to-trough height
        self.period = float(period)

    def targets(self, t: float):
        w = TWO_PI / self.period
        dz = 0.5 * self.lift * (1.0 - np.cos(w * t))
        vz = 0.5 * self.lift * w * np.sin(w * t)
        out = {}
        for r, p0 in self.grasps.items():
            tw = np.zeros(6)
            tw[2] = vz
            out[r] = CartesianTarget(position=p0 + np.array([0.0, 0.0, dz]),
                                     rotation=self.rotations[r].copy(),
                                     twist=tw,
                                     wrench=self.wrenches[r].copy())
        return out


# -- validation tasks ------------------------------------------------------

SWEEP_AMPLITUDE = np.array([0.40, 0.30, 0.35, 0.30, 0.45, 0.35, 0.50])
SWEEP_FREQUENCY = np.array([0.50, 0.30, 0.40, 0.25, 0.45, 0.35, 0.55])


def task1(model: RobotModel, *, amplitude=None, frequency=None,
          duration: float = 10.0) -> TaskScene:
    q0 = model.start_posture
    amp = SWEEP_AMPLITUDE[:model.n] if amplitude is None else np.asarray(amplitude)
    freq = SWEEP_FREQUENCY[:model.n] if frequency is None else np.asarray(frequency)
    hi = q0 + amp
    if np.any(hi > model.q_upper) or np.any(q0 < model.q_lower):
        raise ValueError("sweep amplitude leaves the position limits")
    return TaskScene(name="task-1", robots=(0,), models={0: model},
                     start={0: q0.copy()}, controllet="joint_impedance",
                     params={}, source=JointSweep(0, q0, amp, freq),
                     duration=duration)


def task2(model: RobotModel, *, radius: float = 0.08, frequency: float = 0.2,
          duration: float = 10.0) -> TaskScene:
    cs = dynamics.fk(model, model.start_posture)
    src = CircleSource((0,), {0: cs.position}, {0: cs.rotation},
                       radius, frequency)
    return TaskScene(name="task-2", robots=(0,), models={0: model},
                     start={0: model.start_posture.copy()},
                     controllet="cartesian_impedance", params={}, source=src,
                     duration=duration)


def task3(model: RobotModel, *, peak: float = 30.0,
          duration: float = 10.0) -> TaskScene:
    """Fixed pose on the surface; pressing force 0 -> peak -> 0 over one
    period of length `duration`."""
    cs = dynamics.fk(model, model.start_posture)
    w = TWO_PI / duration

    def press(t):
        wr = np.zeros(6)
        wr[2] = -0.5 * peak * (1.0 - np.cos(w * t))     # tool pushes down
        return wr

    plane = PlaneContact(point=cs.position.copy(), normal=[0.0, 0.0, 1.0])
    src = HoldPose(0, cs.position, cs.rotation, wrench_fn=press)
    return TaskScene(name="task-3", robots=(0,), models={0: model},
                     start={0: model.start_posture.copy()},
                     controllet="unified_force", params={}, source=src,
                     surfaces=(plane,), duration=duration)


def task4(model: RobotModel, *, radius: float = 0.10, frequency: float = 0.1,
          press: float = 9.81, duration: float = 10.0) -> TaskScene:
    cs = dynamics.fk(model, model.start_posture)
    wr = np.zeros(6)
    wr[2] = -press

    plane = PlaneContact(point=cs.position.copy(), normal=[0.0, 0.0, 1.0])
    src = CircleSource((0,), {0: cs.position}, {0: cs.rotation},
                       radius, frequency, wrench_fn=lambda t: wr)
    return TaskScene(name="task-4", robots=(0,), models={0: model},
                     start={0: model.start_posture.copy()},
                     controllet="unified_force", params={}, source=src,
                     surfaces=(plane,), duration=duration)


# Box grasp geometry: the faces sit 15 cm either side of the goal, matching
# the coupled controller's per-arm y offsets.  The retracted start posture
# keeps both tools clear of the box before the approach.
BOX_CENTER = np.array([0.0, 0.0, 0.50])
BOX_HALF = np.array([0.10, 0.15, 0.25])
GRASP_OFFSET = 0.15
GRASP_START = np.array([0.0, 0.45, 0.0, 1.95, 0.0, 1.5, 0.0])
DUAL_BASE = 0.65


def dual_arm_models(model: RobotModel, spacing: float) -> dict[int, RobotModel]:
    """Two copies facing each other across the y axis."""
    return {0: model.with_base(_rot_z(np.pi / 2), np.array([0.0, -spacing, 0.0])),
            1: model.with_base(_rot_z(-np.pi / 2), np.array([0.0, spacing, 0.0]))}


def task5(model: RobotModel, *, squeeze: float = 20.0, lift: float = 0.20,
          duration: float = 10.0) -> TaskScene:
    models = dual_arm_models(model, DUAL_BASE)
    start = {r: GRASP_START[:model.n].copy() for r in (0, 1)}
    grasps, rotations, wrenches = {}, {}, {}
    for r, side in ((0, -1.0), (1, 1.0)):
        cs = dynamics.fk(models[r], start[r])
        grasps[r] = BOX_CENTER + np.array([0.0, side * GRASP_OFFSET, 0.0])
        rotations[r] = cs.rotation
        # each tool presses toward the box center, normal to its face
        wrenches[r] = np.array([0.0, -side * squeeze, 0.0, 0.0, 0.0, 0.0])
    box = BoxContact(center=BOX_CENTER.copy(), half_extents=BOX_HALF.copy())
    src = BoxLift(grasps, rotations, wrenches, lift, duration)
    return TaskScene(name="task-5", robots=(0, 1), models=models, start=start,
                     controllet="unified_force", params={}, source=src,
                     surfaces=(box,), duration=duration)


TASKS = {1: task1, 2: task2, 3: task3, 4: task4, 5: task5}


def task_scene(task: int, model: RobotModel, **kw) -> TaskScene:
    try:
        build = TASKS[task]
    except KeyError:
        raise KeyError(f"unknown task id {task!r}; expected 1..5") from None
    return build(model, **kw)


# -- benchmark conditions --------------------------------------------------

BENCH_BASE = 0.72     # close enough that opposed circles cross the margin


def benchmark_scene(condition: str, model: RobotModel, *,
                    radius: float = 0.10, frequency: float = 0.1,
                    duration: float = 30.0) -> TaskScene:
    if condition not in CONDITIONS:
        raise KeyError(f"unknown benchmark condition {condition!r}; "
                       f"expected one of {CONDITIONS}")
    models = dual_arm_models(model, BENCH_BASE)
    start = {r: model.start_posture.copy() for r in (0, 1)}
    poses = {r: dynamics.fk(models[r], start[r]) for r in (0, 1)}
    src = CircleSource((0, 1), {r: poses[r].position for r in (0, 1)},
                       {r: poses[r].rotation for r in (0, 1)},
                       radius, frequency, phases={0: 0.0, 1: np.pi})

    params: dict = {}
    if condition in ("CA", "CA-MA"):
        params["avoidance"] = AvoidanceConfig()
    if condition in ("MA", "CA-MA", "C-MA"):
        params["singularity"] = SingularityAvoidance()
    kind = "coupled_impedance" if condition == "C-MA" else "cartesian_impedance"
    return TaskScene(name=f"bench-{condition}", robots=(0, 1), models=models,
                     start=start, controllet=kind, params=params, source=src,
                     duration=duration, shared_goal=(condition == "C-MA"))
