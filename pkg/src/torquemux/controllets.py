"""Torque controllers that plug into the multiplexer.

A controllet owns one or more robots for as long as the manager keeps it
active.  Every tick it reads the shared observation snapshot and returns a
TorqueTerms record per owned robot; the record keeps the task, nullspace,
velocity-compensation, collision-avoidance and singularity contributions
separate so a trace can account for every commanded newton-metre.  Gravity
is never part of the command: the drive electronics add it themselves.

Four kinds are provided.  joint_impedance and cartesian_impedance are
decoupled laws (the latter accepts any number of robots, each with its own
pose target).  coupled_impedance drives exactly two arms through a shared
goal frame, with grasp offsets captured at activation so the pair moves as
one rigid assembly.  unified_force layers a closed-loop wrench channel on
top of the Cartesian law, gated by a contact-proximity function and a pair
of energy tanks; when the tanks are at their floor and the gate sees no
contact, the channel multiplier is exactly zero, not merely small.

Controllets never allocate against the shared bus; everything they return
is written into buffers they own.  Targets are replaced whole (one
attribute store), so a runner thread may retarget a live controllet
without tearing an individual set-point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar, Mapping, Sequence

import numpy as np

from . import dynamics
from ._kernels import avoidance_map
from .dynamics import JointState, Observation
from .geometry import orientation_error
from .model import RobotModel

# Bits of TorqueTerms.flags (also used by the manager and the trace).
FLAG_SATURATED = 1        # some joint command hit its torque limit
FLAG_HOLD = 2             # robot had no owner; manager stamped a zero hold
FLAG_FAULT = 4            # owner faulted this tick, command fell back
FLAG_CA_DEGENERATE = 8    # avoidance pair at zero distance, direction from cache
FLAG_CONTACT = 16         # unified-force contact latch engaged
FLAG_TANK_FORCE_EMPTY = 32
FLAG_TANK_SHAPE_EMPTY = 64


@dataclass
class TorqueTerms:
    """Per-robot output of one control tick.

    presat is the plain sum task + null + cor + ca + ma evaluated in that
    order; cmd is presat clamped per joint.  The fixed order makes the sum
    reproducible bit for bit from a trace of the parts."""

    task: np.ndarray
    null: np.ndarray
    cor: np.ndarray
    ca: np.ndarray
    ma: np.ndarray
    presat: np.ndarray | None = None
    cmd: np.ndarray | None = None
    flags: int = 0

    def seal(self, tau_limit: np.ndarray) -> "TorqueTerms":
        s = self.task + self.null
        s = s + self.cor
        s = s + self.ca
        s = s + self.ma
        self.presat = s
        self.cmd = np.clip(s, -tau_limit, tau_limit)
        if np.any(np.abs(s) > tau_limit):
            self.flags |= FLAG_SATURATED
        return self

    @staticmethod
    def hold(n: int) -> "TorqueTerms":
        z = np.zeros(n)
        t = TorqueTerms(task=z, null=z.copy(), cor=z.copy(), ca=z.copy(),
                        ma=z.copy())
        t.presat = np.zeros(n)
        t.cmd = np.zeros(n)
        t.flags = FLAG_HOLD
        return t


@dataclass
class CartesianTarget:
    position: np.ndarray                  # (3,)
    rotation: np.ndarray                  # (3, 3)
    twist: np.ndarray = field(default_factory=lambda: np.zeros(6))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(6))
    wrench: np.ndarray = field(default_factory=lambda: np.zeros(6))


@dataclass
class JointTarget:
    q: np.ndarray
    qd: np.ndarray | None = None


def critical_damping(stiffness: np.ndarray) -> np.ndarray:
    return 2.0 * np.sqrt(np.asarray(stiffness, dtype=np.float64))


@dataclass
class CartesianGains:
    stiffness: np.ndarray = field(
        default_factory=lambda: np.array([800.0, 800.0, 800.0, 50.0, 50.0, 50.0]))
    damping: np.ndarray | None = None     # None: 2 sqrt(K)

    def __post_init__(self):
        self.stiffness = np.asarray(self.stiffness, dtype=np.float64)
        if self.damping is None:
            self.damping = critical_damping(self.stiffness)
        else:
            self.damping = np.asarray(self.damping, dtype=np.float64)


@dataclass
class JointGains:
    stiffness: np.ndarray = field(
        default_factory=lambda: np.array([150.0, 150.0, 120.0, 100.0, 60.0, 30.0, 18.0]))
    damping: np.ndarray | None = None

    def __post_init__(self):
        self.stiffness = np.asarray(self.stiffness, dtype=np.float64)
        if self.damping is None:
            self.damping = critical_damping(self.stiffness)
        else:
            self.damping = np.asarray(self.damping, dtype=np.float64)


@dataclass
class NullspaceGains:
    stiffness: float = 10.0
    damping: float | None = None
    posture: np.ndarray | None = None     # None: model start posture

    def __post_init__(self):
        if self.damping is None:
            self.damping = 2.0 * float(np.sqrt(self.stiffness))


@dataclass
class ForceGains:
    """PID on the wrench error, applied on top of the desired wrench.

    The wrench measurement is a model-based residual, so inertial model
    error leaks into it in proportion to acceleration.  That puts a hard
    ceiling on the proportional gain: the acceleration loop it closes has
    gain ~ kp * |dM M^-1|, which must stay well under 1 for the expected
    model error (15% inertial error caps kp near 7).  Steady-state force
    accuracy comes from the integral term instead."""

    kp: float = 1.0
    ki: float = 20.0
    kd: float = 0.01
    integral_limit: float = 50.0          # per-axis clamp, N / Nm
    derivative_cutoff_hz: float = 25.0    # the raw derivative is unusable


@dataclass
class TankConfig:
    """Energy budgets of the non-passive channels.

    A tank sits in [floor, capacity].  Its activation ramps from 0 at the
    floor to 1 over the first `width` fraction of the usable range, so a
    drained tank switches its channel off exactly, and refilling is not
    modelled (a drained tank stays drained for the rest of the run)."""

    capacity: float = 100.0
    floor: float = 2.0
    width: float = 0.1

    def activation(self, energy: float) -> float:
        span = self.width * (self.capacity - self.floor)
        return float(np.clip((energy - self.floor) / span, 0.0, 1.0))


@dataclass
class ContactGate:
    """Proximity gate of the force channel.

    The first measured force above `latch` latches the contact point; the
    gate then decays with squared distance from it.  Losing the force
    (hysteresis at half the latch level) clears the latch, and an
    unlatched gate is exactly zero."""

    latch: float = 1.0
    d_max: float = 0.05

    def value(self, p: np.ndarray, p_contact: np.ndarray | None) -> float:
        if p_contact is None:
            return 0.0
        d2 = float(np.dot(p - p_contact, p - p_contact))
        return float(np.exp(-d2 / (self.d_max * self.d_max)))


@dataclass
class AvoidanceConfig:
    """Between-robot repulsion on a capsule skeleton.

    Anchors are (joint index, offset in that joint frame); consecutive
    anchors span the segments.  Below `margin` the repulsion grows
    linearly; at and beyond it the term is exactly zero."""

    gain: float = 400.0
    margin: float = 0.05
    anchors: tuple | None = None          # None: chain through joints 2, 4, 6, tool

    def resolved_anchors(self, model: RobotModel):
        if self.anchors is not None:
            return tuple((int(k), np.asarray(off, dtype=np.float64))
                         for k, off in self.anchors)
        return ((1, np.zeros(3)), (3, np.zeros(3)), (5, np.zeros(3)),
                (model.n - 1, np.asarray(model.ee_t, dtype=np.float64)))


_CA_FALLBACK_DIR = np.array([0.0, 0.0, 1.0])


class Controllet:
    """Base of all controller kinds: owns robots, composes shared terms."""

    kind: ClassVar[str] = "base"
    min_robots: ClassVar[int] = 1
    max_robots: ClassVar[int | None] = None

    def __init__(self, models: Mapping[int, RobotModel], robots: Sequence[int],
                 *, dt: float = 1e-3,
                 avoidance: AvoidanceConfig | None = None,
                 singularity: dynamics.SingularityAvoidance | None = None):
        self.models = dict(models)
        self.robots = tuple(robots)
        if len(set(self.robots)) != len(self.robots):
            raise ValueError("duplicate robot in controllet")
        if len(self.robots) < self.min_robots:
            raise ValueError(f"{self.kind} needs at least {self.min_robots} robot(s)")
        if self.max_robots is not None and len(self.robots) > self.max_robots:
            raise ValueError(f"{self.kind} takes at most {self.max_robots} robot(s)")
        for r in self.robots:
            if r not in self.models:
                raise ValueError(f"no model for robot {r}")
        self.dt = float(dt)
        self.avoidance = avoidance
        self.singularity = singularity
        self._ca_dirs: dict[tuple, np.ndarray] = {}

    # -- lifecycle ---------------------------------------------------------

    def on_activate(self, obs: Mapping[int, Observation]) -> None:
        """Called once at the tick the controllet takes ownership."""

    def compute(self, obs: Mapping[int, Observation]) -> dict[int, TorqueTerms]:
        out = {}
        for r in self.robots:
            model = self.models[r]
            terms = self._law(r, obs[r])
            if self.avoidance is not None:
                ca, ca_flags = self._avoidance_torque(r, obs)
                terms.ca = ca
                terms.flags |= ca_flags
            if self.singularity is not None:
                terms.ma = self.singularity.torque(model, obs[r].q)
            out[r] = terms.seal(model.tau_limit)
        return out

    def _law(self, robot: int, o: Observation) -> TorqueTerms:
        raise NotImplementedError

    # -- shared terms ------------------------------------------------------

    def _blank(self, n: int) -> TorqueTerms:
        return TorqueTerms(task=np.zeros(n), null=np.zeros(n), cor=np.zeros(n),
                           ca=np.zeros(n), ma=np.zeros(n))

    def _nullspace_torque(self, model: RobotModel, gains: NullspaceGains,
                          J: np.ndarray, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
        posture = gains.posture if gains.posture is not None else model.start_posture
        u = gains.stiffness * (posture - q) - gains.damping * qd
        # The projector must be idempotent to machine precision, so it is
        # built from the exact pseudo-inverse, not the damped one used for
        # wrench mapping.  QR of J^T keeps full precision at a fraction of
        # the SVD cost; rank loss at an exact singularity falls back.
        Q, R = np.linalg.qr(J.T)
        if abs(R[-1, -1]) > 1e-12 * abs(R[0, 0]):
            pinv = Q @ np.linalg.solve(R.T, np.eye(J.shape[0]))
        else:
            pinv = np.linalg.pinv(J)
        N = np.eye(model.n) - pinv @ J
        return N.T @ u

    def _anchor_points(self, model: RobotModel, q: np.ndarray):
        R, p, z, _, _ = dynamics.frames(model, q)
        anchors = self.avoidance.resolved_anchors(model)
        pts = np.empty((len(anchors), 3))
        joints = np.empty(len(anchors), dtype=np.int64)
        for i, (k, off) in enumerate(anchors):
            pts[i] = p[k] + R[k] @ off
            joints[i] = k
        return pts, joints, p, z

    def _avoidance_torque(self, robot: int, obs: Mapping[int, Observation]):
        cfg = self.avoidance
        model = self.models[robot]
        pts, joints, p, z = self._anchor_points(model, obs[robot].q)
        tau = np.zeros(model.n)
        flags = 0
        for other, oo in obs.items():
            if other == robot or other not in self.models:
                continue
            opts, _, _, _ = self._anchor_points(self.models[other], oo.q)
            key = (robot, other)
            store = self._ca_dirs.get(key)
            shape = (len(pts) - 1, len(opts) - 1)
            if store is None or store[0].shape[:2] != shape:
                store = (np.zeros(shape + (3,)), np.zeros(shape, dtype=np.uint8))
                self._ca_dirs[key] = store
            t, degenerate = avoidance_map(pts, joints, p, z, model.n, opts,
                                          cfg.margin, cfg.gain,
                                          _CA_FALLBACK_DIR, store[0], store[1])
            tau += t
            if degenerate:
                flags |= FLAG_CA_DEGENERATE
        return tau, flags


class JointImpedance(Controllet):
    """Decoupled joint-space spring-damper with velocity compensation."""

    kind = "joint_impedance"

    def __init__(self, models, robots, *, gains: JointGains | None = None, **kw):
        super().__init__(models, robots, **kw)
        self.gains = gains if gains is not None else JointGains()
        self.targets: dict[int, JointTarget] = {}

    def on_activate(self, obs):
        for r in self.robots:
            if r not in self.targets:
                self.targets[r] = JointTarget(q=obs[r].q.copy())

    def set_target(self, robot: int, target: JointTarget) -> None:
        if robot not in self.models or robot not in self.robots:
            raise KeyError(f"robot {robot} not owned")
        self.targets[robot] = target

    def _law(self, robot, o):
        model = self.models[robot]
        terms = self._blank(model.n)
        tgt = self.targets[robot]
        qd_d = tgt.qd if tgt.qd is not None else np.zeros(model.n)
        terms.task = (self.gains.stiffness * (tgt.q - o.q)
                      + self.gains.damping * (qd_d - o.qd))
        terms.cor = dynamics.coriolis_torque(model, o.q, o.qd)
        return terms


class CartesianImpedance(Controllet):
    """Task-space spring-damper per robot, nullspace posture underneath.

    With `feedforward` enabled a desired acceleration is mapped through the
    task-space inertia; at zero desired acceleration the law reduces to the
    plain spring-damper exactly."""

    kind = "cartesian_impedance"

    def __init__(self, models, robots, *, gains: CartesianGains | None = None,
                 nullspace: NullspaceGains | None = None,
                 use_nullspace: bool = True, feedforward: bool = False, **kw):
        super().__init__(models, robots, **kw)
        self.gains = gains if gains is not None else CartesianGains()
        self.nullspace = nullspace if nullspace is not None else NullspaceGains()
        self.use_nullspace = use_nullspace
        self.feedforward = feedforward
        self.targets: dict[int, CartesianTarget] = {}

    def on_activate(self, obs):
        for r in self.robots:
            if r not in self.targets:
                cs = dynamics.fk(self.models[r], obs[r].q)
                self.targets[r] = CartesianTarget(position=cs.position,
                                                  rotation=cs.rotation)

    def set_target(self, robot: int, target: CartesianTarget) -> None:
        if robot not in self.robots:
            raise KeyError(f"robot {robot} not owned")
        self.targets[robot] = target

    def _impedance_wrench(self, dyn, o, tgt):
        x_err = np.empty(6)
        x_err[:3] = dyn.p_ee - tgt.position
        x_err[3:] = orientation_error(dyn.R_ee, tgt.rotation)
        xd_err = dyn.J @ o.qd - tgt.twist
        F = -self.gains.stiffness * x_err - self.gains.damping * xd_err
        if self.feedforward and np.any(tgt.accel):
            Minv = np.linalg.inv(dyn.M)
            lam = dynamics.PINV_DAMPING
            core = dyn.J @ Minv @ dyn.J.T + (lam * lam) * np.eye(6)
            F = F + np.linalg.solve(core, tgt.accel)
        return F, x_err

    def _law(self, robot, o):
        model = self.models[robot]
        terms = self._blank(model.n)
        dyn = dynamics.dynamics(model, JointState(q=o.q, qd=o.qd, tau=o.tau))
        tgt = self.targets[robot]
        F, _ = self._impedance_wrench(dyn, o, tgt)
        terms.task = dyn.J.T @ (F + tgt.wrench)
        if self.use_nullspace:
            terms.null = self._nullspace_torque(model, self.nullspace, dyn.J,
                                                o.q, o.qd)
        terms.cor = dyn.c_qd
        return terms


class CoupledImpedance(CartesianImpedance):
    """Two arms served as one rigid assembly through a shared goal frame.

    Grasp offsets (position and rotation of each tool in the goal frame)
    are captured at activation, so wherever the goal goes the pair follows
    without internal distortion.  Per-robot feedforward wrenches carry the
    squeeze needed to hold an object between the tools."""

    kind = "coupled_impedance"
    min_robots = 2
    max_robots = 2

    def __init__(self, models, robots, **kw):
        super().__init__(models, robots, **kw)
        self.goal_position: np.ndarray | None = None
        self.goal_rotation = np.eye(3)
        self.goal_twist = np.zeros(6)
        self._grasp_p: dict[int, np.ndarray] = {}
        self._grasp_R: dict[int, np.ndarray] = {}
        self._wrench: dict[int, np.ndarray] = {r: np.zeros(6) for r in self.robots}

    def on_activate(self, obs):
        poses = {r: dynamics.fk(self.models[r], obs[r].q) for r in self.robots}
        if self.goal_position is None:
            self.goal_position = np.mean([poses[r].position for r in self.robots], axis=0)
            self.goal_rotation = np.eye(3)
            self.goal_twist = np.zeros(6)
        for r in self.robots:
            self._grasp_p[r] = self.goal_rotation.T @ (poses[r].position - self.goal_position)
            self._grasp_R[r] = self.goal_rotation.T @ poses[r].rotation
        self._refresh_targets()

    def set_goal(self, position, rotation=None, twist=None) -> None:
        self.goal_position = np.asarray(position, dtype=np.float64)
        if rotation is not None:
            self.goal_rotation = np.asarray(rotation, dtype=np.float64)
        self.goal_twist = (np.zeros(6) if twist is None
                          else np.asarray(twist, dtype=np.float64))
        self._refresh_targets()

    def set_wrench(self, robot: int, wrench) -> None:
        if robot not in self.robots:
            raise KeyError(f"robot {robot} not owned")
        self._wrench[robot] = np.asarray(wrench, dtype=np.float64)
        if robot in self.targets:
            self.targets[robot].wrench = self._wrench[robot]

    def _refresh_targets(self):
        if not self._grasp_p:
            return                      # before activation; nothing to derive yet
        v, w = self.goal_twist[:3], self.goal_twist[3:]
        for r in self.robots:
            arm_p = self.goal_rotation @ self._grasp_p[r]
            tw = np.empty(6)
            tw[:3] = v + np.cross(w, arm_p)
            tw[3:] = w
            self.targets[r] = CartesianTarget(
                position=self.goal_position + arm_p,
                rotation=self.goal_rotation @ self._grasp_R[r],
                twist=tw, wrench=self._wrench[r])

    def set_target(self, robot, target):
        raise TypeError("coupled controllet is retargeted through set_goal")


@dataclass
class _ForceState:
    integral: np.ndarray
    filt: np.ndarray
    filt_prev: np.ndarray
    contact_p: np.ndarray | None
    e_force: float
    e_shape: float
    last_scale: float = 1.0
    last_force: np.ndarray | None = None


class UnifiedForceImpedance(CartesianImpedance):
    """Cartesian impedance with a gated closed-loop wrench channel.

    The channel output is (gamma + alpha_f (1 - gamma)) (F_d + PID(e)):
    near the latched contact point gamma keeps it alive regardless of the
    force tank; away from contact only the tank-backed part remains, and a
    drained tank with no contact shuts the channel off exactly.  A second
    tank pays for an extra stiffness-shaping term alpha_i (-K x_err).
    Both tanks drain by the positive part of their channel's injected
    power; neither refills."""

    kind = "unified_force"

    def __init__(self, models, robots, *, force_gains: ForceGains | None = None,
                 tank: TankConfig | None = None, gate: ContactGate | None = None,
                 **kw):
        super().__init__(models, robots, **kw)
        self.force_gains = force_gains if force_gains is not None else ForceGains()
        self.tank = tank if tank is not None else TankConfig()
        self.gate = gate if gate is not None else ContactGate()
        self._fs: dict[int, _ForceState] = {}

    def on_activate(self, obs):
        super().on_activate(obs)
        for r in self.robots:
            self._fs[r] = _ForceState(
                integral=np.zeros(6), filt=np.zeros(6), filt_prev=np.zeros(6),
                contact_p=None, e_force=self.tank.capacity,
                e_shape=self.tank.capacity)

    def tank_levels(self, robot: int) -> tuple[float, float]:
        st = self._fs[robot]
        return st.e_force, st.e_shape

    def force_channel(self, robot: int):
        """Last applied channel multiplier and wrench, for traces and checks."""
        st = self._fs[robot]
        return st.last_scale, st.last_force

    def _law(self, robot, o):
        model = self.models[robot]
        g = self.force_gains
        st = self._fs[robot]
        terms = self._blank(model.n)
        dyn = dynamics.dynamics(model, JointState(q=o.q, qd=o.qd, tau=o.tau))
        tgt = self.targets[robot]
        F_imp, x_err = self._impedance_wrench(dyn, o, tgt)
        xd = dyn.J @ o.qd

        # contact latch on the measured force magnitude, with hysteresis
        f_mag = float(np.linalg.norm(o.f_ee[:3]))
        if f_mag > self.gate.latch:
            st.contact_p = dyn.p_ee.copy()
            terms.flags |= FLAG_CONTACT
        elif st.contact_p is not None:
            if f_mag < 0.5 * self.gate.latch:
                st.contact_p = None
            else:
                terms.flags |= FLAG_CONTACT
        gamma = self.gate.value(dyn.p_ee, st.contact_p)

        # wrench PID restricted to the commanded axes.  The measurement is a
        # model residual, so the uncommanded axes carry a model-error phantom;
        # integrating it would walk the arm sideways chasing a force that is
        # not there.  Off-support axes stay pure impedance.
        support = tgt.wrench != 0.0
        e = np.where(support, tgt.wrench - o.f_ee, 0.0)
        alpha = self.dt / (self.dt + 1.0 / (2.0 * np.pi * g.derivative_cutoff_hz))
        st.filt_prev = st.filt.copy()
        st.filt = st.filt + alpha * (e - st.filt)
        F_pid = g.kp * e + st.integral + g.kd * (st.filt - st.filt_prev) / self.dt
        F_force = tgt.wrench + F_pid

        alpha_f = self.tank.activation(st.e_force)
        alpha_i = self.tank.activation(st.e_shape)
        scale = gamma + alpha_f * (1.0 - gamma)
        F_force_out = scale * F_force
        F_shape = alpha_i * (-self.gains.stiffness * x_err)
        st.last_scale = scale
        st.last_force = F_force_out

        # integrate only while the channel can act, else the clamp winds up;
        # the state is the integral force itself, clamped per axis
        if scale > 0.0:
            st.integral = np.where(
                support,
                np.clip(st.integral + g.ki * e * self.dt,
                        -g.integral_limit, g.integral_limit),
                0.0)

        terms.task = dyn.J.T @ (F_imp + F_shape + F_force_out)
        if self.use_nullspace:
            terms.null = self._nullspace_torque(model, self.nullspace, dyn.J,
                                                o.q, o.qd)
        terms.cor = dyn.c_qd

        # compute-then-drain: this tick runs on the levels it saw
        st.e_force = min(max(st.e_force - self.dt * max(0.0, float(F_force_out @ xd)),
                             self.tank.floor), self.tank.capacity)
        st.e_shape = min(max(st.e_shape - self.dt * max(0.0, float(F_shape @ xd)),
                             self.tank.floor), self.tank.capacity)
        if alpha_f == 0.0:
            terms.flags |= FLAG_TANK_FORCE_EMPTY
        if alpha_i == 0.0:
            terms.flags |= FLAG_TANK_SHAPE_EMPTY
        return terms


KINDS: dict[str, type[Controllet]] = {
    cls.kind: cls for cls in (JointImpedance, CartesianImpedance,
                              CoupledImpedance, UnifiedForceImpedance)
}
