"""Simulated torque-controlled robots and the world they touch.

Each Plant integrates one rigid-body arm at the control rate with
semi-implicit Euler, the stable choice for stiff penalty contact.  The
drive electronics are part of the plant: the user command is delayed by a
configurable number of ticks, clipped to the torque limits, and gravity
compensation from the firmware's own model is added on top, so a zero
command holds the arm still exactly like the real interface does.

The firmware model and the true model are separate on purpose.  Sensor
wrenches are estimated the way the firmware does it, from measured torque
minus the firmware's inverse dynamics, so a plant whose true inertials
drifted away from the firmware's nominal ones reports biased forces.
Closing that gap is the identification workflow's job.

Sensor noise is drawn from a per-plant generator in a fixed order (q, qd,
tau, wrench) once per observe, which makes a run with a given seed
reproducible to the bit in virtual time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import dynamics
from ._kernels import damped_pinv
from .dynamics import CartesianState, Observation
from .model import RobotModel


class PlantError(RuntimeError):
    """Raised when the simulated robot leaves the numerically sane regime."""


@dataclass
class NoiseConfig:
    q: float = 1e-5            # rad
    qd: float = 1e-3           # rad/s
    tau: float = 0.05          # Nm
    wrench: float = 0.2        # N / Nm

    @staticmethod
    def silent() -> "NoiseConfig":
        return NoiseConfig(q=0.0, qd=0.0, tau=0.0, wrench=0.0)


@dataclass
class ContactMaterial:
    stiffness: float = 3e4     # N/m of penetration
    damping: float = 300.0     # N s/m along the normal, rectified
    friction: float = 0.5      # tangential cap, fraction of normal force
    tangential_damping: float = 300.0


@dataclass
class PlaneContact:
    """Infinite plane touched from the normal side."""

    point: np.ndarray
    normal: np.ndarray
    material: ContactMaterial = field(default_factory=ContactMaterial)

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def force(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        pen = float((self.point - p) @ self.normal)
        if pen <= 0.0:
            return np.zeros(3)
        return _contact_force(pen, self.normal, v, self.material)


@dataclass
class BoxContact:
    """Static axis-aligned box; a point inside is pushed out of the
    nearest face."""

    center: np.ndarray
    half_extents: np.ndarray
    material: ContactMaterial = field(default_factory=ContactMaterial)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)

    def force(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        d = p - self.center
        pen_axes = self.half_extents - np.abs(d)
        if np.any(pen_axes <= 0.0):
            return np.zeros(3)
        axis = int(np.argmin(pen_axes))
        normal = np.zeros(3)
        normal[axis] = 1.0 if d[axis] >= 0.0 else -1.0
        return _contact_force(float(pen_axes[axis]), normal, v, self.material)


def _contact_force(pen: float, normal: np.ndarray, v: np.ndarray,
                   mat: ContactMaterial) -> np.ndarray:
    v_n = float(v @ normal)
    f_n = max(0.0, mat.stiffness * pen - mat.damping * v_n)
    v_t = v - v_n * normal
    speed = float(np.linalg.norm(v_t))
    f = f_n * normal
    if speed > 1e-12:
        f_t = min(mat.tangential_damping * speed, mat.friction * f_n)
        f = f - f_t * (v_t / speed)
    return f


class ContactWorld:
    """All touchable geometry; resolves the wrench on every end effector
    from the same state snapshot once per tick."""

    def __init__(self, surfaces=()):
        self.surfaces = list(surfaces)

    def wrench_at(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        w = np.zeros(6)
        for s in self.surfaces:
            w[:3] += s.force(p, v)
        return w

    def solve(self, ee_states: Mapping[int, CartesianState]) -> dict[int, np.ndarray]:
        return {r: self.wrench_at(cs.position, cs.twist[:3])
                for r, cs in ee_states.items()}


class Plant:
    """One simulated arm behind the torque interface.

    step() advances a tick with the given user command and environment
    wrench; observe() returns the noisy sensor view.  The true state is
    reachable through .q/.qd/.ee_state() for oracles and traces."""

    DIVERGENCE_SPEED = 50.0    # rad/s over all joints: the run is lost

    def __init__(self, model: RobotModel, *, dt: float = 1e-3, seed: int = 0,
                 noise: NoiseConfig | None = None,
                 firmware: RobotModel | None = None,
                 delay_ticks: int = 0, q0: np.ndarray | None = None):
        self.model = model
        self.firmware = firmware if firmware is not None else model
        self.dt = float(dt)
        self.noise = noise if noise is not None else NoiseConfig()
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.q = np.array(model.start_posture if q0 is None else q0,
                          dtype=np.float64)
        self.qd = np.zeros(model.n)
        self.qdd = np.zeros(model.n)
        self.t = 0.0
        self.tick = 0
        self.limit_hits = 0
        self.user = np.zeros(model.n)      # last clipped post-delay command
        self._applied = np.zeros(model.n)
        self._ring = np.zeros((max(0, int(delay_ticks)), model.n))
        self._ring_idx = 0

    # -- sensing -----------------------------------------------------------

    def ee_state(self) -> CartesianState:
        return dynamics.fk(self.model, self.q, self.qd)

    def observe(self) -> Observation:
        nz = self.noise
        q = self.q + nz.q * self.rng.standard_normal(self.model.n)
        qd = self.qd + nz.qd * self.rng.standard_normal(self.model.n)
        tau = self._applied + nz.tau * self.rng.standard_normal(self.model.n)
        # firmware wrench estimate: measured torque minus its own inverse
        # dynamics, mapped through the damped pseudo-inverse transpose;
        # reported with the sign of the force the tool applies
        J_fw = dynamics.jacobian(self.firmware, q)
        resid = tau - dynamics.inverse_dynamics(self.firmware, q, qd, self.qdd)
        f = damped_pinv(J_fw, dynamics.PINV_DAMPING).T @ resid
        f = f + nz.wrench * self.rng.standard_normal(6)
        return Observation(q=q, qd=qd, tau=tau, f_ee=f, t=self.t)

    # -- integration -------------------------------------------------------

    def step(self, cmd: np.ndarray, w_env: np.ndarray | None = None) -> None:
        model = self.model
        if len(self._ring):
            delayed = self._ring[self._ring_idx].copy()
            np.copyto(self._ring[self._ring_idx], cmd)
            self._ring_idx = (self._ring_idx + 1) % len(self._ring)
        else:
            delayed = np.asarray(cmd, dtype=np.float64)

        user = np.clip(delayed, -model.tau_limit, model.tau_limit)
        self.user = user
        dyn = dynamics.dynamics(model, dynamics.JointState(
            q=self.q, qd=self.qd, tau=user))
        g_fw = dyn.g if self.firmware is model else \
            dynamics.gravity_torque(self.firmware, self.q)
        self._applied = user + g_fw
        rhs = self._applied - dyn.c_qd - dyn.g
        if w_env is not None:
            rhs = rhs + dyn.J.T @ w_env
        self.qdd = np.linalg.solve(dyn.M, rhs)

        self.qd = self.qd + self.dt * self.qdd
        self.q = self.q + self.dt * self.qd

        over = self.q > model.q_upper
        under = self.q < model.q_lower
        if np.any(over) or np.any(under):
            self.limit_hits += 1
            self.q = np.clip(self.q, model.q_lower, model.q_upper)
            self.qd[over | under] = 0.0

        if float(np.linalg.norm(self.qd)) > self.DIVERGENCE_SPEED:
            raise PlantError(
                f"joint speed {np.linalg.norm(self.qd):.1f} rad/s at "
                f"t={self.t:.3f}s: simulation diverged")
        self.tick += 1
        self.t = self.tick * self.dt


# -- parameter perturbation ------------------------------------------------


def perturb(model: RobotModel, factors: Mapping[int, Mapping[str, object]]) -> RobotModel:
    """Scale inertial parameters of selected links.

    factors maps link index to any of: 'mass' (scalar factor), 'com'
    (3 per-axis factors), 'inertia' (3 factors on the principal diagonal).
    Factors live in [0.5, 2.0]; the perturbed inertia must still be a
    physical rotor, which the model validation enforces on return."""

    mass = model.mass.copy()
    com = model.com.copy()
    inertia = model.inertia.copy()
    for link, spec in factors.items():
        for name, f in spec.items():
            fa = np.asarray(f, dtype=np.float64)
            if np.any(fa < 0.5) or np.any(fa > 2.0):
                raise ValueError(f"perturbation factor {f} outside [0.5, 2]")
            if name == "mass":
                mass[link] *= float(fa)
            elif name == "com":
                com[link] *= fa
            elif name == "inertia":
                inertia[link][np.diag_indices(3)] = np.diag(inertia[link]) * fa
            else:
                raise KeyError(f"unknown perturbation field {name!r}")
    return model.with_inertials(mass, com, inertia)


def default_perturbation(model: RobotModel) -> RobotModel:
    """The stock sim-to-real gap: distal link masses 15 percent heavy."""
    return perturb(model, {i: {"mass": 1.15} for i in range(3, model.n)})
