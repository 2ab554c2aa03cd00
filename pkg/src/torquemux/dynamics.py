"""Kinematics and rigid-body dynamics of a RobotModel.

Each operation unpacks the model's arrays into the compiled kernels.  The
mass matrix comes from composite rigid-body accumulation and the
velocity-product and gravity vectors from the Newton-Euler recursion;
the Christoffel matrix form exists only as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import matrix_to_quaternion
from .model import RobotModel

PINV_DAMPING = 0.01   # damping of the wrench-mapping pseudo-inverse


@dataclass
class JointState:
    """Joint-space state.  qdd is filled on plant outputs (ground truth of
    the last integration step) and is None where unknown."""

    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    qdd: np.ndarray | None = None
    t: float = 0.0


@dataclass
class CartesianState:
    position: np.ndarray                 # (3,)
    rotation: np.ndarray                 # (3, 3)
    twist: np.ndarray                    # (6,) linear then angular
    wrench: np.ndarray | None = None     # (6,) external, on the end effector

    @property
    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)


@dataclass
class Observation:
    """One robot's sensor snapshot for a control tick.

    f_ee is the wrench the end effector exerts on its surroundings, the sign
    a wrist force sensor reports.  tau is the measured motor torque including
    whatever the drive electronics added on top of the user command."""

    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    f_ee: np.ndarray
    t: float = 0.0


@dataclass
class DynamicsTerms:
    """Per-tick dynamic quantities a controller works from."""

    M: np.ndarray         # (n, n) mass matrix
    c_qd: np.ndarray      # (n,) velocity product C(q, qd) qd
    g: np.ndarray         # (n,) gravity torque
    J: np.ndarray         # (6, n) geometric Jacobian
    J_pinv: np.ndarray    # (n, 6) damped pseudo-inverse of J
    m_kin: float          # manipulability sqrt(det(J J^T))
    p_ee: np.ndarray      # (3,) end-effector origin
    R_ee: np.ndarray      # (3, 3) end-effector rotation


def frames(model: RobotModel, q: np.ndarray):
    """World rotation, origin and axis of every joint frame, plus the end
    effector pose: (R, p, z, Re, pe)."""
    R, p, z = _kernels.fk_frames(model.base_R, model.base_t, model.R_fix,
                                 model.t_fix, model.axis, np.asarray(q, dtype=np.float64))
    Re, pe = _kernels.ee_pose(R, p, model.ee_R, model.ee_t)
    return R, p, z, Re, pe


def fk(model: RobotModel, q: np.ndarray, qd: np.ndarray | None = None) -> CartesianState:
    """End-effector pose, with twist J qd when a velocity is given."""
    _, p, z, Re, pe = frames(model, q)
    if qd is None:
        twist = np.zeros(6)
    else:
        twist = _kernels.geometric_jacobian(z, p, pe) @ np.asarray(qd, dtype=np.float64)
    return CartesianState(position=pe, rotation=Re, twist=twist)


def jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    _, p, z, _, pe = frames(model, q)
    return _kernels.geometric_jacobian(z, p, pe)


def manipulability(J: np.ndarray) -> float:
    """sqrt(det(J J^T)); zero at and beyond singularities.  Accepts the
    full 6-row Jacobian or a reduced positional block."""
    return float(_kernels.manipulability(np.ascontiguousarray(J, dtype=np.float64)))


def inverse_dynamics(model: RobotModel, q: np.ndarray, qd: np.ndarray,
                     qdd: np.ndarray) -> np.ndarray:
    """tau = M(q) qdd + C(q, qd) qd + g(q)."""
    R, p, z = _kernels.fk_frames(model.base_R, model.base_t, model.R_fix,
                                 model.t_fix, model.axis, np.asarray(q, dtype=np.float64))
    return _kernels.rnea(R, p, z, model.base_t, model.mass, model.h_loc,
                         model.L_loc, model.gravity,
                         np.asarray(qd, dtype=np.float64),
                         np.asarray(qdd, dtype=np.float64))


def gravity_torque(model: RobotModel, q: np.ndarray) -> np.ndarray:
    zeros = np.zeros(model.n)
    return inverse_dynamics(model, q, zeros, zeros)


def coriolis_torque(model: RobotModel, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """C(q, qd) qd alone, via the recursion with gravity switched off."""
    R, p, z = _kernels.fk_frames(model.base_R, model.base_t, model.R_fix,
                                 model.t_fix, model.axis, np.asarray(q, dtype=np.float64))
    return _kernels.rnea(R, p, z, model.base_t, model.mass, model.h_loc,
                         model.L_loc, np.zeros(3),
                         np.asarray(qd, dtype=np.float64), np.zeros(model.n))


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    R, p, z = _kernels.fk_frames(model.base_R, model.base_t, model.R_fix,
                                 model.t_fix, model.axis, np.asarray(q, dtype=np.float64))
    return _kernels.crba(R, p, z, model.mass, model.com, model.inertia)


def dynamics(model: RobotModel, state: JointState) -> DynamicsTerms:
    """All per-tick terms in one pass (shared forward kinematics)."""
    q = np.asarray(state.q, dtype=np.float64)
    qd = np.asarray(state.qd, dtype=np.float64)
    M, g, cg, J, Jp, mk, pe, Re = _kernels.tick_dynamics(
        model.base_R, model.base_t, model.R_fix, model.t_fix, model.axis,
        model.ee_R, model.ee_t, model.mass, model.com, model.inertia,
        model.h_loc, model.L_loc, model.gravity, q, qd, PINV_DAMPING)
    return DynamicsTerms(M=M, c_qd=cg - g, g=g, J=J, J_pinv=Jp,
                         m_kin=float(mk), p_ee=pe, R_ee=Re)


def potential_energy(model: RobotModel, q: np.ndarray) -> float:
    """Gravitational potential; its configuration gradient is the gravity
    torque vector."""
    R, p, _ = _kernels.fk_frames(model.base_R, model.base_t, model.R_fix,
                                 model.t_fix, model.axis, np.asarray(q, dtype=np.float64))
    U = 0.0
    for i in range(model.n):
        c_world = p[i] + R[i] @ model.com[i]
        U -= model.mass[i] * float(model.gravity @ c_world)
    return U


def kinetic_energy(model: RobotModel, q: np.ndarray, qd: np.ndarray) -> float:
    qd = np.asarray(qd, dtype=np.float64)
    return 0.5 * float(qd @ mass_matrix(model, q) @ qd)


@dataclass
class SingularityAvoidance:
    """Gradient-descent torque on a one-sided quadratic potential over the
    manipulability measure.  Exactly zero while m_kin stays above the
    threshold, because the potential vanishes on that open set."""

    gain: float = 10.0
    threshold: float = 0.1
    fd_step: float = 1e-6

    def torque(self, model: RobotModel, q: np.ndarray) -> np.ndarray:
        return _kernels.manipulability_torque(
            model.base_R, model.base_t, model.R_fix, model.t_fix, model.axis,
            model.ee_R, model.ee_t, np.asarray(q, dtype=np.float64),
            self.gain, self.threshold, self.fd_step)

    def potential(self, model: RobotModel, q: np.ndarray) -> float:
        m_kin = manipulability(jacobian(model, q))
        return float(_kernels.singularity_potential(m_kin, self.gain, self.threshold))
