"""Robot model: kinematic chain, inertial parameters, limits.

Models are serial chains of revolute joints.  Each joint carries a fixed
transform from its parent frame (translation + fixed roll-pitch-yaw) and a
unit rotation axis expressed in the joint frame; link i is rigidly attached
to joint frame i.  The on-disk format is a nested key-value document, see
``data/arm7.model`` for the reference arm.

The loader validates every physical invariant it can check and reports
violations with the source line, because a silently-wrong inertia tensor
costs days of debugging downstream.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from . import kvdoc
from .geometry import rpy_matrix


def inertia_violation(I: np.ndarray, tol: float = 1e-9) -> str | None:
    """None if I is a physically admissible rotational inertia about the
    COM: symmetric, positive definite, principal moments satisfying the
    triangle inequality.  Otherwise a human-readable reason."""
    if not np.allclose(I, I.T, atol=1e-12, rtol=0.0):
        return "inertia matrix must be symmetric"
    eigs = np.sort(np.linalg.eigvalsh(0.5 * (I + I.T)))
    if eigs[0] <= tol:
        return f"inertia must be positive definite (min eigenvalue {eigs[0]:.3e})"
    if eigs[2] > eigs[0] + eigs[1] + tol * eigs[2]:
        return (f"principal moments violate the triangle inequality "
                f"({eigs[2]:.4g} > {eigs[0]:.4g} + {eigs[1]:.4g})")
    return None


def _unit_or_error(v: np.ndarray, line: int, what: str) -> np.ndarray:
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > 1e-9:
        raise kvdoc.DocError(line, f"{what} must be a unit vector (norm {norm:.6g})")
    return v


@dataclass
class RobotModel:
    """Array-packed robot description.  All arrays are float64 and are
    treated as immutable; derived copies go through the with_* helpers."""

    name: str
    version: int
    axis: np.ndarray          # (n, 3) unit axes in the joint frame
    R_fix: np.ndarray         # (n, 3, 3) fixed parent-frame rotations
    t_fix: np.ndarray         # (n, 3) fixed parent-frame translations
    ee_R: np.ndarray          # (3, 3) flange offset from the last frame
    ee_t: np.ndarray          # (3,)
    mass: np.ndarray          # (n,)
    com: np.ndarray           # (n, 3) in the link frame
    inertia: np.ndarray       # (n, 3, 3) about the COM, link frame
    q_lower: np.ndarray       # (n,)
    q_upper: np.ndarray
    qd_limit: np.ndarray
    tau_limit: np.ndarray
    gravity: np.ndarray       # (3,) world frame
    start_posture: np.ndarray  # (n,) documented non-singular start
    base_R: np.ndarray = field(default_factory=lambda: np.eye(3))
    base_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("axis", "R_fix", "t_fix", "ee_R", "ee_t", "mass", "com",
                     "inertia", "q_lower", "q_upper", "qd_limit", "tau_limit",
                     "gravity", "start_posture", "base_R", "base_t"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.validate()
        # first moment and inertia about the link frame origin; the
        # Newton-Euler recursion is linear in (mass, h, L)
        self.h_loc = self.com * self.mass[:, None]
        self.L_loc = np.empty_like(self.inertia)
        for i in range(self.n):
            c = self.com[i]
            self.L_loc[i] = self.inertia[i] + self.mass[i] * (
                np.dot(c, c) * np.eye(3) - np.outer(c, c))

    @property
    def n(self) -> int:
        return self.mass.shape[0]

    def validate(self):
        n = self.mass.shape[0]
        shapes = {
            "axis": (n, 3), "R_fix": (n, 3, 3), "t_fix": (n, 3),
            "com": (n, 3), "inertia": (n, 3, 3), "q_lower": (n,),
            "q_upper": (n,), "qd_limit": (n,), "tau_limit": (n,),
            "gravity": (3,), "start_posture": (n,), "ee_R": (3, 3),
            "ee_t": (3,), "base_R": (3, 3), "base_t": (3,),
        }
        for attr, shape in shapes.items():
            got = getattr(self, attr).shape
            if got != shape:
                raise ValueError(f"{attr}: expected shape {shape}, got {got}")
        for i in range(n):
            if abs(np.linalg.norm(self.axis[i]) - 1.0) > 1e-9:
                raise ValueError(f"joint {i + 1}: axis must be a unit vector")
            if self.mass[i] <= 0.0:
                raise ValueError(f"link {i + 1}: mass must be positive")
            reason = inertia_violation(self.inertia[i])
            if reason is not None:
                raise ValueError(f"link {i + 1}: {reason}")
            if self.q_lower[i] >= self.q_upper[i]:
                raise ValueError(f"joint {i + 1}: position limits must satisfy lower < upper")
            if self.qd_limit[i] <= 0.0 or self.tau_limit[i] <= 0.0:
                raise ValueError(f"joint {i + 1}: velocity and torque limits must be positive")
            if not (self.q_lower[i] <= self.start_posture[i] <= self.q_upper[i]):
                raise ValueError(f"joint {i + 1}: start posture outside position limits")

    def with_base(self, base_R: np.ndarray, base_t: np.ndarray) -> "RobotModel":
        return self._replace(base_R=np.asarray(base_R, dtype=np.float64),
                             base_t=np.asarray(base_t, dtype=np.float64))

    def with_inertials(self, mass: np.ndarray, com: np.ndarray,
                       inertia: np.ndarray) -> "RobotModel":
        """Copy with replaced inertial parameters; re-validated on build."""
        return self._replace(mass=mass, com=com, inertia=inertia)

    def _replace(self, **kw) -> "RobotModel":
        fields = dict(
            name=self.name, version=self.version, axis=self.axis,
            R_fix=self.R_fix, t_fix=self.t_fix, ee_R=self.ee_R, ee_t=self.ee_t,
            mass=self.mass, com=self.com, inertia=self.inertia,
            q_lower=self.q_lower, q_upper=self.q_upper,
            qd_limit=self.qd_limit, tau_limit=self.tau_limit,
            gravity=self.gravity, start_posture=self.start_posture,
            base_R=self.base_R, base_t=self.base_t)
        fields.update(kw)
        return RobotModel(**fields)

    # -- serialization ----------------------------------------------------

    def dumps(self) -> str:
        joints = {}
        for i in range(self.n):
            rpy = _matrix_to_rpy(self.R_fix[i])
            joints[f"j{i + 1}"] = {
                "translation": self.t_fix[i],
                "rotation_rpy": rpy,
                "axis": self.axis[i],
                "q_min": float(self.q_lower[i]),
                "q_max": float(self.q_upper[i]),
                "qd_max": float(self.qd_limit[i]),
                "tau_max": float(self.tau_limit[i]),
            }
        links = {}
        for i in range(self.n):
            I = self.inertia[i]
            links[f"l{i + 1}"] = {
                "mass": float(self.mass[i]),
                "com": self.com[i],
                "inertia": [I[0, 0], I[1, 1], I[2, 2], I[0, 1], I[0, 2], I[1, 2]],
            }
        doc = {
            "model": {"name": self.name, "version": self.version, "gravity": self.gravity},
            "joints": joints,
            "links": links,
            "end_effector": {"translation": self.ee_t,
                             "rotation_rpy": _matrix_to_rpy(self.ee_R)},
            "posture": {"start": self.start_posture},
        }
        return kvdoc.emit(doc) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def _matrix_to_rpy(R: np.ndarray) -> np.ndarray:
    pitch = np.arctan2(-R[2, 0], np.hypot(R[0, 0], R[1, 0]))
    if abs(abs(pitch) - np.pi / 2) < 1e-9:
        return np.array([np.arctan2(-R[1, 2], R[1, 1]), pitch, 0.0])
    return np.array([np.arctan2(R[2, 1], R[2, 2]), pitch,
                     np.arctan2(R[1, 0], R[0, 0])])


def loads(text: str) -> RobotModel:
    doc = kvdoc.parse(text)
    root = kvdoc.View(doc)

    meta = root.section("model")
    name = meta.str("name")
    version = meta.int("version")
    gravity = np.array(meta.floats("gravity", 3))
    meta.finish()

    joints = root.section("joints")
    axis, R_fix, t_fix = [], [], []
    q_lo, q_hi, qd_max, tau_max = [], [], [], []
    for key in joints.keys():
        j = joints.section(key)
        t_fix.append(j.floats("translation", 3))
        rpy = j.floats("rotation_rpy", 3, default=(0.0, 0.0, 0.0))
        R_fix.append(rpy_matrix(*rpy))
        ax = np.array(j.floats("axis", 3))
        axis.append(_unit_or_error(ax, j.line, f"joints.{key}.axis"))
        lo, hi = j.float("q_min"), j.float("q_max")
        if lo >= hi:
            raise kvdoc.DocError(j.line, f"joints.{key}: q_min must be below q_max")
        q_lo.append(lo)
        q_hi.append(hi)
        qd = j.float("qd_max")
        tq = j.float("tau_max")
        if qd <= 0 or tq <= 0:
            raise kvdoc.DocError(j.line, f"joints.{key}: qd_max and tau_max must be positive")
        qd_max.append(qd)
        tau_max.append(tq)
        j.finish()
    n = len(axis)
    if n == 0:
        raise kvdoc.DocError(joints.line, "model needs at least one joint")

    links = root.section("links")
    if len(links.keys()) != n:
        raise kvdoc.DocError(links.line,
                             f"model has {n} joints but {len(links.keys())} links")
    mass, com, inertia = [], [], []
    for key in links.keys():
        l = links.section(key)
        m = l.float("mass")
        if m <= 0:
            raise kvdoc.DocError(l.line, f"links.{key}: mass must be positive")
        mass.append(m)
        com.append(l.floats("com", 3))
        ixx, iyy, izz, ixy, ixz, iyz = l.floats("inertia", 6)
        I = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
        reason = inertia_violation(I)
        if reason is not None:
            raise kvdoc.DocError(l.line, f"links.{key}: {reason}")
        inertia.append(I)
        l.finish()

    ee = root.section("end_effector", required=False)
    if ee is not None:
        ee_t = np.array(ee.floats("translation", 3, default=(0.0, 0.0, 0.0)))
        ee_R = rpy_matrix(*ee.floats("rotation_rpy", 3, default=(0.0, 0.0, 0.0)))
        ee.finish()
    else:
        ee_t = np.zeros(3)
        ee_R = np.eye(3)

    posture = root.section("posture", required=False)
    if posture is not None:
        start = np.array(posture.floats("start", n))
        posture.finish()
    else:
        start = np.zeros(n)
    root.finish()

    try:
        return RobotModel(
            name=name, version=version, axis=np.array(axis),
            R_fix=np.array(R_fix), t_fix=np.array(t_fix),
            ee_R=ee_R, ee_t=ee_t,
            mass=np.array(mass), com=np.array(com), inertia=np.array(inertia),
            q_lower=np.array(q_lo), q_upper=np.array(q_hi),
            qd_limit=np.array(qd_max), tau_limit=np.array(tau_max),
            gravity=gravity, start_posture=start)
    except ValueError as exc:
        raise kvdoc.DocError(doc.line or 1, str(exc)) from exc


def load(path) -> RobotModel:
    with open(path) as fh:
        return loads(fh.read())


def builtin(name: str = "arm7") -> RobotModel:
    """Load a model shipped with the package."""
    text = importlib.resources.files("torquemux.data").joinpath(f"{name}.model").read_text()
    return loads(text)
