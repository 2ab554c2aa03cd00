"""Inertial parameter identification from excitation runs.

Rigid-body joint torque is linear in the per-link parameter block
(m, h, L): mass, first moment h = m * com, and the inertia L about the
link frame origin, all in link coordinates.  Ten numbers per link, laid
out as

    m, h_x, h_y, h_z, L_xx, L_xy, L_xz, L_yy, L_yz, L_zz

so the measured torques of an excitation run stack into one regularized
least-squares problem.  The solve works on the deviation from a prior,
keeps non-identifiable directions at the prior, and projects the result
back to a physically consistent model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, filtfilt

from . import _kernels, dynamics
from .model import RobotModel
from .trajectories import ReferenceSource, TaskScene
from .controllets import JointTarget

PARAMS_PER_LINK = 10
_L_ENTRIES = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


class ParameterVector:
    """Flat (10 * n_links,) parameter vector with link accessors.

    A vector built by from_model keeps the source inertials so that
    applying it back reproduces the model bit for bit; vectors produced
    by the solver reconstruct com and rotational inertia from (m, h, L).
    """

    def __init__(self, values: np.ndarray, n_links: int, _inertials=None):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (PARAMS_PER_LINK * n_links,):
            raise ValueError("parameter vector has the wrong length")
        self.values = values.copy()
        self.values.setflags(write=False)
        self.n_links = int(n_links)
        self._inertials = _inertials

    @classmethod
    def from_model(cls, model: RobotModel) -> "ParameterVector":
        vals = np.empty(PARAMS_PER_LINK * model.n)
        for i in range(model.n):
            o = PARAMS_PER_LINK * i
            vals[o] = model.mass[i]
            vals[o + 1:o + 4] = model.h_loc[i]
            for k, (r, c) in enumerate(_L_ENTRIES):
                vals[o + 4 + k] = model.L_loc[i][r, c]
        keep = (model.mass.copy(), model.com.copy(), model.inertia.copy())
        return cls(vals, model.n, _inertials=keep)

    def link(self, i: int):
        """(mass, h, L) of one link, L as the full symmetric matrix."""
        o = PARAMS_PER_LINK * i
        m = float(self.values[o])
        h = self.values[o + 1:o + 4].copy()
        L = np.empty((3, 3))
        for k, (r, c) in enumerate(_L_ENTRIES):
            L[r, c] = L[c, r] = self.values[o + 4 + k]
        return m, h, L

    def to_inertials(self):
        """(mass, com, inertia about com) arrays for model rebuilding."""
        if self._inertials is not None:
            return tuple(a.copy() for a in self._inertials)
        mass = np.empty(self.n_links)
        com = np.empty((self.n_links, 3))
        inertia = np.empty((self.n_links, 3, 3))
        for i in range(self.n_links):
            m, h, L = self.link(i)
            c = h / m
            mass[i] = m
            com[i] = c
            inertia[i] = L - m * ((c @ c) * np.eye(3) - np.outer(c, c))
        return mass, com, inertia


def apply_identified(model: RobotModel, pv: ParameterVector) -> RobotModel:
    """New model with the identified inertials; kinematics untouched.
    Rejects physically inconsistent parameters via model validation."""
    if pv.n_links != model.n:
        raise ValueError("parameter vector sized for a different chain")
    mass, com, inertia = pv.to_inertials()
    return model.with_inertials(mass, com, inertia)


# -- regressor -------------------------------------------------------------


def regressor(model: RobotModel, q: np.ndarray, qd: np.ndarray,
              qdd: np.ndarray) -> np.ndarray:
    """Y(q, qd, qdd) with tau = Y @ pi exactly, shape (n, 10 n).

    Column j is the recursive torque evaluated with the j-th unit
    parameter vector; the recursion is linear in (m, h, L), so the
    columns assemble the exact map.
    """
    n = model.n
    R, p, z = _kernels.fk_frames(model.base_R, model.base_t, model.R_fix,
                                 model.t_fix, model.axis,
                                 np.asarray(q, dtype=np.float64))
    qd = np.asarray(qd, dtype=np.float64)
    qdd = np.asarray(qdd, dtype=np.float64)
    Y = np.empty((n, PARAMS_PER_LINK * n))
    mass = np.zeros(n)
    h = np.zeros((n, 3))
    L = np.zeros((n, 3, 3))
    for link in range(n):
        for j in range(PARAMS_PER_LINK):
            if j == 0:
                mass[link] = 1.0
            elif j < 4:
                h[link, j - 1] = 1.0
            else:
                r, c = _L_ENTRIES[j - 4]
                L[link, r, c] = L[link, c, r] = 1.0
            Y[:, PARAMS_PER_LINK * link + j] = _kernels.rnea(
                R, p, z, model.base_t, mass, h, L, model.gravity, qd, qdd)
            mass[link] = 0.0
            h[link] = 0.0
            L[link] = 0.0
    return Y


# -- data preparation ------------------------------------------------------


def prepare(q: np.ndarray, qd: np.ndarray, tau: np.ndarray, dt: float, *,
            cutoff: float = 30.0, decimate: int = 10):
    """Zero-phase low-pass, acceleration by central difference, decimation.

    Returns (q, qd, qdd, tau) at the decimated rate with the endpoints
    dropped where the difference stencil is undefined.
    """
    q = np.asarray(q, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if len(q) < 20:
        raise ValueError("too few samples to filter")
    b, a = butter(4, cutoff, fs=1.0 / dt)
    qf = filtfilt(b, a, q, axis=0)
    qdf = filtfilt(b, a, qd, axis=0)
    tauf = filtfilt(b, a, tau, axis=0)
    qdd = (qdf[2:] - qdf[:-2]) / (2.0 * dt)
    idx = np.arange(1, len(q) - 1, decimate)
    return qf[idx], qdf[idx], qdd[idx - 1], tauf[idx]


# -- identification --------------------------------------------------------


@dataclass
class IdentificationResult:
    params: ParameterVector
    prior: ParameterVector
    singular_values: np.ndarray
    identifiable: int
    condition: float
    confidence: np.ndarray
    residual_rms: float
    warning: str | None = None

    def report(self) -> str:
        lines = [f"identified {self.identifiable} of "
                 f"{self.params.values.size} parameter directions, "
                 f"condition {self.condition:.3g}, "
                 f"fit residual {self.residual_rms:.3g} N m"]
        if self.warning:
            lines.append(f"warning: {self.warning}")
        lines.append(f"{'idx':>4} {'value':>12} {'prior':>12} {'confidence':>11}")
        for j, (v, p, c) in enumerate(zip(self.params.values,
                                          self.prior.values,
                                          self.confidence)):
            lines.append(f"{j:>4} {v:>12.5g} {p:>12.5g} {c:>11.3f}")
        return "\n".join(lines)


def _project_physical(m: float, h: np.ndarray, L: np.ndarray, *,
                      min_mass: float = 1e-3, min_eig: float = 1e-8):
    """Nearest-ish physically consistent (mass, com, inertia about com)."""
    m = max(m, min_mass)
    c = h / m
    Ic = L - m * ((c @ c) * np.eye(3) - np.outer(c, c))
    Ic = 0.5 * (Ic + Ic.T)
    w, V = np.linalg.eigh(Ic)
    w = np.maximum(w, min_eig)
    # triangle inequality: the largest principal moment cannot exceed the
    # sum of the other two for any mass distribution
    if w[2] > w[0] + w[1]:
        w[2] = (w[0] + w[1]) * (1.0 - 1e-9)
    Ic = V @ np.diag(w) @ V.T
    return m, c, 0.5 * (Ic + Ic.T)


def identify(model: RobotModel, q: np.ndarray, qd: np.ndarray,
             qdd: np.ndarray, tau: np.ndarray, *,
             lam: float = 1e-3,
             prior: ParameterVector | None = None,
             ident_tol: float = 1e-10) -> IdentificationResult:
    """Regularized least squares on the deviation from the prior.

    The SVD ridge shrinks poorly observed directions toward zero
    deviation, so non-identifiable combinations keep their prior values;
    the result is projected to physical consistency link by link.
    """
    q, qd = np.atleast_2d(q), np.atleast_2d(qd)
    qdd, tau = np.atleast_2d(qdd), np.atleast_2d(tau)
    n_s = q.shape[0]
    min_samples = 5 * PARAMS_PER_LINK * model.n
    if n_s < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {n_s}")
    if prior is None:
        prior = ParameterVector.from_model(model)

    Y = np.vstack([regressor(model, q[i], qd[i], qdd[i]) for i in range(n_s)])
    r = tau.reshape(-1) - Y @ prior.values

    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    gain = s / (s * s + lam)
    delta = Vt.T @ (gain * (U.T @ r))
    raw = prior.values + delta

    # project each link back to a buildable model
    vals = np.empty_like(raw)
    pvr = ParameterVector(raw, model.n)
    for i in range(model.n):
        m, h, L = pvr.link(i)
        m, c, Ic = _project_physical(m, h, L)
        o = PARAMS_PER_LINK * i
        vals[o] = m
        vals[o + 1:o + 4] = m * c
        Lf = Ic + m * ((c @ c) * np.eye(3) - np.outer(c, c))
        for k, (rr, cc) in enumerate(_L_ENTRIES):
            vals[o + 4 + k] = Lf[rr, cc]
    params = ParameterVector(vals, model.n)

    ident = s > s[0] * ident_tol
    n_ident = int(np.sum(ident))
    cond = float(s[0] / s[ident][-1]) if n_ident else np.inf
    confidence = (Vt.T ** 2) @ (s * gain)
    residual = float(np.sqrt(np.mean((Y @ params.values
                                      - tau.reshape(-1)) ** 2)))
    warning = None
    if cond > 1e8:
        warning = (f"identifiable block condition {cond:.3g} exceeds 1e8; "
                   "low-confidence parameters follow the prior")
    return IdentificationResult(params=params, prior=prior,
                                singular_values=s, identifiable=n_ident,
                                condition=cond, confidence=confidence,
                                residual_rms=residual, warning=warning)


# -- excitation ------------------------------------------------------------

EXCITE_FREQS = (0.1, 0.3, 0.7)
EXCITE_WEIGHTS = (0.5, 0.3, 0.2)
RAMP_S = 2.0


class MultiSine(ReferenceSource):
    """Per-joint three-sine sweep with a smooth amplitude ramp-in."""

    def __init__(self, robot: int, q0, amplitude, phases,
                 freqs=EXCITE_FREQS, weights=EXCITE_WEIGHTS,
                 ramp: float = RAMP_S):
        self.robot = robot
        self.q0 = np.asarray(q0, dtype=np.float64)
        self.amplitude = np.asarray(amplitude, dtype=np.float64)
        self.phases = np.asarray(phases, dtype=np.float64)
        self.freqs = np.asarray(freqs, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.ramp = float(ramp)

    def targets(self, t: float):
        w = 2.0 * np.pi * self.freqs
        s = np.sin(w * t + self.phases)            # (n, 3)
        ds = w * np.cos(w * t + self.phases)
        shape = s @ self.weights
        dshape = ds @ self.weights
        if t < self.ramp:
            # raised-cosine ramp: the sweep starts at rest (env = denv = 0)
            u = np.pi * t / self.ramp
            env = 0.5 * (1.0 - np.cos(u))
            denv = 0.5 * np.pi / self.ramp * np.sin(u)
        else:
            env, denv = 1.0, 0.0
        q = self.q0 + self.amplitude * env * shape
        qd = self.amplitude * (denv * shape + env * dshape)
        return {self.robot: JointTarget(q=q, qd=qd)}


def excitation_scene(model: RobotModel, *, duration: float = 20.0,
                     floor_z: float = 0.05, scale: float = 1.0) -> TaskScene:
    """Free-space excitation run for identification.

    Amplitudes take half of each joint's available margin around the
    start posture; the desired tool path is checked to stay above the
    floor plane and amplitudes shrink until it does.
    """
    q0 = model.start_posture
    margin = np.minimum(model.q_upper - q0, q0 - model.q_lower)
    amp = 0.5 * margin * scale
    # deterministic incommensurate phases, one per joint and frequency
    j = np.arange(model.n)[:, None]
    k = np.arange(3)[None, :]
    phases = (2.399963229728653 * (3 * j + k)) % (2.0 * np.pi)

    for _ in range(6):
        src = MultiSine(0, q0, amp, phases)
        low = min(dynamics.fk(model, src.targets(t)[0].q).position[2]
                  for t in np.arange(0.0, duration, 0.05))
        if low > floor_z:
            break
        amp = amp * 0.8
    else:
        raise ValueError("cannot fit the excitation above the floor")
    return TaskScene(name="sysid-excitation", robots=(0,), models={0: model},
                     start={0: q0.copy()}, controllet="joint_impedance",
                     params={}, source=src, duration=duration)
