"""Hot-path numeric kernels, JIT-compiled once per process.

Everything here works on plain float64 arrays unpacked from RobotModel so
that the 1 kHz loop spends its time in compiled code.  All quantities are
expressed in the world frame; a robot's base pose enters only through the
first forward-kinematics step.

Inertial convention: the Newton-Euler recursion is written in terms of
(mass, first moment h = m*com, inertia L about the link frame origin),
which makes joint torque exactly linear in those ten numbers per link.
The identification regressor reuses the same recursion with basis
parameter vectors, so regressor-times-parameters matches the recursion to
machine precision instead of to a finite-difference tolerance.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _rot_axis(axis, angle):
    x, y, z = axis[0], axis[1], axis[2]
    c = np.cos(angle)
    s = np.sin(angle)
    t = 1.0 - c
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * t
    R[0, 1] = x * y * t - z * s
    R[0, 2] = x * z * t + y * s
    R[1, 0] = x * y * t + z * s
    R[1, 1] = c + y * y * t
    R[1, 2] = y * z * t - x * s
    R[2, 0] = x * z * t - y * s
    R[2, 1] = y * z * t + x * s
    R[2, 2] = c + z * z * t
    return R


@njit(cache=True)
def fk_frames(base_R, base_t, R_fix, t_fix, axis, q):
    """World pose of every joint frame.

    Frame i is the parent frame composed with the fixed transform, then
    rotated about the joint axis by q[i].  Returns per-frame rotation,
    origin and world joint axis.
    """
    n = q.shape[0]
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    z = np.empty((n, 3))
    R_prev = base_R
    p_prev = base_t
    for i in range(n):
        R_joint = R_prev @ R_fix[i]
        p[i] = p_prev + R_prev @ t_fix[i]
        R[i] = R_joint @ _rot_axis(axis[i], q[i])
        z[i] = R[i] @ axis[i]
        R_prev = R[i]
        p_prev = p[i]
    return R, p, z


@njit(cache=True)
def ee_pose(R, p, ee_R, ee_t):
    n = R.shape[0]
    Re = R[n - 1] @ ee_R
    pe = p[n - 1] + R[n - 1] @ ee_t
    return Re, pe


@njit(cache=True)
def geometric_jacobian(z, p, pe):
    """Base-frame geometric Jacobian of the end-effector point."""
    n = z.shape[0]
    J = np.empty((6, n))
    for i in range(n):
        J[0, i] = z[i, 1] * (pe[2] - p[i, 2]) - z[i, 2] * (pe[1] - p[i, 1])
        J[1, i] = z[i, 2] * (pe[0] - p[i, 0]) - z[i, 0] * (pe[2] - p[i, 2])
        J[2, i] = z[i, 0] * (pe[1] - p[i, 1]) - z[i, 1] * (pe[0] - p[i, 0])
        J[3, i] = z[i, 0]
        J[4, i] = z[i, 1]
        J[5, i] = z[i, 2]
    return J


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def rnea(R, p, z, base_t, mass, h_loc, L_loc, gravity, qd, qdd):
    """Inverse dynamics: tau = M(q) qdd + C(q, qd) qd + g(q).

    Gravity enters as a fictitious base acceleration, so passing zeros for
    qd/qdd yields gravity torque and passing a zero gravity vector with
    qdd = 0 yields the velocity product term alone.
    """
    n = mass.shape[0]
    omega = np.empty((n, 3))
    domega = np.empty((n, 3))
    acc = np.empty((n, 3))
    F = np.empty((n, 3))
    N = np.empty((n, 3))

    w_prev = np.zeros(3)
    dw_prev = np.zeros(3)
    a_prev = -gravity
    p_prev = base_t
    for i in range(n):
        zi = z[i]
        w = w_prev + zi * qd[i]
        dw = dw_prev + zi * qdd[i] + _cross(w_prev, zi) * qd[i]
        r = p[i] - p_prev
        a = a_prev + _cross(dw_prev, r) + _cross(w_prev, _cross(w_prev, r))
        omega[i] = w
        domega[i] = dw
        acc[i] = a

        h_w = R[i] @ h_loc[i]
        L_w = R[i] @ L_loc[i] @ R[i].T
        F[i] = mass[i] * a + _cross(dw, h_w) + _cross(w, _cross(w, h_w))
        N[i] = L_w @ dw + _cross(w, L_w @ w) + _cross(h_w, a)

        w_prev = w
        dw_prev = dw
        a_prev = a
        p_prev = p[i]

    tau = np.empty(n)
    f_child = np.zeros(3)
    n_child = np.zeros(3)
    p_child = np.zeros(3)
    for i in range(n - 1, -1, -1):
        f = F[i] + f_child
        nm = N[i] + n_child
        if i < n - 1:
            nm = nm + _cross(p_child - p[i], f_child)
        tau[i] = z[i, 0] * nm[0] + z[i, 1] * nm[1] + z[i, 2] * nm[2]
        f_child = f
        n_child = nm
        p_child = p[i]
    return tau


@njit(cache=True)
def crba(R, p, z, mass, com_loc, I_loc):
    """Mass matrix by composite rigid-body accumulation.

    All spatial inertias are referred to the world origin, so composites
    of consecutive links are plain sums and M[i, j] contracts the joint
    motion axes against the composite inertia of the farther subtree.
    """
    n = mass.shape[0]
    M = np.zeros((n, n))

    # joint spatial axes about the world origin
    S_ang = np.empty((n, 3))
    S_lin = np.empty((n, 3))
    for i in range(n):
        S_ang[i] = z[i]
        S_lin[i] = _cross(p[i], z[i])

    A = np.zeros((3, 3))     # composite angular inertia about origin
    B = np.zeros((3, 3))     # composite m * skew(com)
    m_sum = 0.0
    for i in range(n - 1, -1, -1):
        c = p[i] + R[i] @ com_loc[i]
        Ic = R[i] @ I_loc[i] @ R[i].T
        m = mass[i]
        cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2]
        for r in range(3):
            for s in range(3):
                A[r, s] += Ic[r, s] - m * c[r] * c[s]
            A[r, r] += m * cc
        B[0, 1] += -m * c[2]
        B[0, 2] += m * c[1]
        B[1, 0] += m * c[2]
        B[1, 2] += -m * c[0]
        B[2, 0] += -m * c[1]
        B[2, 1] += m * c[0]
        m_sum += m

        Aw = A @ S_ang[i] + B @ S_lin[i]
        Av = B.T @ S_ang[i] + m_sum * S_lin[i]
        for j in range(i + 1):
            M[i, j] = (S_ang[j, 0] * Aw[0] + S_ang[j, 1] * Aw[1] + S_ang[j, 2] * Aw[2]
                       + S_lin[j, 0] * Av[0] + S_lin[j, 1] * Av[1] + S_lin[j, 2] * Av[2])
            M[j, i] = M[i, j]
    return M


@njit(cache=True)
def damped_pinv(J, damping):
    """J^T (J J^T + damping^2 I)^-1, shape (n, 6)."""
    G = J @ J.T
    for i in range(6):
        G[i, i] += damping * damping
    return J.T @ np.linalg.inv(G)


@njit(cache=True)
def manipulability(J):
    G = J @ J.T
    d = np.linalg.det(G)
    if d < 0.0:
        d = 0.0
    return np.sqrt(d)


@njit(cache=True)
def _manip_of_q(base_R, base_t, R_fix, t_fix, axis, ee_R, ee_t, q):
    R, p, z = fk_frames(base_R, base_t, R_fix, t_fix, axis, q)
    Re, pe = ee_pose(R, p, ee_R, ee_t)
    return manipulability(geometric_jacobian(z, p, pe))


@njit(cache=True)
def tick_dynamics(base_R, base_t, R_fix, t_fix, axis, ee_R, ee_t,
                  mass, com_loc, I_loc, h_loc, L_loc, gravity, q, qd,
                  pinv_damping):
    """Every per-tick dynamics quantity in one compiled call, so the
    1 kHz path pays a single dispatch instead of eight."""
    n = q.shape[0]
    R, p, z = fk_frames(base_R, base_t, R_fix, t_fix, axis, q)
    Re, pe = ee_pose(R, p, ee_R, ee_t)
    J = geometric_jacobian(z, p, pe)
    M = crba(R, p, z, mass, com_loc, I_loc)
    zero = np.zeros(n)
    g = rnea(R, p, z, base_t, mass, h_loc, L_loc, gravity, zero, zero)
    cg = rnea(R, p, z, base_t, mass, h_loc, L_loc, gravity, qd, zero)
    Jp = damped_pinv(J, pinv_damping)
    mk = manipulability(J)
    return M, g, cg, J, Jp, mk, pe, Re


@njit(cache=True)
def singularity_potential(m_kin, gain, threshold):
    if m_kin > threshold:
        return 0.0
    d = m_kin - threshold
    return gain * d * d


@njit(cache=True)
def manipulability_torque(base_R, base_t, R_fix, t_fix, axis, ee_R, ee_t,
                          q, gain, threshold, eps):
    """Negative gradient of the singularity-avoidance potential, by
    central differences of the potential per joint."""
    n = q.shape[0]
    tau = np.zeros(n)
    qp = q.copy()
    for i in range(n):
        qi = q[i]
        qp[i] = qi + eps
        vp = singularity_potential(
            _manip_of_q(base_R, base_t, R_fix, t_fix, axis, ee_R, ee_t, qp),
            gain, threshold)
        qp[i] = qi - eps
        vm = singularity_potential(
            _manip_of_q(base_R, base_t, R_fix, t_fix, axis, ee_R, ee_t, qp),
            gain, threshold)
        qp[i] = qi
        tau[i] = -(vp - vm) / (2.0 * eps)
    return tau


@njit(cache=True)
def segment_closest_points(a0, a1, b0, b1):
    """Closest points between two segments (clamped quadratic, handles
    degenerate and parallel cases).  Returns (distance, point_a, point_b)."""
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2]
    e = d2[0] * d2[0] + d2[1] * d2[1] + d2[2] * d2[2]
    f = d2[0] * r[0] + d2[1] * r[1] + d2[2] * r[2]
    # a segment counts as a point only when its squared length underflows to
    # exactly zero: collapsing a short-but-finite segment onto one endpoint
    # loses up to its full length of accuracy, while the clamped ratios below
    # stay well defined for any positive length.  The threshold is only for
    # the near-parallel denominator, where it belongs.
    tiny = 1e-14
    if a == 0.0 and e == 0.0:
        s = 0.0
        t = 0.0
    elif a == 0.0:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = d1[0] * r[0] + d1[1] * r[1] + d1[2] * r[2]
        if e == 0.0:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = d1[0] * d2[0] + d1[1] * d2[1] + d1[2] * d2[2]
            denom = a * e - b * b
            if denom > tiny:
                s = min(max((b * f - c * e) / denom, 0.0), 1.0)
            else:
                s = 0.0
            t = b * s + f
            if t < 0.0:
                t = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif t > e:
                t = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
            else:
                t = t / e
    pa = a0 + s * d1
    pb = b0 + t * d2
    diff = pa - pb
    dist = np.sqrt(diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2])
    return dist, pa, pb


@njit(cache=True)
def avoidance_map(pts_a, anchor_joint_a, p_a, z_a, n_a, pts_b,
                  margin, gain, fallback, dirs, have_dir):
    """Repulsion torque on chain a from proximity to chain b, in one
    compiled call: scans every consecutive-anchor segment pair, applies a
    linear repulsion below the margin at the closest point, splits it
    between the bounding anchors, and maps each share through that
    anchor's point Jacobian.

    dirs/have_dir persist the last valid separation direction per segment
    pair so coincident segments can reuse it (fallback axis otherwise).
    Returns (tau, degenerate)."""
    ka = pts_a.shape[0] - 1
    kb = pts_b.shape[0] - 1
    tau = np.zeros(n_a)
    degenerate = False
    for i in range(ka):
        a0 = pts_a[i]
        a1 = pts_a[i + 1]
        for j in range(kb):
            d, pa, pb = segment_closest_points(a0, a1, pts_b[j], pts_b[j + 1])
            if d >= margin:
                continue
            if d > 1e-9:
                for k in range(3):
                    dirs[i, j, k] = (pa[k] - pb[k]) / d
                have_dir[i, j] = 1
                n_hat = dirs[i, j]
            elif have_dir[i, j] == 1:
                n_hat = dirs[i, j]
                degenerate = True
            else:
                n_hat = fallback
                degenerate = True
            mag = gain * (margin - d)
            seg = a1 - a0
            L2 = seg[0] * seg[0] + seg[1] * seg[1] + seg[2] * seg[2]
            if L2 > 0.0:
                s = ((pa[0] - a0[0]) * seg[0] + (pa[1] - a0[1]) * seg[1]
                     + (pa[2] - a0[2]) * seg[2]) / L2
                s = min(max(s, 0.0), 1.0)
            else:
                s = 0.0
            for end in range(2):
                w = mag * ((1.0 - s) if end == 0 else s)
                if w == 0.0:
                    continue
                kj = anchor_joint_a[i + end]
                pt = pts_a[i + end]
                for col in range(kj + 1):
                    rx = pt[0] - p_a[col, 0]
                    ry = pt[1] - p_a[col, 1]
                    rz = pt[2] - p_a[col, 2]
                    cx = z_a[col, 1] * rz - z_a[col, 2] * ry
                    cy = z_a[col, 2] * rx - z_a[col, 0] * rz
                    cz = z_a[col, 0] * ry - z_a[col, 1] * rx
                    tau[col] += w * (cx * n_hat[0] + cy * n_hat[1]
                                     + cz * n_hat[2])
    return tau, degenerate
