import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from torquemux import controllets as ct
from torquemux import dynamics
from torquemux.dynamics import Observation
from torquemux.geometry import rpy_matrix

from conftest import random_configs
import oracles


def make_obs(m, q, qd=None, f_ee=None, t=0.0):
    q = np.asarray(q, dtype=np.float64)
    qd = np.zeros(m.n) if qd is None else np.asarray(qd, dtype=np.float64)
    f = np.zeros(6) if f_ee is None else np.asarray(f_ee, dtype=np.float64)
    return Observation(q=q, qd=qd, tau=np.zeros(m.n), f_ee=f, t=t)


@pytest.fixture
def pair(arm):
    """Two arms far enough apart that their skeletons never interact."""
    return {0: arm, 1: arm.with_base(np.eye(3), np.array([3.0, 0.0, 0.0]))}


@pytest.fixture
def close_pair(arm):
    """Arms facing each other, slightly offset in y: skeleton gap 0.12 m."""
    other = arm.with_base(rpy_matrix(0.0, 0.0, np.pi),
                          np.array([0.9, 0.12, 0.0]))
    return {0: arm, 1: other}


def skeleton_min_distance(models, obs, cfg):
    best = np.inf
    pts = {}
    for r, m in models.items():
        R, p, z, _, _ = dynamics.frames(m, obs[r].q)
        anchors = cfg.resolved_anchors(m)
        pts[r] = np.array([p[k] + R[k] @ off for k, off in anchors])
    a, b = pts[0], pts[1]
    for i in range(len(a) - 1):
        for j in range(len(b) - 1):
            best = min(best, oracles.brute_segment_distance(
                a[i], a[i + 1], b[j], b[j + 1]))
    return best


# -- composition -----------------------------------------------------------


def test_seal_sum_is_bit_reproducible(rng):
    parts = [rng.normal(size=7) for _ in range(5)]
    t = ct.TorqueTerms(*parts).seal(np.full(7, 1e9))
    expected = ((((parts[0] + parts[1]) + parts[2]) + parts[3]) + parts[4])
    assert np.array_equal(t.presat, expected)
    assert np.array_equal(t.cmd, expected)
    assert t.flags == 0


def test_seal_clamps_and_flags(rng):
    t = ct.TorqueTerms(np.full(7, 100.0), np.zeros(7), np.zeros(7),
                       np.zeros(7), np.zeros(7)).seal(np.full(7, 90.0))
    assert t.flags & ct.FLAG_SATURATED
    assert np.all(t.cmd == 90.0)
    assert np.all(t.presat == 100.0)


def test_robot_count_validation(arm, pair):
    with pytest.raises(ValueError):
        ct.CoupledImpedance(pair, [0])
    with pytest.raises(ValueError):
        ct.JointImpedance({0: arm}, [0, 0])
    with pytest.raises(ValueError):
        ct.CartesianImpedance({0: arm}, [1])


def test_registry_covers_all_kinds():
    assert set(ct.KINDS) == {"joint_impedance", "cartesian_impedance",
                             "coupled_impedance", "unified_force"}


# -- impedance laws --------------------------------------------------------


def test_joint_impedance_is_a_spring(arm, rng):
    c = ct.JointImpedance({0: arm}, [0])
    q = arm.start_posture + 0.1 * rng.normal(size=7)
    qd = 0.2 * rng.normal(size=7)
    c.on_activate({0: make_obs(arm, arm.start_posture)})
    c.set_target(0, ct.JointTarget(q=arm.start_posture.copy()))
    terms = c.compute({0: make_obs(arm, q, qd)})[0]
    expected = (c.gains.stiffness * (arm.start_posture - q)
                - c.gains.damping * qd)
    np.testing.assert_allclose(terms.task, expected, atol=1e-12)
    np.testing.assert_allclose(
        terms.cor, dynamics.coriolis_torque(arm, q, qd), atol=1e-12)
    assert np.all(terms.null == 0.0)


def test_cartesian_task_matches_hand_formula(arm, rng):
    c = ct.CartesianImpedance({0: arm}, [0], use_nullspace=False)
    for q in random_configs(arm, rng, 5):
        qd = 0.3 * rng.normal(size=7)
        cs = dynamics.fk(arm, arm.start_posture)
        c.set_target(0, ct.CartesianTarget(position=cs.position,
                                           rotation=cs.rotation))
        terms = c.compute({0: make_obs(arm, q, qd)})[0]
        R_ref, p_ref = oracles.fk_oracle(arm, q)
        J = dynamics.jacobian(arm, q)
        x_err = np.concatenate([
            p_ref - cs.position,
            Rotation.from_matrix(R_ref @ cs.rotation.T).as_rotvec()])
        F = -c.gains.stiffness * x_err - c.gains.damping * (J @ qd)
        np.testing.assert_allclose(terms.task, J.T @ F, atol=1e-8)


def test_spring_accelerates_toward_target(arm):
    c = ct.CartesianImpedance({0: arm}, [0], use_nullspace=False)
    q = arm.start_posture
    cs = dynamics.fk(arm, q)
    offset = np.array([0.05, -0.03, 0.04])
    c.set_target(0, ct.CartesianTarget(position=cs.position + offset,
                                       rotation=cs.rotation))
    terms = c.compute({0: make_obs(arm, q)})[0]
    M = dynamics.mass_matrix(arm, q)
    qdd = np.linalg.solve(M, terms.task)
    v_ee = (dynamics.jacobian(arm, q) @ qdd)[:3]
    assert v_ee @ offset > 0.0


def test_feedforward_flag_is_exact_at_zero_accel(arm, rng):
    plain = ct.CartesianImpedance({0: arm}, [0])
    ff = ct.CartesianImpedance({0: arm}, [0], feedforward=True)
    q = arm.start_posture + 0.05 * rng.normal(size=7)
    o = make_obs(arm, q, 0.1 * rng.normal(size=7))
    plain.on_activate({0: o})
    ff.on_activate({0: o})
    ff.targets[0] = plain.targets[0]
    a = plain.compute({0: o})[0]
    b = ff.compute({0: o})[0]
    assert np.array_equal(a.cmd, b.cmd)


# -- exact null cases ------------------------------------------------------


def test_command_reduces_to_velocity_compensation_at_rest(arm):
    """Zero pose error, zero velocity, posture at target: the command is the
    velocity-compensation term alone, bit for bit."""
    c = ct.CartesianImpedance({0: arm}, [0],
                              nullspace=ct.NullspaceGains(posture=arm.start_posture))
    q = arm.start_posture
    o = make_obs(arm, q)
    c.on_activate({0: o})           # captures the current pose as target
    terms = c.compute({0: o})[0]
    assert np.array_equal(terms.task, np.zeros(7))
    assert np.array_equal(terms.null, np.zeros(7))
    assert np.array_equal(terms.cmd, terms.cor)


def test_nullspace_zero_at_rest_posture(arm, rng):
    c = ct.CartesianImpedance({0: arm}, [0],
                              nullspace=ct.NullspaceGains(posture=arm.start_posture))
    o = make_obs(arm, arm.start_posture)
    c.set_target(0, ct.CartesianTarget(position=np.array([0.4, 0.1, 0.6]),
                                       rotation=np.eye(3)))
    terms = c.compute({0: o})[0]
    assert np.array_equal(terms.null, np.zeros(7))


def test_nullspace_maps_to_zero_task_wrench(arm, rng):
    c = ct.CartesianImpedance({0: arm}, [0])
    for q in random_configs(arm, rng, 5):
        o = make_obs(arm, q, 0.2 * rng.normal(size=7))
        c.targets[0] = ct.CartesianTarget(position=np.array([0.4, 0.0, 0.6]),
                                          rotation=np.eye(3))
        terms = c.compute({0: o})[0]
        J = dynamics.jacobian(arm, q)
        # tau_null lies in the row-space complement: pinv(J)^T tau_null = 0
        residual = np.linalg.pinv(J).T @ terms.null
        assert np.linalg.norm(residual) < 1e-9


def test_singularity_term_zero_when_well_conditioned(arm):
    c = ct.CartesianImpedance({0: arm}, [0],
                              singularity=dynamics.SingularityAvoidance())
    q = np.array([0.0, 0.6, 0.0, 1.3, 0.0, 1.1, 0.0])
    assert dynamics.manipulability(dynamics.jacobian(arm, q)) > 0.11
    o = make_obs(arm, q)
    c.on_activate({0: o})
    terms = c.compute({0: o})[0]
    assert np.array_equal(terms.ma, np.zeros(7))


def test_avoidance_zero_when_far(pair):
    cfg = ct.AvoidanceConfig()
    c = ct.CartesianImpedance(pair, [0], avoidance=cfg)
    obs = {r: make_obs(m, m.start_posture) for r, m in pair.items()}
    assert skeleton_min_distance(pair, obs, cfg) > cfg.margin
    c.on_activate(obs)
    terms = c.compute(obs)[0]
    assert np.array_equal(terms.ca, np.zeros(7))


# -- collision avoidance ---------------------------------------------------


def test_avoidance_pushes_apart(close_pair):
    cfg = ct.AvoidanceConfig(margin=0.25)
    obs = {r: make_obs(m, m.start_posture) for r, m in close_pair.items()}
    d0 = skeleton_min_distance(close_pair, obs, cfg)
    assert d0 < cfg.margin          # the scene is genuinely in conflict
    for r in (0, 1):
        c = ct.CartesianImpedance(close_pair, [r], avoidance=cfg)
        c.on_activate(obs)
        terms = c.compute(obs)[r]
        assert np.linalg.norm(terms.ca) > 0.0
        step = 2e-4 * terms.ca / np.linalg.norm(terms.ca)
        obs2 = {k: make_obs(close_pair[k], o.q) for k, o in obs.items()}
        obs2[r] = make_obs(close_pair[r], obs[r].q + step)
        assert skeleton_min_distance(close_pair, obs2, cfg) > d0


def test_avoidance_degenerate_overlap_flags_and_stays_finite(arm):
    models = {0: arm, 1: arm.with_base(np.eye(3), np.zeros(3))}
    cfg = ct.AvoidanceConfig()
    c = ct.CartesianImpedance(models, [0], avoidance=cfg)
    obs = {r: make_obs(m, m.start_posture) for r, m in models.items()}
    c.on_activate(obs)
    terms = c.compute(obs)[0]
    assert terms.flags & ct.FLAG_CA_DEGENERATE
    assert np.all(np.isfinite(terms.ca))


# -- coupled ---------------------------------------------------------------


@pytest.fixture
def facing_pair(arm):
    left = arm.with_base(rpy_matrix(0.0, 0.0, np.pi / 2),
                         np.array([0.0, -0.45, 0.0]))
    right = arm.with_base(rpy_matrix(0.0, 0.0, -np.pi / 2),
                          np.array([0.0, 0.45, 0.0]))
    return {0: left, 1: right}


def test_coupled_activation_holds_current_poses(facing_pair):
    c = ct.CoupledImpedance(facing_pair, [0, 1])
    obs = {r: make_obs(m, m.start_posture) for r, m in facing_pair.items()}
    c.on_activate(obs)
    for r, m in facing_pair.items():
        cs = dynamics.fk(m, m.start_posture)
        np.testing.assert_allclose(c.targets[r].position, cs.position, atol=1e-12)
        np.testing.assert_allclose(c.targets[r].rotation, cs.rotation, atol=1e-12)
    terms = c.compute(obs)
    for r in facing_pair:
        assert np.linalg.norm(terms[r].task) < 1e-8


def test_coupled_goal_moves_targets_rigidly(facing_pair, rng):
    c = ct.CoupledImpedance(facing_pair, [0, 1])
    obs = {r: make_obs(m, m.start_posture) for r, m in facing_pair.items()}
    c.on_activate(obs)
    p0 = {r: c.targets[r].position.copy() for r in facing_pair}
    rel0 = c.targets[0].rotation.T @ c.targets[1].rotation
    gap0 = np.linalg.norm(p0[0] - p0[1])

    shift = np.array([0.05, -0.02, 0.08])
    c.set_goal(c.goal_position + shift)
    for r in facing_pair:
        np.testing.assert_allclose(c.targets[r].position, p0[r] + shift, atol=1e-12)

    Rg = Rotation.from_rotvec([0.0, 0.0, 0.6]).as_matrix()
    c.set_goal(c.goal_position, Rg)
    rel1 = c.targets[0].rotation.T @ c.targets[1].rotation
    gap1 = np.linalg.norm(c.targets[0].position - c.targets[1].position)
    np.testing.assert_allclose(rel1, rel0, atol=1e-12)
    assert gap1 == pytest.approx(gap0, abs=1e-12)


def test_coupled_goal_twist_matches_position_rate(facing_pair):
    c = ct.CoupledImpedance(facing_pair, [0, 1])
    obs = {r: make_obs(m, m.start_posture) for r, m in facing_pair.items()}
    c.on_activate(obs)
    w = np.array([0.0, 0.0, 0.5])
    v = np.array([0.02, 0.0, 0.1])
    c.set_goal(c.goal_position, self_rotation := c.goal_rotation,
               twist=np.concatenate([v, w]))
    h = 1e-6
    p_before = {r: c.targets[r].position.copy() for r in facing_pair}
    tw = {r: c.targets[r].twist.copy() for r in facing_pair}
    Rg = Rotation.from_rotvec(w * h).as_matrix() @ self_rotation
    c.set_goal(c.goal_position + v * h, Rg)
    for r in facing_pair:
        rate = (c.targets[r].position - p_before[r]) / h
        np.testing.assert_allclose(tw[r][:3], rate, atol=1e-6)


def test_coupled_rejects_per_robot_targets(facing_pair):
    c = ct.CoupledImpedance(facing_pair, [0, 1])
    with pytest.raises(TypeError):
        c.set_target(0, None)


def test_coupled_wrench_feedforward(facing_pair):
    c = ct.CoupledImpedance(facing_pair, [0, 1], use_nullspace=False)
    obs = {r: make_obs(m, m.start_posture) for r, m in facing_pair.items()}
    c.on_activate(obs)
    base = c.compute(obs)
    w = np.array([0.0, 20.0, 0.0, 0.0, 0.0, 0.0])
    c.set_wrench(0, w)
    out = c.compute(obs)
    J = dynamics.jacobian(facing_pair[0], obs[0].q)
    np.testing.assert_allclose(out[0].task - base[0].task, J.T @ w, atol=1e-9)
    np.testing.assert_allclose(out[1].task, base[1].task, atol=1e-12)


# -- unified force ---------------------------------------------------------


def make_ufic(arm, **kw):
    c = ct.UnifiedForceImpedance({0: arm}, [0], use_nullspace=False, **kw)
    o = make_obs(arm, arm.start_posture)
    c.on_activate({0: o})
    return c, o


def test_force_channel_full_without_contact_when_tank_full(arm):
    c, o = make_ufic(arm)
    c.compute({0: o})
    scale, _ = c.force_channel(0)
    assert scale == 1.0


def test_contact_latch_and_hysteresis(arm):
    c, o = make_ufic(arm)
    touching = make_obs(arm, arm.start_posture, f_ee=[0.0, 0.0, 5.0, 0, 0, 0])
    terms = c.compute({0: touching})[0]
    assert terms.flags & ct.FLAG_CONTACT
    # gate is 1 at the latched point even if the tank were empty
    assert c.force_channel(0)[0] == 1.0
    holding = make_obs(arm, arm.start_posture, f_ee=[0.0, 0.0, 0.8, 0, 0, 0])
    terms = c.compute({0: holding})[0]
    assert terms.flags & ct.FLAG_CONTACT      # 0.8 N is above the release level
    lost = make_obs(arm, arm.start_posture)
    terms = c.compute({0: lost})[0]
    assert not (terms.flags & ct.FLAG_CONTACT)


def test_tank_drains_by_injected_power_and_floors(arm):
    # a hot proportional gain so the channel injects enough power to
    # reach the floor within the loop below
    c, o = make_ufic(arm, force_gains=ct.ForceGains(kp=200.0))
    fd = np.array([0.0, 0.0, -20.0, 0.0, 0.0, 0.0])
    c.targets[0].wrench = fd
    qd = dynamics.dynamics(arm, dynamics.JointState(
        q=arm.start_posture, qd=np.zeros(7), tau=np.zeros(7))).J_pinv @ \
        np.array([0.0, 0.0, -0.2, 0.0, 0.0, 0.0])
    moving = make_obs(arm, arm.start_posture, qd)
    J = dynamics.jacobian(arm, arm.start_posture)
    xd = J @ qd

    e_before = c.tank_levels(0)[0]
    c.compute({0: moving})
    _, F = c.force_channel(0)
    drained = c.dt * max(0.0, float(F @ xd))
    assert drained > 0.0
    assert c.tank_levels(0)[0] == pytest.approx(e_before - drained, rel=1e-12)

    levels = []
    for _ in range(400):
        c.compute({0: moving})
        levels.append(c.tank_levels(0)[0])
    levels = np.array(levels)
    assert np.all(np.diff(levels) <= 1e-12)
    assert np.all(levels >= c.tank.floor)
    # the activation ramp turns the last joules into an exponential tail
    assert levels[-1] == pytest.approx(c.tank.floor, abs=1e-6)


def test_drained_tank_without_contact_kills_channel_exactly(arm):
    c, o = make_ufic(arm)
    c._fs[0].e_force = c.tank.floor
    c._fs[0].e_shape = c.tank.floor
    c.targets[0].wrench = np.array([0.0, 0.0, -20.0, 0.0, 0.0, 0.0])
    terms = c.compute({0: o})[0]
    scale, F = c.force_channel(0)
    assert scale == 0.0
    assert np.all(F == 0.0)
    assert terms.flags & ct.FLAG_TANK_FORCE_EMPTY
    assert terms.flags & ct.FLAG_TANK_SHAPE_EMPTY
    # with the pose held and no motion the whole command is velocity comp
    assert np.array_equal(terms.cmd, terms.cor)


def test_stationary_pressing_does_not_drain(arm):
    c, o = make_ufic(arm)
    c.targets[0].wrench = np.array([0.0, 0.0, -20.0, 0.0, 0.0, 0.0])
    before = c.tank_levels(0)
    for _ in range(50):
        c.compute({0: o})       # qd = 0: no power leaves the tank
    assert c.tank_levels(0) == before


def test_tank_bounds_under_random_excitation(arm, rng):
    c, o = make_ufic(arm)
    c.targets[0].wrench = np.array([0.0, 0.0, -15.0, 0.0, 0.0, 0.0])
    for _ in range(300):
        q = arm.start_posture + 0.05 * rng.normal(size=7)
        qd = 0.5 * rng.normal(size=7)
        f = np.zeros(6)
        f[2] = max(0.0, rng.normal(5.0, 4.0))
        c.compute({0: make_obs(arm, q, qd, f)})
        ef, es = c.tank_levels(0)
        assert c.tank.floor <= ef <= c.tank.capacity
        assert c.tank.floor <= es <= c.tank.capacity


def test_integral_clamps(arm):
    c, o = make_ufic(arm, force_gains=ct.ForceGains(ki=100.0))
    c.targets[0].wrench = np.array([0.0, 0.0, -40.0, 0.0, 0.0, 0.0])
    for _ in range(3000):
        c.compute({0: o})
    assert np.all(np.abs(c._fs[0].integral) <= c.force_gains.integral_limit)
