import io

import numpy as np
import pytest

from torquemux import controllets as ct
from torquemux import dynamics
from torquemux.dynamics import Observation
from torquemux.manager import ControlEndpoint, Manager, RobotBus


def obs_at(m, q, qd=None, t=0.0):
    return Observation(q=np.asarray(q, dtype=np.float64),
                       qd=np.zeros(m.n) if qd is None else np.asarray(qd),
                       tau=np.zeros(m.n), f_ee=np.zeros(6), t=t)


@pytest.fixture
def cell(arm):
    return {0: arm, 1: arm.with_base(np.eye(3), np.array([3.0, 0.0, 0.0]))}


def rest_obs(cell, t=0.0):
    return {r: obs_at(m, m.start_posture, t=t) for r, m in cell.items()}


def test_every_robot_stamped_every_tick(cell):
    mgr = Manager(cell)
    mgr.install(mgr.build("cartesian_impedance", (0,)))
    for i in range(20):
        out = mgr.tick(rest_obs(cell, t=i * mgr.dt))
        assert set(out) == {0, 1}
        for r in cell:
            assert mgr.bus.cmd_stamp[r] == i
        assert out[1].flags & ct.FLAG_HOLD
        assert np.all(out[1].cmd == 0.0)
    assert mgr.bus.growth_events == 0


def test_install_activates_at_first_boundary(cell):
    mgr = Manager(cell)
    rec = mgr.install(mgr.build("joint_impedance", (0, 1)))
    assert rec.status == "pending"
    mgr.tick(rest_obs(cell))
    assert rec.status == "active"
    assert rec.activation_tick == 0
    assert rec.latency_ticks == 1


def test_switch_latency_one_tick_in_virtual_time(cell):
    mgr = Manager(cell)
    mgr.install(mgr.build("cartesian_impedance", (0,)))
    for i in range(4):
        mgr.tick(rest_obs(cell))
    rec = mgr.request_switch(mgr.build("joint_impedance", (0,)),
                             request_time=3.3 * mgr.dt)
    out = mgr.tick(rest_obs(cell))          # boundary at t = 4 dt
    assert rec.status == "active"
    assert rec.activation_tick == 4
    assert rec.latency_ticks == 1
    assert rec.latency_s == pytest.approx(5 * mgr.dt - 3.3 * mgr.dt)
    assert mgr.dt < rec.latency_s <= 2 * mgr.dt
    assert mgr.owner[0].kind == "joint_impedance"
    assert not (out[0].flags & ct.FLAG_HOLD)


def test_request_on_boundary_waits_for_next(cell):
    mgr = Manager(cell)
    for i in range(3):
        mgr.tick(rest_obs(cell))
    rec = mgr.request_switch(mgr.build("cartesian_impedance", (0,)),
                             request_time=3 * mgr.dt)
    mgr.tick(rest_obs(cell))                # boundary t = 3 dt: not strictly after
    assert rec.status == "pending"
    mgr.tick(rest_obs(cell))                # boundary t = 4 dt
    assert rec.status == "active"
    assert rec.latency_ticks == 1
    assert rec.latency_s == pytest.approx(2 * mgr.dt)


def test_takeover_evicts_whole_previous_owner(cell):
    mgr = Manager(cell)
    both = mgr.build("joint_impedance", (0, 1))
    first = mgr.install(both)
    mgr.tick(rest_obs(cell))
    second = mgr.request_switch(mgr.build("cartesian_impedance", (0,)))
    out = mgr.tick(rest_obs(cell))
    assert first.status == "replaced"
    assert second.status == "active"
    assert mgr.owner[0].kind == "cartesian_impedance"
    # robot 1 lost its owner with the eviction and falls back to the hold
    assert 1 not in mgr.owner
    assert out[1].flags & ct.FLAG_HOLD


def test_stop_releases_robots(cell):
    mgr = Manager(cell)
    rec = mgr.install(mgr.build("cartesian_impedance", (0,)))
    mgr.tick(rest_obs(cell))
    mgr.request_stop((0,))
    out = mgr.tick(rest_obs(cell))
    assert rec.status == "stopped"
    assert out[0].flags & ct.FLAG_HOLD
    assert 0 not in mgr.owner


def test_fault_falls_back_same_tick(cell):
    mgr = Manager(cell)
    c = mgr.build("joint_impedance", (0,))
    rec = mgr.install(c)
    mgr.tick(rest_obs(cell))
    c.targets[0].q = np.full(7, np.nan)     # poison: command goes non-finite
    out = mgr.tick(rest_obs(cell))
    assert rec.status == "faulted"
    assert "non-finite" in rec.fault
    assert out[0].flags & ct.FLAG_FAULT
    assert np.all(out[0].cmd == 0.0)
    # the manager keeps running; the robot is plainly held afterwards
    out = mgr.tick(rest_obs(cell))
    assert out[0].flags & ct.FLAG_HOLD
    assert mgr.bus.cmd_stamp[0] == mgr.tick_index - 1


def test_at_rest_command_through_manager_is_velocity_compensation(cell, arm):
    mgr = Manager(cell)
    mgr.install(mgr.build(
        "cartesian_impedance", (0,),
        nullspace=ct.NullspaceGains(posture=arm.start_posture)))
    out = mgr.tick(rest_obs(cell))
    cor = dynamics.coriolis_torque(arm, arm.start_posture, np.zeros(7))
    assert np.array_equal(out[0].cmd, cor)


def test_bus_growth_counter(cell):
    bus = RobotBus(cell)
    m = cell[0]
    bus.publish(0, obs_at(m, m.start_posture))
    assert bus.growth_events == 0
    bad = Observation(q=np.zeros(9), qd=np.zeros(7), tau=np.zeros(7),
                      f_ee=np.zeros(6), t=0.0)
    bus.publish(0, bad)
    assert bus.growth_events == 1


def test_endpoint_script(cell):
    mgr = Manager(cell)
    script = io.StringIO(
        "# bring up both arms\n"
        "switch joint_impedance 0,1\n"
        "status\n"
        "switch cartesian_impedance 0 use_nullspace=false\n"
        "stop 1\n"
        "switch nosuchkind 0\n"
        "switch cartesian_impedance zero\n"
        "status\n")
    ep = ControlEndpoint(mgr)
    replies = ep.serve(script)
    assert replies[0] == "ok ticket=0"
    assert replies[1].startswith("ok tick=0 0:hold 1:hold")
    assert replies[2] == "ok ticket=1"
    assert replies[3] == "ok ticket=2"
    assert replies[4].startswith("err unknown kind")
    assert replies[5].startswith("err")
    mgr.tick(rest_obs(cell))
    mgr.tick(rest_obs(cell))
    assert mgr.owner[0].kind == "cartesian_impedance"
    assert mgr.owner[0].use_nullspace is False
    assert 1 not in mgr.owner


def test_endpoint_rejects_malformed_parameter(cell):
    ep = ControlEndpoint(Manager(cell))
    assert ep.handle_line("switch joint_impedance 0 gains").startswith("err")
    assert ep.handle_line("") == ""
    assert ep.handle_line("bogus 1 2").startswith("err")
