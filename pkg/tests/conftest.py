import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from torquemux import model as model_mod


@pytest.fixture(scope="session")
def arm():
    return model_mod.builtin()


@pytest.fixture()
def rng():
    return np.random.default_rng(20260822)


def random_configs(arm, rng, count, margin=0.1):
    """Configurations drawn uniformly inside the position limits."""
    lo = arm.q_lower + margin
    hi = arm.q_upper - margin
    return rng.uniform(lo, hi, size=(count, arm.n))


@pytest.fixture(scope="session")
def single_joint():
    """One z-axis revolute joint with a unit link along +x."""
    return model_mod.RobotModel(
        name="one", version=1,
        axis=np.array([[0.0, 0.0, 1.0]]),
        R_fix=np.eye(3)[None, :, :],
        t_fix=np.zeros((1, 3)),
        ee_R=np.eye(3), ee_t=np.array([1.0, 0.0, 0.0]),
        mass=np.array([2.0]), com=np.array([[0.5, 0.0, 0.0]]),
        inertia=np.array([np.diag([0.001, 0.17, 0.17])]),
        q_lower=np.array([-3.0]), q_upper=np.array([3.0]),
        qd_limit=np.array([5.0]), tau_limit=np.array([50.0]),
        gravity=np.array([0.0, 0.0, -9.81]),
        start_posture=np.array([0.0]))


@pytest.fixture(scope="session")
def planar_two_link():
    """Two z-axis joints, links of length 0.8 and 0.6 along +x, gravity in
    -y so the motion plane is vertical."""
    return model_mod.RobotModel(
        name="planar2", version=1,
        axis=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]),
        R_fix=np.stack([np.eye(3), np.eye(3)]),
        t_fix=np.array([[0.0, 0.0, 0.0], [0.8, 0.0, 0.0]]),
        ee_R=np.eye(3), ee_t=np.array([0.6, 0.0, 0.0]),
        mass=np.array([1.5, 1.0]),
        com=np.array([[0.4, 0.0, 0.0], [0.3, 0.0, 0.0]]),
        inertia=np.stack([np.diag([0.001, 0.08, 0.08]),
                          np.diag([0.001, 0.03, 0.03])]),
        q_lower=np.array([-3.1, -3.1]), q_upper=np.array([3.1, 3.1]),
        qd_limit=np.array([10.0, 10.0]), tau_limit=np.array([100.0, 100.0]),
        gravity=np.array([0.0, -9.81, 0.0]),
        start_posture=np.array([0.3, 0.5]))
