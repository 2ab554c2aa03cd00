import numpy as np
import pytest

from torquemux import kvdoc, model


def test_builtin_loads(arm):
    assert arm.n == 7
    assert arm.name == "arm7"
    assert arm.version == 1
    np.testing.assert_allclose(arm.gravity, [0, 0, -9.81])
    assert arm.mass.sum() == pytest.approx(19.0)


def test_first_moment_and_origin_inertia_derived(arm):
    np.testing.assert_allclose(arm.h_loc, arm.mass[:, None] * arm.com, atol=0)
    for i in range(arm.n):
        c = arm.com[i]
        expected = arm.inertia[i] + arm.mass[i] * (c @ c * np.eye(3) - np.outer(c, c))
        np.testing.assert_allclose(arm.L_loc[i], expected, atol=0)


def _patch_builtin(old: str, new: str) -> str:
    import importlib.resources
    text = importlib.resources.files("torquemux.data").joinpath("arm7.model").read_text()
    assert old in text
    return text.replace(old, new)


def test_non_unit_axis_rejected_with_line():
    bad = _patch_builtin("axis: 0 1 0\n    q_min: -2.2", "axis: 0 1 0.1\n    q_min: -2.2")
    with pytest.raises(kvdoc.DocError, match=r"line \d+.*unit vector"):
        model.loads(bad)


def test_inertia_triangle_violation_rejected_with_line():
    bad = _patch_builtin("inertia: 0.011 0.011 0.020 0 0 0",
                         "inertia: 0.050 0.011 0.020 0 0 0")
    with pytest.raises(kvdoc.DocError, match=r"line \d+.*triangle"):
        model.loads(bad)


def test_negative_mass_rejected():
    bad = _patch_builtin("mass: 0.9", "mass: -0.9")
    with pytest.raises(kvdoc.DocError, match="mass must be positive"):
        model.loads(bad)


def test_inverted_position_limits_rejected():
    bad = _patch_builtin("q_min: -2.6\n    q_max: 2.6\n    qd_max: 2.5",
                         "q_min: 2.6\n    q_max: -2.6\n    qd_max: 2.5")
    with pytest.raises(kvdoc.DocError, match="q_min must be below q_max"):
        model.loads(bad)


def test_unknown_key_rejected():
    bad = _patch_builtin("mass: 0.9", "mass: 0.9\n    colour: red")
    with pytest.raises(kvdoc.DocError, match="unknown key"):
        model.loads(bad)


def test_link_count_mismatch_rejected():
    bad = _patch_builtin("""  l7:
    mass: 0.9
    com: 0 0 0.05
    inertia: 0.011 0.011 0.020 0 0 0
""", "")
    with pytest.raises(kvdoc.DocError, match="7 joints but 6 links"):
        model.loads(bad)


def test_dumps_load_round_trip(arm):
    again = model.loads(arm.dumps())
    for attr in ("axis", "R_fix", "t_fix", "ee_R", "ee_t", "mass", "com",
                 "inertia", "q_lower", "q_upper", "qd_limit", "tau_limit",
                 "gravity", "start_posture"):
        np.testing.assert_allclose(getattr(again, attr), getattr(arm, attr),
                                   atol=1e-12, err_msg=attr)


def test_round_trip_with_rotated_fixed_frames(planar_two_link):
    from torquemux.geometry import rpy_matrix
    rotated = planar_two_link._replace(
        R_fix=np.stack([rpy_matrix(0.3, -0.4, 1.1), rpy_matrix(-1.2, 0.2, 0.5)]))
    again = model.loads(rotated.dumps())
    np.testing.assert_allclose(again.R_fix, rotated.R_fix, atol=1e-12)


def test_with_inertials_validates():
    m = model.builtin()
    bad_inertia = m.inertia.copy()
    bad_inertia[2] = np.diag([0.05, 0.001, 0.001])   # violates triangle
    with pytest.raises(ValueError, match="triangle"):
        m.with_inertials(m.mass, m.com, bad_inertia)


def test_with_inertials_keeps_kinematics(arm):
    scaled = arm.with_inertials(arm.mass * 1.2, arm.com, arm.inertia)
    np.testing.assert_array_equal(scaled.t_fix, arm.t_fix)
    assert scaled.mass[0] == pytest.approx(arm.mass[0] * 1.2)
    np.testing.assert_allclose(scaled.h_loc, 1.2 * arm.h_loc, atol=1e-15)


def test_start_posture_inside_limits(arm):
    assert np.all(arm.start_posture >= arm.q_lower)
    assert np.all(arm.start_posture <= arm.q_upper)


def test_save_and_load_file(tmp_path, arm):
    path = tmp_path / "copy.model"
    arm.save(path)
    again = model.load(path)
    np.testing.assert_allclose(again.mass, arm.mass, atol=0)
