import numpy as np
import pytest
from scipy.spatial import cKDTree

from splatshape import rig as rg
from splatshape import so3
from splatshape.geom import SE3
from splatshape.splats import SplatSet


def splats_at(points, log_scale=-2.0, quats=None):
    n = len(points)
    return SplatSet(
        np.asarray(points, dtype=float),
        np.tile(so3.IDENTITY_QUAT, (n, 1)) if quats is None else quats,
        np.full((n, 3), log_scale),
        np.full((n, 3), 0.5),
    )


def se3_arrays(transforms):
    q = np.stack([t.rotation for t in transforms])
    t = np.stack([t.translation for t in transforms])
    return q, t


# ---------------------------------------------------------------------------
# control point selection


def test_select_k_equals_n():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 3))
    ss = splats_at(pts)
    ctrl = rg.select_control_points(ss, 20, seed=1)
    assert np.array_equal(np.sort(ctrl, axis=0), np.sort(pts, axis=0))


def test_select_k1_centroid():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float)
    ctrl = rg.select_control_points(splats_at(pts), 1, seed=0)
    np.testing.assert_allclose(ctrl[0], [0, 0, 0], atol=1e-12)


def test_select_k_too_large():
    with pytest.raises(ValueError):
        rg.select_control_points(splats_at(np.zeros((3, 3))), 5)


def test_select_covering_radius_on_grid():
    # 10x10x10 unit grid, K=8: expected cell radius for 8 uniform cells of a
    # cube with side 9 is half the cell diagonal
    g = np.linspace(0, 9, 10)
    pts = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
    ctrl = rg.select_control_points(splats_at(pts), 8, seed=3)
    d, _ = cKDTree(ctrl).query(pts)
    cell_radius = np.linalg.norm([9 / 4, 9 / 4, 9 / 4])  # half diagonal of a 4.5-cube
    assert d.max() <= 1.5 * cell_radius


def test_select_deterministic():
    rng = np.random.default_rng(5)
    ss = splats_at(rng.normal(size=(60, 3)))
    a = rg.select_control_points(ss, 12, seed=7)
    b = rg.select_control_points(ss, 12, seed=7)
    assert np.array_equal(a, b)
    c = rg.select_control_points(ss, 12, seed=8, method="fps")
    assert c.shape == (12, 3)


# ---------------------------------------------------------------------------
# blend weights


def test_weight_coincident_control_dominates():
    ss = splats_at([[0.0, 0.0, 0.0]])
    controls = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    r = rg.compute_blend_weights(ss, controls, m=2)
    w = r.weights[0][r.neighbor_idx[0].tolist().index(0)]
    assert w > 0.999


def test_weight_symmetric_pair():
    ss = splats_at([[0.0, 0.0, 0.0]])
    controls = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    r = rg.compute_blend_weights(ss, controls, m=2)
    np.testing.assert_allclose(r.weights[0], [0.5, 0.5], atol=1e-9)


def test_weight_anisotropic_prefers_stretched_axis():
    # splat stretched 2:1 along x; controls equidistant in euclidean terms
    ss = SplatSet(
        np.zeros((1, 3)),
        so3.IDENTITY_QUAT[None],
        np.log(np.array([[0.2, 0.1, 0.1]])),
        np.full((1, 3), 0.5),
    )
    controls = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    r = rg.compute_blend_weights(ss, controls, m=2)
    # mahalanobis d to A = 1/0.2 = 5, to B = 1/0.1 = 10 -> weights 2:1
    wa = r.weights[0][r.neighbor_idx[0].tolist().index(0)]
    wb = r.weights[0][r.neighbor_idx[0].tolist().index(1)]
    assert wa > wb
    np.testing.assert_allclose(wa / wb, 2.0, rtol=1e-6)


def test_weights_sum_to_one():
    rng = np.random.default_rng(1)
    ss = splats_at(rng.normal(size=(40, 3)))
    ctrl = rg.select_control_points(ss, 10, seed=0)
    r = rg.compute_blend_weights(ss, ctrl, m=5)
    np.testing.assert_allclose(r.weights.sum(axis=1), 1.0, atol=1e-6)
    assert (r.neighbor_idx < 10).all()


# ---------------------------------------------------------------------------
# LBS


def identity_transforms(k):
    return np.tile(so3.IDENTITY_QUAT, (k, 1)), np.zeros((k, 3))


def test_lbs_identity_exact():
    rng = np.random.default_rng(2)
    ss = splats_at(rng.normal(size=(30, 3)))
    ctrl = rg.select_control_points(ss, 6, seed=0)
    r = rg.compute_blend_weights(ss, ctrl, m=3)
    q, t = identity_transforms(6)
    out = rg.lbs_deform(ss.positions, r, q, t)
    assert np.array_equal(out, ss.positions)


def test_lbs_single_neighbor_translation():
    r = rg.ControlRig(np.zeros((1, 3)), np.array([[0]], dtype=np.int32), np.ones((1, 1)))
    q, t = identity_transforms(1)
    t[0] = [1, 0, 0]
    out = rg.lbs_deform(np.zeros((1, 3)), r, q, t)
    np.testing.assert_allclose(out, [[1, 0, 0]])


def test_lbs_two_neighbor_translation_blend():
    r = rg.ControlRig(np.zeros((2, 3)), np.array([[0, 1]], dtype=np.int32), np.array([[0.5, 0.5]]))
    q, t = identity_transforms(2)
    t[0] = [1, 0, 0]
    t[1] = [0, 1, 0]
    out = rg.lbs_deform(np.zeros((1, 3)), r, q, t)
    np.testing.assert_allclose(out, [[0.5, 0.5, 0]])


def test_lbs_rigid_invariance():
    rng = np.random.default_rng(3)
    ss = splats_at(rng.normal(size=(25, 3)))
    ctrl = rg.select_control_points(ss, 8, seed=0)
    r = rg.compute_blend_weights(ss, ctrl, m=4)
    T = SE3(so3.quat_normalize(rng.normal(size=4)), rng.normal(size=3))
    q = np.tile(T.rotation, (8, 1))
    t = np.tile(T.translation, (8, 1))
    out = rg.lbs_deform(ss.positions, r, q, t)
    np.testing.assert_allclose(out, T.apply(ss.positions), atol=1e-9)


def test_lbs_locality():
    rng = np.random.default_rng(4)
    ss = splats_at(rng.normal(size=(40, 3)))
    ctrl = rg.select_control_points(ss, 10, seed=0)
    r = rg.compute_blend_weights(ss, ctrl, m=3)
    q, t = identity_transforms(10)
    t2 = t.copy()
    t2[4] = [0.5, 0, 0]
    out = rg.lbs_deform(ss.positions, r, q, t2)
    moved = np.abs(out - ss.positions).sum(axis=1) > 0
    has_neighbor = (r.neighbor_idx == 4).any(axis=1)
    assert (moved == has_neighbor).all()


def test_rotation_blend_identity():
    rng = np.random.default_rng(5)
    rest = so3.quat_normalize(rng.normal(size=(12, 4)))
    r = rg.ControlRig(np.zeros((3, 3)), rng.integers(0, 3, size=(12, 2)).astype(np.int32),
                      np.full((12, 2), 0.5))
    q, _ = identity_transforms(3)
    out = rg.lbs_rotation_blend(r, q, rest)
    assert np.array_equal(out, rest)


def test_rotation_blend_single_neighbor():
    rest = so3.IDENTITY_QUAT[None]
    r = rg.ControlRig(np.zeros((1, 3)), np.array([[0]], dtype=np.int32), np.ones((1, 1)))
    q = so3.axis_angle_to_quat(np.array([[0, 0, np.pi / 2]]))
    out = rg.lbs_rotation_blend(r, q, rest)
    np.testing.assert_allclose(so3.quat_rotate(out, np.array([[1.0, 0, 0]])), [[0, 1, 0]], atol=1e-12)


def test_rotation_blend_symmetric_cancels():
    rest = so3.IDENTITY_QUAT[None]
    r = rg.ControlRig(np.zeros((2, 3)), np.array([[0, 1]], dtype=np.int32), np.array([[0.5, 0.5]]))
    q = so3.axis_angle_to_quat(np.array([[0, 0, np.deg2rad(30)], [0, 0, -np.deg2rad(30)]]))
    out = rg.lbs_rotation_blend(r, q, rest)
    assert so3.quat_angle(out[0]) < 1e-6


def test_per_splat_rig():
    rng = np.random.default_rng(6)
    ss = splats_at(rng.normal(size=(7, 3)))
    r = rg.per_splat_rig(ss)
    assert r.n_controls == 7 and r.n_neighbors == 1
    q, t = identity_transforms(7)
    t[3] = [0, 0, 1]
    out = rg.lbs_deform(ss.positions, r, q, t)
    np.testing.assert_allclose(out[3], ss.positions[3] + [0, 0, 1])
    assert np.array_equal(out[:3], ss.positions[:3])


def test_rig_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    ss = splats_at(rng.normal(size=(30, 3)))
    ctrl = rg.select_control_points(ss, 9, seed=0)
    r = rg.compute_blend_weights(ss, ctrl, m=4)
    p = tmp_path / "rig.bin"
    rg.save_rig(p, r)
    r2 = rg.load_rig(p)
    assert np.array_equal(r.control_points, r2.control_points)
    assert np.array_equal(r.neighbor_idx, r2.neighbor_idx)
    assert np.array_equal(r.weights, r2.weights)
