import numpy as np
import pytest

from splatshape import splats as rn
from splatshape import so3
from splatshape.geom import SE3, Camera
from splatshape.splats import SplatSet


def make_cam(width=8, height=8, focal=None):
    return Camera(
        SE3.identity(),
        focal=focal or float(width) * 1.5,
        principal_point=np.array([width / 2.0, height / 2.0]),
        width=width,
        height=height,
    )


def random_scene(rng, n_splats, cam, depth_range=(1.5, 3.5)):
    """Splats whose means project inside the frame with well-separated depths."""
    z = np.sort(rng.uniform(*depth_range, size=n_splats))
    for i in range(1, n_splats):
        z[i] = max(z[i], z[i - 1] + 0.05)
    # pick pixel targets inside the frame with margin, unproject at depth z
    px = rng.uniform(2.0, cam.width - 2.0, size=n_splats)
    py = rng.uniform(2.0, cam.height - 2.0, size=n_splats)
    x = (px - cam.principal_point[0]) / cam.focal * z
    y = (py - cam.principal_point[1]) / cam.focal * z
    pos = np.stack([x, y, z], axis=-1)
    quats = so3.quat_normalize(rng.normal(size=(n_splats, 4)))
    world_per_px = z.mean() / cam.focal
    log_s = np.log(rng.uniform(0.8, 2.5, size=(n_splats, 3)) * world_per_px)
    colors = rng.uniform(0.1, 0.9, size=(n_splats, 3))
    return SplatSet(pos, quats, log_s, colors)


def loss_of(splats, cam, gimg):
    return float(np.sum(gimg * rn.render(splats, cam)))


def fd_grads(splats, cam, gimg, h=1e-4):
    out = []
    for name in ("positions", "quats", "log_scales", "colors"):
        arr = getattr(splats, name)
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_of(splats, cam, gimg)
            flat[i] = old - h
            fm = loss_of(splats, cam, gimg)
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_err(a, f):
    scale = max(np.abs(f).max(), 1e-6)
    return np.abs(a - f).max() / scale


# ---------------------------------------------------------------------------
# projection


def test_project_on_axis_isotropic():
    cam = make_cam(64, 64, focal=100.0)
    sigma = 0.05
    sp = rn.project_splat(cam, [0, 0, 1.0], so3.IDENTITY_QUAT, np.log([sigma] * 3))
    assert sp is not None
    np.testing.assert_allclose(sp.mean, [32, 32], atol=1e-9)
    expect = (100.0 * sigma) ** 2 * np.eye(2) + rn.COV_DILATION * np.eye(2)
    np.testing.assert_allclose(sp.cov2d, expect, atol=1e-9)
    assert sp.depth == 1.0


def test_project_depth_scaling():
    cam = make_cam(64, 64, focal=100.0)
    sigma = 0.05
    s1 = rn.project_splat(cam, [0, 0, 1.0], so3.IDENTITY_QUAT, np.log([sigma] * 3))
    s2 = rn.project_splat(cam, [0, 0, 2.0], so3.IDENTITY_QUAT, np.log([sigma] * 3))
    c1 = s1.cov2d - rn.COV_DILATION * np.eye(2)
    c2 = s2.cov2d - rn.COV_DILATION * np.eye(2)
    np.testing.assert_allclose(c2, c1 / 4.0, atol=1e-9)


def test_project_behind_culled():
    cam = make_cam()
    assert rn.project_splat(cam, [0, 0, -1.0], so3.IDENTITY_QUAT, np.log([0.1] * 3)) is None


def test_cov2d_eigenvalue_floor():
    rng = np.random.default_rng(7)
    cam = make_cam(64, 64)
    for _ in range(20):
        sp = rn.project_splat(
            cam, [rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(1, 3)],
            so3.quat_normalize(rng.normal(size=4)), rng.uniform(-6, -1, size=3),
        )
        if sp is None:
            continue
        assert np.linalg.eigvalsh(sp.cov2d).min() >= rn.COV_DILATION - 1e-12


# ---------------------------------------------------------------------------
# forward compositing


def test_empty_scene_transparent():
    cam = make_cam()
    img = rn.render(SplatSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3))), cam)
    assert np.array_equal(img, np.zeros((8, 8, 4)))


def test_single_opaque_splat_center():
    cam = make_cam(9, 9, focal=10.0)
    big = SplatSet(
        np.array([[0.0, 0.0, 1.0]]), so3.IDENTITY_QUAT[None],
        np.log([[2.0, 2.0, 2.0]]), np.array([[1.0, 0.0, 0.0]]),
    )
    img = rn.render(big, cam)
    ctr = img[4, 4]
    np.testing.assert_allclose(ctr, [0.99, 0, 0, 0.99], atol=1e-6)


def test_two_splat_compositing_recurrence():
    # red in front of blue, both alpha-clamped at the center pixel:
    # C = 0.99*red + 0.01*0.99*blue, A = 0.99 + 0.01*0.99
    cam = make_cam(9, 9, focal=10.0)
    ss = SplatSet(
        np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]),
        np.tile(so3.IDENTITY_QUAT, (2, 1)),
        np.log(np.full((2, 3), 3.0)),
        np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
    )
    img = rn.render(ss, cam)
    ctr = img[4, 4]
    np.testing.assert_allclose(ctr[0], 0.99, atol=1e-9)
    np.testing.assert_allclose(ctr[2], 0.01 * 0.99, atol=1e-9)
    np.testing.assert_allclose(ctr[3], 0.99 + 0.01 * 0.99, atol=1e-9)


def test_tiled_matches_reference():
    rng = np.random.default_rng(0)
    for size in ((8, 8), (33, 17), (64, 64)):
        cam = make_cam(size[1], size[0])
        ss = random_scene(rng, 12, cam)
        a = rn.render(ss, cam)
        b = rn.render_reference(ss, cam)
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_determinism_bit_identical():
    rng = np.random.default_rng(1)
    cam = make_cam(32, 32)
    ss = random_scene(rng, 20, cam)
    a = rn.render(ss, cam)
    b = rn.render(ss.copy(), cam)
    assert np.array_equal(a, b)


def test_alpha_monotone_in_splat_count():
    rng = np.random.default_rng(2)
    cam = make_cam(16, 16)
    ss = random_scene(rng, 8, cam)
    prev = np.zeros((16, 16))
    for n in range(1, 9):
        sub = SplatSet(ss.positions[:n], ss.quats[:n], ss.log_scales[:n], ss.colors[:n])
        alpha = rn.render(sub, cam)[..., 3]
        assert (alpha >= prev - 1e-12).all()
        prev = alpha


def test_translation_equivariance():
    rng = np.random.default_rng(3)
    cam = make_cam(16, 16)
    ss = random_scene(rng, 6, cam)
    delta = np.array([0.3, -0.2, 0.15])
    img0 = rn.render(ss, cam)
    moved = ss.replace(positions=ss.positions + delta)
    cam2 = Camera(
        SE3(cam.pose.rotation, cam.pose.translation - so3.quat_to_mat(cam.pose.rotation) @ delta),
        cam.focal, cam.principal_point, cam.width, cam.height,
    )
    img1 = rn.render(moved, cam2)
    np.testing.assert_allclose(img0, img1, atol=1e-6)


# ---------------------------------------------------------------------------
# backward


def test_backward_zero_upstream():
    rng = np.random.default_rng(4)
    cam = make_cam()
    ss = random_scene(rng, 4, cam)
    grads = rn.render_backward(ss, cam, np.zeros((8, 8, 4)))
    for g in grads:
        assert np.array_equal(g, np.zeros_like(g))


def test_backward_culled_zero():
    cam = make_cam()
    ss = SplatSet(
        np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -5.0]]),
        np.tile(so3.IDENTITY_QUAT, (2, 1)),
        np.log(np.full((2, 3), 0.3)),
        np.full((2, 3), 0.5),
    )
    gx, gq, gls, gc = rn.render_backward(ss, cam, np.ones((8, 8, 4)))
    assert not gx[1].any() and not gc[1].any() and not gq[1].any() and not gls[1].any()
    assert np.abs(gc[0]).sum() > 0


def test_color_gradient_closed_form():
    # single splat: dL/dc = sum_px alpha*T*g, with T=1 for the only splat
    rng = np.random.default_rng(5)
    cam = make_cam(16, 16)
    ss = random_scene(rng, 1, cam)
    gimg = np.zeros((16, 16, 4))
    gimg[..., 0] = rng.normal(size=(16, 16))
    _, _, _, gc = rn.render_backward(ss, cam, gimg)
    alpha = rn.render(ss, cam)[..., 3]
    np.testing.assert_allclose(gc[0, 0], np.sum(alpha * gimg[..., 0]), rtol=1e-9)
    np.testing.assert_allclose(gc[0, 1:], 0, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_backward_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    cam = make_cam(8, 8)
    ss = random_scene(rng, int(rng.integers(1, 6)), cam)
    gimg = rng.normal(size=(8, 8, 4))
    an = rn.render_backward(ss, cam, gimg)
    fd = fd_grads(ss, cam, gimg)
    for a, f, name in zip(an, fd, ("x", "q", "ls", "c")):
        assert max_rel_err(a, f) < 1e-3, f"{name}: {max_rel_err(a, f)}"
