"""Differentiable forward rasterization of 3D Gaussian splats.

Splats carry position, orientation, log-scale and RGB color; opacity is a
fixed constant 1.0 and there are no spherical harmonics. The forward pass is
the standard EWA pipeline: 3D covariance R diag(s^2) R^T pushed through the
perspective Jacobian, +0.3 px^2 dilation, depth-sorted front-to-back alpha
compositing with the per-splat alpha clamped at 0.99. The backward pass
returns analytic gradients for every splat attribute and is checked against
central finite differences.

Two execution paths share identical semantics:
  * a tiled numba path (16x16 tiles, serial and therefore deterministic)
  * a dense numpy reference path kept for oracle testing

Contributions with exp(-0.5 d^T conic d) < G_MIN are dropped and compositing
stops once transmittance falls below T_MIN; both constants are 1e-12 so the
induced discontinuities sit far below test tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import so3
from .geom import Camera, NEAR_PLANE, TriMesh

OPACITY = 1.0
ALPHA_MAX = 0.99
COV_DILATION = 0.3
G_MIN = 1e-12
LOG_G_MIN = np.log(G_MIN)
T_MIN = 1e-12
TILE = 16
_CULL_SIGMA = 3.0
_RASTER_RADIUS = np.sqrt(-2.0 * LOG_G_MIN)  # extent of the {G >= G_MIN} ellipse


@dataclass
class SplatSet:
    """Canonical 3D Gaussians. Scales are stored as log-scale."""

    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        self.quats = np.ascontiguousarray(self.quats, dtype=float)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=float)
        self.colors = np.ascontiguousarray(self.colors, dtype=float)

    def __len__(self):
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "SplatSet":
        return SplatSet(self.positions.copy(), self.quats.copy(), self.log_scales.copy(), self.colors.copy())

    def replace(self, **kw) -> "SplatSet":
        d = dict(positions=self.positions, quats=self.quats, log_scales=self.log_scales, colors=self.colors)
        d.update(kw)
        return SplatSet(**d)

    @staticmethod
    def from_mesh(mesh: TriMesh, scale_factor: float = 0.5) -> "SplatSet":
        """Clone one isotropic splat per mesh vertex (positions and colors copied)."""
        n = len(mesh.vertices)
        edge = np.zeros(n)
        cnt = np.zeros(n)
        v, f = mesh.vertices, mesh.faces
        for a, b in ((0, 1), (1, 2), (2, 0)):
            ln = np.linalg.norm(v[f[:, a]] - v[f[:, b]], axis=1)
            np.add.at(edge, f[:, a], ln)
            np.add.at(cnt, f[:, a], 1.0)
            np.add.at(edge, f[:, b], ln)
            np.add.at(cnt, f[:, b], 1.0)
        mean_edge = edge / np.maximum(cnt, 1.0)
        mean_edge[cnt == 0] = mesh.mean_edge_length()
        s = np.log(np.maximum(mean_edge * scale_factor, 1e-9))
        return SplatSet(
            positions=v.copy(),
            quats=np.tile(so3.IDENTITY_QUAT, (n, 1)),
            log_scales=np.repeat(s[:, None], 3, axis=1),
            colors=mesh.vertex_colors.copy(),
        )


@dataclass
class Splat2D:
    """EWA projection of one splat: 2D mean, 2x2 covariance, depth, color."""

    mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray


class _Projection:
    """Batched projection with all intermediates needed by the backward pass."""

    __slots__ = (
        "n", "valid", "mean2d", "conic", "cov2d", "depth", "color",
        "bbox", "xc", "J", "P2", "M", "R", "W_rot", "sigma3", "scales", "order",
    )


def _project_all(splats: SplatSet, cam: Camera) -> _Projection:
    p = _Projection()
    n = p.n = len(splats)
    W_rot = so3.quat_to_mat(cam.pose.rotation)
    xc = splats.positions @ W_rot.T + cam.pose.translation
    z = xc[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    f = cam.focal
    u = f * xc[:, 0] / zs + cam.principal_point[0]
    v = f * xc[:, 1] / zs + cam.principal_point[1]

    R = so3.quat_to_mat(splats.quats)
    s = np.exp(splats.log_scales)
    M = R * s[:, None, :]
    sigma3 = M @ M.transpose(0, 2, 1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = f / zs
    J[:, 1, 1] = f / zs
    J[:, 0, 2] = -f * xc[:, 0] / zs**2
    J[:, 1, 2] = -f * xc[:, 1] / zs**2
    P2 = J @ W_rot
    cov2d = P2 @ sigma3 @ P2.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV_DILATION
    cov2d[:, 1, 1] += COV_DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    # cull only when the 3-sigma footprint misses the frame entirely
    rx3 = _CULL_SIGMA * np.sqrt(a)
    ry3 = _CULL_SIGMA * np.sqrt(c)
    inside = (u + rx3 > 0) & (u - rx3 < cam.width) & (v + ry3 > 0) & (v - ry3 < cam.height)
    valid = valid & inside

    det = a * c - b * b
    det = np.where(det <= 0, 1.0, det)  # culled later if degenerate
    conic = np.stack([c / det, -b / det, a / det], axis=-1)

    rx = _RASTER_RADIUS * np.sqrt(a) + 1.0
    ry = _RASTER_RADIUS * np.sqrt(c) + 1.0
    bbox = np.zeros((n, 4), dtype=np.int32)
    bbox[:, 0] = np.clip(np.floor(u - rx), 0, cam.width - 1)
    bbox[:, 1] = np.clip(np.ceil(u + rx), 0, cam.width - 1)
    bbox[:, 2] = np.clip(np.floor(v - ry), 0, cam.height - 1)
    bbox[:, 3] = np.clip(np.ceil(v + ry), 0, cam.height - 1)

    p.valid = valid
    p.mean2d = np.stack([u, v], axis=-1)
    p.conic = conic
    p.cov2d = cov2d
    p.depth = z
    p.color = splats.colors
    p.bbox = bbox
    p.xc = xc
    p.J = J
    p.P2 = P2
    p.M = M
    p.R = R
    p.W_rot = W_rot
    p.sigma3 = sigma3
    p.scales = s
    idx = np.nonzero(valid)[0]
    p.order = idx[np.lexsort((idx, z[idx]))]  # depth ascending, ties by index
    return p


def project_splat(cam: Camera, position, quat, log_scale, color=(1.0, 1.0, 1.0)):
    """EWA-project a single splat; returns a Splat2D or None when culled."""
    ss = SplatSet(
        positions=np.asarray(position, dtype=float)[None],
        quats=np.asarray(quat, dtype=float)[None],
        log_scales=np.asarray(log_scale, dtype=float)[None],
        colors=np.asarray(color, dtype=float)[None],
    )
    p = _project_all(ss, cam)
    if not p.valid[0]:
        return None
    return Splat2D(mean=p.mean2d[0], cov2d=p.cov2d[0], depth=float(p.depth[0]), color=p.color[0])


# ---------------------------------------------------------------------------
# numba kernels (serial; iteration order fixed, hence bit-deterministic)


@njit(cache=True)
def _fwd_kernel(H, W, mean2d, conic, color, bbox, tile_off, tile_sid, img, tfin, ncon):
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    for ty in range(nty):
        for tx in range(ntx):
            tid = ty * ntx + tx
            lo = tile_off[tid]
            hi = tile_off[tid + 1]
            if lo == hi:
                continue
            y1 = min((ty + 1) * TILE, H)
            x1 = min((tx + 1) * TILE, W)
            for py in range(ty * TILE, y1):
                fy = py + 0.5
                for px in range(tx * TILE, x1):
                    fx = px + 0.5
                    T = tfin[py, px]
                    r = img[py, px, 0]
                    g = img[py, px, 1]
                    b = img[py, px, 2]
                    a = img[py, px, 3]
                    n = ncon[py, px]
                    for k in range(lo, hi):
                        if T < T_MIN:
                            break
                        sid = tile_sid[k]
                        if px < bbox[sid, 0] or px > bbox[sid, 1] or py < bbox[sid, 2] or py > bbox[sid, 3]:
                            n += 1
                            continue
                        dx = fx - mean2d[sid, 0]
                        dy = fy - mean2d[sid, 1]
                        power = -0.5 * (conic[sid, 0] * dx * dx + 2.0 * conic[sid, 1] * dx * dy + conic[sid, 2] * dy * dy)
                        n += 1
                        if power < LOG_G_MIN:
                            continue
                        G = np.exp(power)
                        al = OPACITY * G
                        if al > ALPHA_MAX:
                            al = ALPHA_MAX
                        w = T * al
                        r += w * color[sid, 0]
                        g += w * color[sid, 1]
                        b += w * color[sid, 2]
                        a += w
                        T *= 1.0 - al
                    img[py, px, 0] = r
                    img[py, px, 1] = g
                    img[py, px, 2] = b
                    img[py, px, 3] = a
                    tfin[py, px] = T
                    ncon[py, px] = n


@njit(cache=True)
def _bwd_kernel(H, W, mean2d, conic, color, bbox, tile_off, tile_sid, tfin, ncon, gimg, gmean2d, gconic, gcolor):
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    for ty in range(nty):
        for tx in range(ntx):
            tid = ty * ntx + tx
            lo = tile_off[tid]
            hi = tile_off[tid + 1]
            if lo == hi:
                continue
            y1 = min((ty + 1) * TILE, H)
            x1 = min((tx + 1) * TILE, W)
            for py in range(ty * TILE, y1):
                fy = py + 0.5
                for px in range(tx * TILE, x1):
                    fx = px + 0.5
                    gr = gimg[py, px, 0]
                    gg = gimg[py, px, 1]
                    gb = gimg[py, px, 2]
                    ga = gimg[py, px, 3]
                    if gr == 0.0 and gg == 0.0 and gb == 0.0 and ga == 0.0:
                        continue
                    T = tfin[py, px]
                    n = ncon[py, px]
                    S = 0.0
                    for k in range(lo + n - 1, lo - 1, -1):
                        sid = tile_sid[k]
                        if px < bbox[sid, 0] or px > bbox[sid, 1] or py < bbox[sid, 2] or py > bbox[sid, 3]:
                            continue
                        dx = fx - mean2d[sid, 0]
                        dy = fy - mean2d[sid, 1]
                        ca = conic[sid, 0]
                        cb = conic[sid, 1]
                        cc = conic[sid, 2]
                        power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
                        if power < LOG_G_MIN:
                            continue
                        G = np.exp(power)
                        al = OPACITY * G
                        if al > ALPHA_MAX:
                            al = ALPHA_MAX
                        om = 1.0 - al
                        Tbef = T / om
                        contrib = color[sid, 0] * gr + color[sid, 1] * gg + color[sid, 2] * gb + ga
                        w = al * Tbef
                        gcolor[sid, 0] += w * gr
                        gcolor[sid, 1] += w * gg
                        gcolor[sid, 2] += w * gb
                        dl_dal = Tbef * contrib - S / om
                        S += w * contrib
                        T = Tbef
                        if al >= ALPHA_MAX:
                            continue  # clamped: no gradient into G
                        dl_dp = dl_dal * OPACITY * G
                        gmean2d[sid, 0] += dl_dp * (ca * dx + cb * dy)
                        gmean2d[sid, 1] += dl_dp * (cb * dx + cc * dy)
                        gconic[sid, 0] += dl_dp * (-0.5 * dx * dx)
                        gconic[sid, 1] += dl_dp * (-dx * dy)
                        gconic[sid, 2] += dl_dp * (-0.5 * dy * dy)


def _tile_lists(p: _Projection, W: int, H: int):
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    order = p.order
    if len(order) == 0:
        return np.zeros(ntx * nty + 1, dtype=np.int32), np.zeros(0, dtype=np.int32)
    bb = p.bbox[order]
    tx0 = bb[:, 0] // TILE
    tx1 = bb[:, 1] // TILE
    ty0 = bb[:, 2] // TILE
    ty1 = bb[:, 3] // TILE
    wx = tx1 - tx0 + 1
    wy = ty1 - ty0 + 1
    counts = (wx * wy).astype(np.int64)
    offs = np.concatenate([[0], np.cumsum(counts)])
    total = int(offs[-1])
    rank = np.repeat(np.arange(len(order)), counts)
    li = np.arange(total) - offs[rank]
    tix = tx0[rank] + li % wx[rank]
    tiy = ty0[rank] + li // wx[rank]
    tid = (tiy * ntx + tix).astype(np.int64)
    srt = np.lexsort((rank, tid))
    tid_s = tid[srt]
    sid_s = order[rank[srt]].astype(np.int32)
    tile_off = np.zeros(ntx * nty + 1, dtype=np.int32)
    np.add.at(tile_off, tid_s + 1, 1)
    np.cumsum(tile_off, out=tile_off)
    return tile_off, sid_s


class _RenderCache:
    __slots__ = ("proj", "tile_off", "tile_sid", "img", "tfin", "ncon", "cam", "size")


def _render_forward(splats: SplatSet, cam: Camera, size=None) -> tuple[np.ndarray, _RenderCache]:
    if size is None:
        size = (cam.height, cam.width)
    H, W = size
    p = _project_all(splats, cam)
    tile_off, tile_sid = _tile_lists(p, W, H)
    img = np.zeros((H, W, 4))
    tfin = np.ones((H, W))
    ncon = np.zeros((H, W), dtype=np.int32)
    if len(p.order):
        _fwd_kernel(H, W, p.mean2d, p.conic, p.color, p.bbox, tile_off, tile_sid, img, tfin, ncon)
    cache = _RenderCache()
    cache.proj = p
    cache.tile_off = tile_off
    cache.tile_sid = tile_sid
    cache.img = img
    cache.tfin = tfin
    cache.ncon = ncon
    cache.cam = cam
    cache.size = (H, W)
    return img, cache


def render(splats: SplatSet, cam: Camera, size=None) -> np.ndarray:
    """Composite splats into an RGBA image (alpha = accumulated opacity)."""
    img, _ = _render_forward(splats, cam, size)
    return img


def _sym2(m3):
    """(...,3) (a,b,c) -> (...,2,2) symmetric matrices."""
    out = np.empty(m3.shape[:-1] + (2, 2))
    out[..., 0, 0] = m3[..., 0]
    out[..., 0, 1] = m3[..., 1]
    out[..., 1, 0] = m3[..., 1]
    out[..., 1, 1] = m3[..., 2]
    return out


def _render_backward_from_cache(splats: SplatSet, cache: _RenderCache, gimg: np.ndarray):
    H, W = cache.size
    p = cache.proj
    n = p.n
    gmean2d = np.zeros((n, 2))
    gconic = np.zeros((n, 3))
    gcolor = np.zeros((n, 3))
    if len(p.order):
        _bwd_kernel(
            H, W, p.mean2d, p.conic, p.color, p.bbox, cache.tile_off, cache.tile_sid,
            cache.tfin, cache.ncon, np.ascontiguousarray(gimg, dtype=float),
            gmean2d, gconic, gcolor,
        )

    gx = np.zeros((n, 3))
    gq = np.zeros((n, 4))
    gls = np.zeros((n, 3))
    v = p.valid
    if v.any():
        cam = cache.cam
        f = cam.focal
        xc = p.xc[v]
        z = xc[:, 2]
        # conic = inv(cov2d): gcov2d = -Lam @ Gl @ Lam with the symmetric-storage convention
        lam = _sym2(p.conic[v])
        gl = _sym2(np.stack([gconic[v, 0], gconic[v, 1] * 0.5, gconic[v, 2]], axis=-1))
        gcov = -lam @ gl @ lam
        P2 = p.P2[v]
        sigma3 = p.sigma3[v]
        gP2 = 2.0 * gcov @ P2 @ sigma3
        gsig3 = P2.transpose(0, 2, 1) @ gcov @ P2
        gJ = gP2 @ p.W_rot.T
        gM = 2.0 * gsig3 @ p.M[v]
        gR = gM * p.scales[v][:, None, :]
        gs = np.einsum("nij,nij->nj", p.R[v], gM)
        gls[v] = gs * p.scales[v]
        gq[v] = so3.quat_to_mat_vjp(splats.quats[v], gR)
        # position gradient: through the 2D mean and through J
        gu = gmean2d[v, 0]
        gv_ = gmean2d[v, 1]
        gX = gu * f / z
        gY = gv_ * f / z
        gZ = -gu * f * xc[:, 0] / z**2 - gv_ * f * xc[:, 1] / z**2
        gX += gJ[:, 0, 2] * (-f / z**2)
        gY += gJ[:, 1, 2] * (-f / z**2)
        gZ += (
            gJ[:, 0, 0] * (-f / z**2)
            + gJ[:, 1, 1] * (-f / z**2)
            + gJ[:, 0, 2] * (2 * f * xc[:, 0] / z**3)
            + gJ[:, 1, 2] * (2 * f * xc[:, 1] / z**3)
        )
        gxc = np.stack([gX, gY, gZ], axis=-1)
        gx[v] = gxc @ p.W_rot
    return gx, gq, gls, gcolor


def render_backward(splats: SplatSet, cam: Camera, gimg: np.ndarray, size=None):
    """Analytic gradients of sum(gimg * render(splats)) for x, q, log_s, c."""
    if size is None:
        size = (cam.height, cam.width)
    _, cache = _render_forward(splats, cam, size)
    return _render_backward_from_cache(splats, cache, gimg)


def render_reference(splats: SplatSet, cam: Camera, size=None) -> np.ndarray:
    """Dense per-pixel compositing in plain numpy; oracle for the tiled path."""
    if size is None:
        size = (cam.height, cam.width)
    H, W = size
    p = _project_all(splats, cam)
    img = np.zeros((H, W, 4))
    if len(p.order) == 0:
        return img
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    order = p.order
    dx = gx[None] - p.mean2d[order, 0][:, None, None]
    dy = gy[None] - p.mean2d[order, 1][:, None, None]
    ca = p.conic[order, 0][:, None, None]
    cb = p.conic[order, 1][:, None, None]
    cc = p.conic[order, 2][:, None, None]
    power = -0.5 * (ca * dx * dx + 2 * cb * dx * dy + cc * dy * dy)
    # replicate the bbox support of the tiled path (a superset of the ellipse)
    bb = p.bbox[order]
    px = np.arange(W)[None, None, :]
    py = np.arange(H)[None, :, None]
    in_bb = (
        (px >= bb[:, 0][:, None, None]) & (px <= bb[:, 1][:, None, None])
        & (py >= bb[:, 2][:, None, None]) & (py <= bb[:, 3][:, None, None])
    )
    G = np.exp(power)
    alpha = np.minimum(ALPHA_MAX, OPACITY * G)
    alpha[(power < LOG_G_MIN) | ~in_bb] = 0.0
    one_m = 1.0 - alpha
    T = np.concatenate([np.ones((1, H, W)), np.cumprod(one_m, axis=0)[:-1]], axis=0)
    w = alpha * T
    img[..., :3] = np.einsum("nhw,nc->hwc", w, p.color[order])
    img[..., 3] = w.sum(axis=0)
    return img


def save_png(path, img: np.ndarray):
    """Dump an RGB(A) float image in [0,1] as 8-bit PNG (debug output)."""
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
