"""View-conditioned deformable splat fitting on a multi-view frame grid.

The deformation of the canonical splats at grid cell (v, t) is a per-control
rigid transform: a learned global SE(3) table entry composed with the local
transform predicted by a deformation MLP conditioned on control position,
view index and time. An appearance-refinement MLP predicts per-splat offsets
for color, scale and orientation (never positions) that absorb frame-to-frame
appearance inconsistency; it is used during training only and never when
exporting geometry. Training minimizes a Huber image loss plus a multi-scale
pyramid term, front-to-back:

  stage 0  static: canonical splat scales/orientations against the t=0 orbit
  stage 1  global-table-only warmup
  stage 2  joint global + deform MLP + refine MLP

All gradients are hand-written reverse mode; the whole chain is finite-
difference checked in the tests.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from . import nets, so3
from .geom import Camera, TriMesh, load_cameras_json, save_cameras_json
from .rig import ControlRig, lbs_deform, lbs_rotation_blend
from .splats import SplatSet, _render_forward, _render_backward_from_cache

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when the fit hits a non-finite loss; carries the offending cell."""

    def __init__(self, v, t, iteration):
        super().__init__(f"non-finite loss at grid cell (v={v}, t={t}), iteration {iteration}")
        self.v = v
        self.t = t
        self.iteration = iteration


# ---------------------------------------------------------------------------
# frame grid


@dataclass
class FrameGrid:
    """The space-time image grid: row v=0 is the fixed-view video, column t=0
    the fixed-time orbit. Cameras are fixed per view across time."""

    images: np.ndarray  # (V,T,H,W,3) float in [0,1]
    masks: np.ndarray | None  # (V,T,H,W) float in [0,1] or None
    cameras: list[Camera]
    view0_index: int = 0

    def __post_init__(self):
        if self.images.ndim != 5:
            raise ValueError("images must be (V,T,H,W,3)")
        if len(self.cameras) != self.images.shape[0]:
            raise ValueError("one camera per view required")

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def n_frames(self) -> int:
        return self.images.shape[1]

    @property
    def frame_size(self):
        return self.images.shape[2], self.images.shape[3]


def save_frame_grid(outdir, grid: FrameGrid):
    from pathlib import Path

    from PIL import Image

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    V, T = grid.n_views, grid.n_frames
    for v in range(V):
        for t in range(T):
            img = np.clip(np.round(grid.images[v, t] * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(out / f"frame_v{v:03d}_t{t:03d}.png")
            if grid.masks is not None:
                m = np.clip(np.round(grid.masks[v, t] * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(m).save(out / f"mask_v{v:03d}_t{t:03d}.png")
    save_cameras_json(out / "cameras.json", grid.cameras)
    H, W = grid.frame_size
    with open(out / "grid.json", "w") as f:
        json.dump({"views": V, "frames": T, "height": H, "width": W, "view0_index": grid.view0_index}, f)


def load_frame_grid(indir) -> FrameGrid:
    from pathlib import Path

    from PIL import Image

    src = Path(indir)
    with open(src / "grid.json") as f:
        meta = json.load(f)
    V, T = meta["views"], meta["frames"]
    H, W = meta["height"], meta["width"]
    images = np.zeros((V, T, H, W, 3))
    masks = np.zeros((V, T, H, W))
    have_masks = (src / "mask_v000_t000.png").exists()
    for v in range(V):
        for t in range(T):
            images[v, t] = np.asarray(Image.open(src / f"frame_v{v:03d}_t{t:03d}.png"), dtype=float)[..., :3] / 255.0
            if have_masks:
                masks[v, t] = np.asarray(Image.open(src / f"mask_v{v:03d}_t{t:03d}.png"), dtype=float) / 255.0
    cams = load_cameras_json(src / "cameras.json")
    return FrameGrid(images, masks if have_masks else None, cams, meta.get("view0_index", 0))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class FitConfig:
    iterations: int = 3000  # deformation iterations (stages 1+2); 60000 at production scale
    static_iterations: int = 500
    global_only_fraction: float = 0.05
    huber_delta: float = 0.1
    perceptual_weight: float = 1.0
    background: float = 1.0  # composite target: 1 = white, 0 = black
    lr_global: float = 1e-3
    lr_mlp: float = 1e-4
    lr_static: float = 1e-2
    lr_final_scale: float = 0.1  # cosine decay floor over the deformation stages
    seed: int = 0
    view_conditioning: bool = True
    use_refine: bool = True
    n_frequencies: int = 6
    view_embed_dim: int = 16
    deform_hidden: tuple = (128, 128, 128, 128, 128)
    refine_hidden: tuple = (128, 128, 128, 128)

    def __post_init__(self):
        if not (0.0 <= self.global_only_fraction <= 1.0):
            raise ValueError("global_only_fraction must be in [0,1]")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")


# ---------------------------------------------------------------------------
# the deformation field


@dataclass
class DeformationField:
    canonical: SplatSet
    rig: ControlRig
    cameras: list[Camera]
    deform_mlp: nets.MlpParams
    refine_mlp: nets.MlpParams
    deform_emb: np.ndarray  # (V, E)
    refine_emb: np.ndarray  # (V, E)
    global_quats: np.ndarray  # (V,T,4)
    global_trans: np.ndarray  # (V,T,3)
    norm_center: np.ndarray
    norm_scale: float
    n_views: int
    n_frames: int
    config: FitConfig
    # cached fourier encodings of the static inputs
    _enc_p: np.ndarray = None
    _enc_x: np.ndarray = None

    def __post_init__(self):
        if self._enc_p is None:
            self._enc_p = nets.fourier_encode(self._norm(self.rig.control_points), self.config.n_frequencies)
        if self._enc_x is None:
            self._enc_x = nets.fourier_encode(self._norm(self.canonical.positions), self.config.n_frequencies)

    def _norm(self, pts):
        return (pts - self.norm_center) / self.norm_scale

    def _time_enc(self, t):
        tt = -1.0 if self.n_frames == 1 else 2.0 * t / (self.n_frames - 1) - 1.0
        return nets.fourier_encode(np.array([tt]), self.config.n_frequencies)

    def _emb_row(self, v):
        return v if self.config.view_conditioning else 0


def init_field(splats: SplatSet, rig: ControlRig, cameras: list[Camera], n_frames: int, cfg: FitConfig) -> DeformationField:
    """Field whose deformation is the exact identity everywhere."""
    rng = np.random.default_rng(cfg.seed + 1)
    V = len(cameras)
    fdim = nets.fourier_dim(3, cfg.n_frequencies)
    tdim = nets.fourier_dim(1, cfg.n_frequencies)
    in_dim = fdim + cfg.view_embed_dim + tdim
    deform = nets.init_mlp([in_dim, *cfg.deform_hidden, 6], rng, zero_init_last=True)
    refine = nets.init_mlp([in_dim, *cfg.refine_hidden, 10], rng, zero_init_last=True)
    demb = rng.normal(0.0, 0.1, size=(V, cfg.view_embed_dim))
    remb = rng.normal(0.0, 0.1, size=(V, cfg.view_embed_dim))
    gq = np.tile(so3.IDENTITY_QUAT, (V, n_frames, 1))
    gt = np.zeros((V, n_frames, 3))
    center = splats.positions.mean(axis=0)
    scale = float(np.abs(splats.positions - center).max())
    return DeformationField(
        canonical=splats, rig=rig, cameras=cameras,
        deform_mlp=deform, refine_mlp=refine, deform_emb=demb, refine_emb=remb,
        global_quats=gq, global_trans=gt,
        norm_center=center, norm_scale=max(scale, 1e-9),
        n_views=V, n_frames=n_frames, config=cfg,
    )


# ---------------------------------------------------------------------------
# forward evaluation


def _deform_forward(field: DeformationField, v: int, t: int):
    """Per-control transforms (quats, trans) at cell (v,t), with backprop cache."""
    K = field.rig.n_controls
    emb = field.deform_emb[field._emb_row(v)]
    enc = np.concatenate(
        [field._enc_p, np.tile(emb, (K, 1)), np.tile(field._time_enc(t), (K, 1))], axis=1
    )
    out, cache = nets.mlp_forward(field.deform_mlp, enc)
    omega = out[:, :3]
    u = out[:, 3:]
    q_local = so3.axis_angle_to_quat(omega)
    qg = so3.quat_normalize(field.global_quats[v, t])
    q_all = so3.quat_mul(qg[None, :], q_local)
    t_all = so3.quat_rotate(qg[None, :], u) + field.global_trans[v, t]
    fwd = dict(enc=enc, cache=cache, omega=omega, u=u, q_local=q_local, qg=qg, q_all=q_all, t_all=t_all)
    return q_all, t_all, fwd


def eval_deformation(field: DeformationField, v: int, t: int):
    """K per-control rigid transforms (quats (K,4), translations (K,3)) at (v,t)."""
    q_all, t_all, _ = _deform_forward(field, v, t)
    return q_all, t_all


def _refine_forward(field: DeformationField, v: int, t: int):
    N = len(field.canonical)
    emb = field.refine_emb[field._emb_row(v)]
    enc = np.concatenate(
        [field._enc_x, np.tile(emb, (N, 1)), np.tile(field._time_enc(t), (N, 1))], axis=1
    )
    out, cache = nets.mlp_forward(field.refine_mlp, enc)
    return out, dict(enc=enc, cache=cache, out=out)


def _apply_refine(splats: SplatSet, out: np.ndarray):
    """Refinement offsets: color clamp-added, log-scale added, orientation
    composed with a small quaternion delta built from the raw imaginary parts
    (channel 6 of the 10-dim output is reserved and unused)."""
    dc = out[:, 0:3]
    dls = out[:, 3:6]
    dq_xyz = out[:, 7:10]
    c_raw = splats.colors + dc
    c = np.clip(c_raw, 0.0, 1.0)
    ls = splats.log_scales + dls
    draw = np.concatenate([np.ones((len(out), 1)), 0.1 * dq_xyz], axis=1)
    dq = so3.quat_normalize(draw)
    q = so3.quat_mul(splats.quats, dq)
    cache = dict(c_raw=c_raw, draw=draw, dq=dq, base_q=splats.quats)
    return SplatSet(splats.positions, q, ls, c), cache


def eval_refine(field: DeformationField, splats: SplatSet, v: int, t: int) -> SplatSet:
    """Train-time appearance refinement of non-positional splat attributes."""
    out, _ = _refine_forward(field, v, t)
    refined, _ = _apply_refine(splats, out)
    return refined


def _deformed_splats(field: DeformationField, v: int, t: int, use_refine: bool):
    q_all, t_all, dfwd = _deform_forward(field, v, t)
    base = field.canonical
    xt = lbs_deform(base.positions, field.rig, q_all, t_all)
    q_spl = lbs_rotation_blend(field.rig, q_all, base.quats)
    moved = SplatSet(xt, q_spl, base.log_scales, base.colors)
    rfwd = rcache = None
    if use_refine:
        out, rfwd = _refine_forward(field, v, t)
        moved, rcache = _apply_refine(moved, out)
    return moved, dict(dfwd=dfwd, rfwd=rfwd, rcache=rcache, q_all=q_all, t_all=t_all, q_spl=q_spl)


def render_state(field: DeformationField, v: int, t: int, use_refine: bool | None = None) -> np.ndarray:
    """Render the deformed (and optionally refined) state at grid cell (v,t)."""
    if use_refine is None:
        use_refine = field.config.use_refine
    splats, _ = _deformed_splats(field, v, t, use_refine)
    img, _ = _render_forward(splats, field.cameras[v])
    return img


def extract_frame_mesh(field: DeformationField, mesh: TriMesh, t: int) -> TriMesh:
    """Registered mesh at frame t in the canonical view (v=0); no refinement."""
    q_all, t_all = eval_deformation(field, 0, t)
    verts = lbs_deform(mesh.vertices, field.rig, q_all, t_all)
    return TriMesh(verts, mesh.faces.copy(), mesh.vertex_colors.copy())


# ---------------------------------------------------------------------------
# loss: Huber + multi-scale pyramid substitute for a perceptual term


def _pool(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _unpool(g, shape):
    out = np.zeros(shape + g.shape[2:])
    rep = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
    out[: rep.shape[0], : rep.shape[1]] = rep
    return out


def image_loss(rendered: np.ndarray, target: np.ndarray, cfg: FitConfig, mask: np.ndarray | None = None):
    """Composite over the configured background, then Huber at full resolution
    plus the mean of Huber terms on three 2x average-pooled levels weighted by
    perceptual_weight. Returns (scalar, gradient w.r.t. the RGBA image)."""
    a = rendered[..., 3:4]
    comp = rendered[..., :3] + (1.0 - a) * cfg.background
    e = comp - target
    m = np.ones(e.shape[:2]) if mask is None else mask
    delta = cfg.huber_delta

    levels = [(e, m)]
    for _ in range(3):
        ep, mp = levels[-1]
        levels.append((_pool(ep), _pool(mp)))

    total = 0.0
    grads = []
    for i, (el, ml) in enumerate(levels):
        wl = 1.0 if i == 0 else cfg.perceptual_weight / 3.0
        ae = np.abs(el)
        quad = ae <= delta
        h = np.where(quad, 0.5 * el * el, delta * (ae - 0.5 * delta))
        dh = np.where(quad, el, delta * np.sign(el))
        cnt = el.size
        total += wl * float((h * ml[..., None]).sum()) / cnt
        grads.append(wl * dh * ml[..., None] / cnt)

    ge = grads[3]
    for i in (2, 1, 0):
        ge = grads[i] + _unpool(ge, levels[i][0].shape[:2])
    gimg = np.empty_like(rendered)
    gimg[..., :3] = ge
    gimg[..., 3] = -(ge.sum(axis=-1)) * cfg.background
    return total, gimg


# ---------------------------------------------------------------------------
# backward through the deformation chain


def _scatter_rows(idx, vals, k):
    """Sum rows of vals (N,M,D) into (k,D) bins given idx (N,M)."""
    flat = idx.ravel()
    out = np.empty((k,) + vals.shape[2:])
    v2 = vals.reshape(-1, int(np.prod(vals.shape[2:])))
    cols = []
    for c in range(v2.shape[1]):
        cols.append(np.bincount(flat, weights=v2[:, c], minlength=k))
    return np.stack(cols, axis=-1).reshape((k,) + vals.shape[2:])


def _backward_step(field: DeformationField, fwd: dict, gx, gq_out, gls, gc, use_refine: bool):
    """Pull rasterizer gradients back to every learnable tensor of the field."""
    rig = field.rig
    base = field.canonical
    K = rig.n_controls
    nb = rig.neighbor_idx
    w = rig.weights

    out = {}

    # --- refine ---
    if use_refine:
        rc = fwd["rcache"]
        gdc = np.where((rc["c_raw"] > 0) & (rc["c_raw"] < 1), gc, 0.0)
        gdls = gls
        g_qspl, g_dq = so3.quat_mul_vjp(fwd["q_spl"], rc["dq"], gq_out)
        g_draw = so3.quat_normalize_vjp(rc["draw"], g_dq)
        gdq_xyz = 0.1 * g_draw[:, 1:]
        gout_r = np.concatenate([gdc, gdls, np.zeros((len(gdc), 1)), gdq_xyz], axis=1)
        rfwd = fwd["rfwd"]
        (gw_r, gb_r), genc_r = nets.mlp_backward(field.refine_mlp, rfwd["cache"], gout_r)
        fdim = field._enc_x.shape[1]
        edim = field.config.view_embed_dim
        out["refine_w"] = gw_r
        out["refine_b"] = gb_r
        out["refine_emb_row"] = genc_r[:, fdim : fdim + edim].sum(axis=0)
    else:
        g_qspl = gq_out

    # --- rotation blend: q_spl = normalize(sum w sgn q_all[nb]) x base.quats ---
    q_all = fwd["q_all"]
    qn = q_all[nb]  # (N,M,4)
    ref_col = w.argmax(axis=1)
    ref = qn[np.arange(len(qn)), ref_col]
    sgn = np.where(np.sum(qn * ref[:, None, :], axis=-1) < 0, -1.0, 1.0)
    qs = np.einsum("nm,nmi->ni", w * sgn, qn)
    g_qb, _ = so3.quat_mul_vjp(qs / np.linalg.norm(qs, axis=-1, keepdims=True), base.quats, g_qspl)
    g_qs = so3.quat_normalize_vjp(qs, g_qb)
    g_q_all = _scatter_rows(nb, (w * sgn)[..., None] * g_qs[:, None, :], K)

    # --- LBS positions: xt = x0 + sum_m w ((R[nb]-I) x0 + t[nb]) ---
    gdisp = w[..., None] * gx[:, None, :]  # (N,M,3)
    g_t_all = _scatter_rows(nb, gdisp, K)
    gR_pairs = gdisp[..., :, None] * base.positions[:, None, None, :]  # (N,M,3,3)
    g_R = _scatter_rows(nb, gR_pairs, K)
    g_q_all = g_q_all + so3.quat_to_mat_vjp(q_all, g_R)

    # --- compose global o local ---
    dfwd = fwd["dfwd"]
    qg = dfwd["qg"]
    g_qg_mul, g_qlocal = so3.quat_mul_vjp(np.broadcast_to(qg, q_all.shape), dfwd["q_local"], g_q_all)
    g_qg_rot, g_u = so3.quat_rotate_vjp(qg[None, :], dfwd["u"], g_t_all)
    out["g_qg_normed"] = g_qg_mul.sum(axis=0) + g_qg_rot.sum(axis=0)
    out["global_trans_cell"] = g_t_all.sum(axis=0)

    # --- axis-angle and deform MLP ---
    g_omega = so3.axis_angle_to_quat_vjp(dfwd["omega"], g_qlocal)
    gout_d = np.concatenate([g_omega, g_u], axis=1)
    (gw_d, gb_d), genc_d = nets.mlp_backward(field.deform_mlp, dfwd["cache"], gout_d)
    fdim = field._enc_p.shape[1]
    edim = field.config.view_embed_dim
    out["deform_w"] = gw_d
    out["deform_b"] = gb_d
    out["deform_emb_row"] = genc_d[:, fdim : fdim + edim].sum(axis=0)
    return out


def _cell_loss_and_grads(field: DeformationField, grid: FrameGrid, v: int, t: int, cfg: FitConfig, use_refine: bool):
    splats_t, fwd = _deformed_splats(field, v, t, use_refine)
    img, rcache = _render_forward(splats_t, field.cameras[v])
    mask = None if grid.masks is None else grid.masks[v, t]
    loss, gimg = image_loss(img, grid.images[v, t], cfg, mask)
    gx, gq, gls, gc = _render_backward_from_cache(splats_t, rcache, gimg)
    grads = _backward_step(field, fwd, gx, gq, gls, gc, use_refine)
    # map the normalized-quaternion gradient back to the raw stored entry
    grads["global_quat_cell"] = so3.quat_normalize_vjp(field.global_quats[v, t], grads.pop("g_qg_normed"))
    return loss, grads


# ---------------------------------------------------------------------------
# fit


def fit(grid: FrameGrid, mesh: TriMesh, rig: ControlRig, cfg: FitConfig):
    """Full schedule. Returns (DeformationField, trace) where trace is a list
    of (iteration, loss) covering the static stage and both deformation stages."""
    rng = np.random.default_rng(cfg.seed)
    V, T = grid.n_views, grid.n_frames
    if len(mesh.vertices) == 0:
        raise ValueError("mesh is empty")

    splats = SplatSet.from_mesh(mesh)
    trace = []
    it_counter = 0

    # stage 0: static scales/orientations on the t=0 orbit column
    state0 = nets.AdamState.for_tensors([splats.log_scales, splats.quats])
    for i in range(cfg.static_iterations):
        v = int(rng.integers(V))
        img, rcache = _render_forward(splats, grid.cameras[v])
        mask = None if grid.masks is None else grid.masks[v, 0]
        loss, gimg = image_loss(img, grid.images[v, 0], cfg, mask)
        if not np.isfinite(loss):
            raise NumericalAbort(v, 0, it_counter)
        _, gq, gls, _ = _render_backward_from_cache(splats, rcache, gimg)
        nets.adam_step(state0, [splats.log_scales, splats.quats], [gls, gq], cfg.lr_static)
        splats.quats /= np.linalg.norm(splats.quats, axis=1, keepdims=True)
        trace.append((it_counter, loss))
        it_counter += 1

    field = init_field(splats, rig, grid.cameras, T, cfg)

    glob_params = [field.global_quats, field.global_trans]
    state_g = nets.AdamState.for_tensors(glob_params)
    mlp_params = (
        field.deform_mlp.weights + field.deform_mlp.biases + [field.deform_emb]
        + field.refine_mlp.weights + field.refine_mlp.biases + [field.refine_emb]
    )
    state_m = nets.AdamState.for_tensors(mlp_params)

    n_global_only = int(round(cfg.global_only_fraction * cfg.iterations))
    for i in range(cfg.iterations):
        v = int(rng.integers(V))
        t = int(rng.integers(T))
        joint = i >= n_global_only
        use_refine = cfg.use_refine and joint
        loss, grads = _cell_loss_and_grads(field, grid, v, t, cfg, use_refine)
        if not np.isfinite(loss):
            raise NumericalAbort(v, t, it_counter)

        decay = cfg.lr_final_scale + (1.0 - cfg.lr_final_scale) * 0.5 * (1.0 + np.cos(np.pi * i / cfg.iterations))
        gq_table = np.zeros_like(field.global_quats)
        gt_table = np.zeros_like(field.global_trans)
        gq_table[v, t] = grads["global_quat_cell"]
        gt_table[v, t] = grads["global_trans_cell"]
        nets.adam_step(state_g, glob_params, [gq_table, gt_table], cfg.lr_global * decay)
        field.global_quats[v, t] /= np.linalg.norm(field.global_quats[v, t])

        if joint:
            row_d = field._emb_row(v)
            gde = np.zeros_like(field.deform_emb)
            gde[row_d] = grads["deform_emb_row"]
            mlp_grads = grads["deform_w"] + grads["deform_b"] + [gde]
            if cfg.use_refine:
                gre = np.zeros_like(field.refine_emb)
                gre[row_d] = grads["refine_emb_row"]
                mlp_grads = mlp_grads + grads["refine_w"] + grads["refine_b"] + [gre]
            else:
                zw = [np.zeros_like(t_) for t_ in field.refine_mlp.weights]
                zb = [np.zeros_like(t_) for t_ in field.refine_mlp.biases]
                mlp_grads = mlp_grads + zw + zb + [np.zeros_like(field.refine_emb)]
            nets.adam_step(state_m, mlp_params, mlp_grads, cfg.lr_mlp * decay)

        trace.append((it_counter, loss))
        it_counter += 1
        if i % 500 == 0:
            log.info("fit iter %d/%d loss %.6f", i, cfg.iterations, loss)

    return field, trace


def save_trace_csv(path, trace):
    with open(path, "w") as f:
        f.write("iteration,loss\n")
        for it, loss in trace:
            f.write(f"{it},{loss:.10g}\n")


# ---------------------------------------------------------------------------
# checkpoint: JSON manifest + raw little-endian tensors in one file

_CKPT_MAGIC = b"SSFLD1\n"


def save_field(path, field: DeformationField):
    cfg = asdict(field.config)
    cfg["deform_hidden"] = list(cfg["deform_hidden"])
    cfg["refine_hidden"] = list(cfg["refine_hidden"])
    tensors = {
        "canonical.positions": field.canonical.positions,
        "canonical.quats": field.canonical.quats,
        "canonical.log_scales": field.canonical.log_scales,
        "canonical.colors": field.canonical.colors,
        "rig.control_points": field.rig.control_points,
        "rig.neighbor_idx": field.rig.neighbor_idx,
        "rig.weights": field.rig.weights,
        "deform_emb": field.deform_emb,
        "refine_emb": field.refine_emb,
        "global_quats": field.global_quats,
        "global_trans": field.global_trans,
        "norm_center": field.norm_center,
    }
    for i, (w, b) in enumerate(zip(field.deform_mlp.weights, field.deform_mlp.biases)):
        tensors[f"deform.w{i}"] = w
        tensors[f"deform.b{i}"] = b
    for i, (w, b) in enumerate(zip(field.refine_mlp.weights, field.refine_mlp.biases)):
        tensors[f"refine.w{i}"] = w
        tensors[f"refine.b{i}"] = b
    manifest = {
        "config": cfg,
        "n_views": field.n_views,
        "n_frames": field.n_frames,
        "norm_scale": field.norm_scale,
        "n_deform_layers": field.deform_mlp.n_layers,
        "n_refine_layers": field.refine_mlp.n_layers,
        "cameras": [c.to_dict() for c in field.cameras],
        "tensors": [
            {"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in tensors.items()
        ],
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in tensors.values():
            f.write(np.ascontiguousarray(v).tobytes())


def load_field(path) -> DeformationField:
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError("not a field checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(hlen))
        tensors = {}
        for spec in manifest["tensors"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            dt = np.dtype(spec["dtype"])
            buf = f.read(n * dt.itemsize)
            tensors[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).copy()
    cfg_d = dict(manifest["config"])
    cfg_d["deform_hidden"] = tuple(cfg_d["deform_hidden"])
    cfg_d["refine_hidden"] = tuple(cfg_d["refine_hidden"])
    cfg = FitConfig(**cfg_d)
    canonical = SplatSet(
        tensors["canonical.positions"], tensors["canonical.quats"],
        tensors["canonical.log_scales"], tensors["canonical.colors"],
    )
    rig = ControlRig(tensors["rig.control_points"], tensors["rig.neighbor_idx"], tensors["rig.weights"])
    nd = manifest["n_deform_layers"]
    nr = manifest["n_refine_layers"]
    deform = nets.MlpParams(
        [tensors[f"deform.w{i}"] for i in range(nd)], [tensors[f"deform.b{i}"] for i in range(nd)]
    )
    refine = nets.MlpParams(
        [tensors[f"refine.w{i}"] for i in range(nr)], [tensors[f"refine.b{i}"] for i in range(nr)]
    )
    cams = [Camera.from_dict(d) for d in manifest["cameras"]]
    return DeformationField(
        canonical=canonical, rig=rig, cameras=cams,
        deform_mlp=deform, refine_mlp=refine,
        deform_emb=tensors["deform_emb"], refine_emb=tensors["refine_emb"],
        global_quats=tensors["global_quats"], global_trans=tensors["global_trans"],
        norm_center=tensors["norm_center"], norm_scale=manifest["norm_scale"],
        n_views=manifest["n_views"], n_frames=manifest["n_frames"], config=cfg,
    )
