"""Reproducible experiment drivers: capture fitting end to end, evaluation
tables, and the three ablation pairs (view conditioning, appearance
refinement, control-point rig vs free per-splat deformation)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import fitting as ft
from . import rig as rg
from . import synth
from .fitting import FitConfig, FrameGrid
from .geom import TriMesh
from .rig import ControlRig
from .splats import SplatSet

log = logging.getLogger(__name__)


@dataclass
class CaptureSpec:
    """Desk-scale capture + fit sizing shared by experiments and the CLI."""

    preset: str = "sphere_face"
    expression: str = "talk_move"
    n_views: int = 8
    n_frames: int = 12
    size: int = 64
    resolution: int = 1000
    n_controls: int = 400
    n_neighbors: int = 10
    iterations: int = 3000
    static_iterations: int = 500
    seed: int = 0


def build_rig(mesh: TriMesh, spec: CaptureSpec, per_gaussian: bool = False) -> ControlRig:
    splats = SplatSet.from_mesh(mesh)
    if per_gaussian:
        return rg.per_splat_rig(splats)
    ctrl = rg.select_control_points(splats, min(spec.n_controls, len(splats)), seed=spec.seed)
    return rg.compute_blend_weights(splats, ctrl, m=spec.n_neighbors)


def fit_capture(mesh: TriMesh, grid: FrameGrid, spec: CaptureSpec, cfg: FitConfig | None = None,
                per_gaussian: bool = False):
    cfg = cfg or FitConfig(iterations=spec.iterations, static_iterations=spec.static_iterations, seed=spec.seed)
    rig = build_rig(mesh, spec, per_gaussian)
    field, trace = ft.fit(grid, mesh, rig, cfg)
    return field, trace


def eval_geometry(field, mesh: TriMesh, gt_meshes: list) -> dict:
    """Per-frame p2p and NC of the extracted canonical-view meshes."""
    p2p, nc = [], []
    for t, gt in enumerate(gt_meshes):
        ext = ft.extract_frame_mesh(field, mesh, t)
        p2p.append(synth.metric_p2p(ext, gt))
        nc.append(synth.metric_nc(ext, gt))
    return {"p2p": p2p, "nc": nc, "mean_p2p": float(np.mean(p2p)), "mean_nc": float(np.mean(nc))}


def eval_renders(field, grid: FrameGrid) -> dict:
    """PSNR of the fitted render against every grid cell."""
    vals = np.zeros((grid.n_views, grid.n_frames))
    for v in range(grid.n_views):
        for t in range(grid.n_frames):
            img = ft.render_state(field, v, t)
            rgb = img[..., :3] + (1 - img[..., 3:]) * field.config.background
            vals[v, t] = synth.metric_psnr(rgb, grid.images[v, t])
    return {"psnr": vals, "mean_psnr": float(vals.mean())}


# ---------------------------------------------------------------------------
# ablations

_ABLATION_SPEC = CaptureSpec(
    n_views=5, n_frames=6, size=48, resolution=700, n_controls=250,
    iterations=700, static_iterations=200,
)


def _ablation_cfg(spec: CaptureSpec, **overrides) -> FitConfig:
    base = dict(iterations=spec.iterations, static_iterations=spec.static_iterations, seed=spec.seed)
    base.update(overrides)
    return FitConfig(**base)


def ablation_view_conditioning(seed: int, warp_sigma: float = 0.06, spec: CaptureSpec | None = None) -> dict:
    """Fit the same warped grid with and without the view input; compare mean
    p2p of the canonical-view geometry."""
    spec = replace(spec or _ABLATION_SPEC, seed=seed)
    corruption = synth.CorruptionConfig(view_warp_sigma=warp_sigma)
    mesh, grid, gt = synth.generate_capture(
        spec.preset, spec.expression, spec.n_views, spec.n_frames, spec.size,
        corruption, seed=seed, resolution=spec.resolution,
    )
    out = {}
    for label, vc in (("with", True), ("without", False)):
        field, _ = fit_capture(mesh, grid, spec, _ablation_cfg(spec, view_conditioning=vc))
        out[label] = eval_geometry(field, mesh, gt.meshes)["mean_p2p"]
        log.info("view-conditioning seed %d %s: p2p %.4f", seed, label, out[label])
    return out


def ablation_refine(seed: int, noise=(0.5, 1.5), spec: CaptureSpec | None = None) -> dict:
    """Per-time texture noise (no cross-view inconsistency): geometry error
    with and without the appearance-refinement MLP."""
    spec = replace(spec or _ABLATION_SPEC, seed=seed)
    corruption = synth.CorruptionConfig(texture_noise=tuple(noise))
    mesh, grid, gt = synth.generate_capture(
        spec.preset, spec.expression, spec.n_views, spec.n_frames, spec.size,
        corruption, seed=seed, resolution=spec.resolution,
    )
    out = {}
    for label, use in (("with", True), ("without", False)):
        field, _ = fit_capture(mesh, grid, spec, _ablation_cfg(spec, use_refine=use))
        out[label] = eval_geometry(field, mesh, gt.meshes)["mean_p2p"]
        log.info("refine seed %d %s: p2p %.4f", seed, label, out[label])
    return out


def ablation_lbs(seed: int, spec: CaptureSpec | None = None) -> dict:
    """Control-point rig vs free per-splat deformation; compare mean NC."""
    spec = replace(spec or _ABLATION_SPEC, seed=seed)
    mesh, grid, gt = synth.generate_capture(
        spec.preset, spec.expression, spec.n_views, spec.n_frames, spec.size,
        None, seed=seed, resolution=spec.resolution,
    )
    out = {}
    for label, pg in (("rig", False), ("per_gaussian", True)):
        field, _ = fit_capture(mesh, grid, spec, _ablation_cfg(spec), per_gaussian=pg)
        out[label] = eval_geometry(field, mesh, gt.meshes)["mean_nc"]
        log.info("lbs seed %d %s: nc %.4f", seed, label, out[label])
    return out


def run_all_ablations(seeds=(0, 1, 2), spec: CaptureSpec | None = None) -> list[dict]:
    rows = []
    for s in seeds:
        vc = ablation_view_conditioning(s, spec=spec)
        rf = ablation_refine(s, spec=spec)
        lb = ablation_lbs(s, spec=spec)
        rows.append({
            "seed": s,
            "p2p_view_cond": vc["with"], "p2p_no_view_cond": vc["without"],
            "p2p_refine": rf["with"], "p2p_no_refine": rf["without"],
            "nc_rig": lb["rig"], "nc_per_gaussian": lb["per_gaussian"],
        })
    return rows
