"""Command-line pipeline driver.

Subcommands: synth, fit, extract, build-model, fit-capture, retarget, eval,
export-viewer, ablate. Configuration comes from flags plus an optional JSON
config file (flags win); every run writes a resolved-config snapshot next to
its outputs. All randomness flows from --seed. Exit codes: 0 success,
2 configuration error, 3 numerical abort. T2B_LOG in {error,info,debug}
controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("splatshape")


def _setup_logging():
    level = os.environ.get("T2B_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        print(f"warning: T2B_LOG={level!r} not in {{error,info,debug}}; using info", file=sys.stderr)
        level = "info"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _pair(text):
    try:
        lo, hi = (float(x) for x in text.split(","))
    except Exception:
        raise argparse.ArgumentTypeError(f"expected lo,hi pair, got {text!r}")
    return (lo, hi)


def _build_parser():
    p = argparse.ArgumentParser(prog="splatshape", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="JSON config file; explicit flags win")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)

    sp = sub.add_parser("synth", help="generate an oracle frame grid + ground truth")
    add_common(sp)
    sp.add_argument("--preset", choices=["sphere_face", "blob_creature"])
    sp.add_argument("--expression")
    sp.add_argument("--views", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--warp-sigma", type=float)
    sp.add_argument("--texture-noise", type=_pair, metavar="lo,hi")
    sp.add_argument("--gain", type=_pair, metavar="lo,hi")
    sp.add_argument("--noise-across-views", action="store_true", default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("fit", help="fit the deformation field to a frame grid")
    add_common(sp)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--mesh")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--static-iters", type=int)
    sp.add_argument("--controls", type=int)
    sp.add_argument("--neighbors", type=int)
    sp.add_argument("--no-view-conditioning", action="store_true", default=None)
    sp.add_argument("--no-refine", action="store_true", default=None)
    sp.add_argument("--per-gaussian", action="store_true", default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("extract", help="re-extract per-frame meshes from a checkpoint")
    add_common(sp)
    sp.add_argument("--field", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="p2p/NC/PSNR tables for a fitted capture")
    add_common(sp)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("build-model", help="PCA blendshape model from registered meshes")
    add_common(sp)
    sp.add_argument("--meshes", nargs="+", required=True, help="mesh files or directories of .ply frames")
    sp.add_argument("--components", type=int)
    sp.add_argument("--annotation", help="landmark annotation JSON (with its camera)")
    sp.add_argument("--mesh", help="static mesh to lift landmarks on (defaults to the first frame)")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("fit-capture", help="fit model coefficients to a registered capture")
    add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--capture", required=True)
    sp.add_argument("--image")
    sp.add_argument("--camera", help="cameras.json providing the shared camera")
    sp.add_argument("--view", type=int)
    sp.add_argument("--lambda-rgb", type=float)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("retarget", help="retarget tracked source landmarks onto the model")
    add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--source", required=True, help="CSV: frame, 20 x/y landmark columns")
    sp.add_argument("--annotation", required=True, help="annotation JSON supplying the frontal camera")
    sp.add_argument("--arap-weight", type=float)
    sp.add_argument("--viewer-columns", type=int)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("export-viewer", help="self-contained JSON export for the browser console")
    add_common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--components", type=int, help="truncated basis size shipped to the viewer")
    sp.add_argument("--golden", type=int)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("ablate", help="run the three ablation pairs and report deltas")
    add_common(sp)
    sp.add_argument("--views", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--warp-sigma", type=float)
    sp.add_argument("--texture-noise", type=_pair, metavar="lo,hi")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--out", required=True)
    return p


_DEFAULTS = {
    "synth": dict(preset="sphere_face", expression="talk_move", views=8, frames=12, size=64,
                  resolution=1000, warp_sigma=0.0, texture_noise=(1.0, 1.0), gain=(1.0, 1.0),
                  noise_across_views=False, seed=0, threads=0),
    "fit": dict(iters=3000, static_iters=500, controls=400, neighbors=10, seed=0, threads=0,
                no_view_conditioning=False, no_refine=False, per_gaussian=False, mesh=None),
    "extract": dict(seed=0, threads=0),
    "eval": dict(seed=0, threads=0),
    "build-model": dict(components=100, annotation=None, mesh=None, seed=0, threads=0),
    "fit-capture": dict(image=None, camera=None, view=0, lambda_rgb=0.1, seed=0, threads=0),
    "retarget": dict(arap_weight=0.1, viewer_columns=16, seed=0, threads=0),
    "export-viewer": dict(components=16, golden=10, seed=0, threads=0),
    "ablate": dict(views=5, frames=6, size=48, iters=700, warp_sigma=0.06,
                   texture_noise=(0.5, 1.5), seeds=[0, 1, 2], seed=0, threads=0),
}


def _resolve(args) -> dict:
    """builtin defaults < config file < explicit flags."""
    cfg = dict(_DEFAULTS[args.command])
    if getattr(args, "config", None):
        with open(args.config) as f:
            file_cfg = json.load(f)
        for k, v in file_cfg.items():
            key = k.replace("-", "_")
            if key in cfg or key in vars(args):
                cfg[key] = tuple(v) if isinstance(v, list) and len(v) == 2 and key.endswith("noise") else v
            else:
                raise SystemExit2(f"unknown config key {k!r}")
    for k, v in vars(args).items():
        if k in ("command", "config"):
            continue
        if v is not None:
            cfg[k] = v
    return cfg


class SystemExit2(Exception):
    pass


def _write_snapshot(outdir: Path, command: str, cfg: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    snap = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    snap["command"] = command
    with open(outdir / "run_config.json", "w") as f:
        json.dump(snap, f, indent=1, sort_keys=True)


def _apply_threads(cfg):
    n = int(cfg.get("threads") or 0)
    if n > 0:
        try:
            import numba

            numba.set_num_threads(n)
        except Exception:
            pass


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_synth(cfg):
    from . import synth
    from .fitting import save_frame_grid
    from .geom import save_ply

    out = Path(cfg["out"])
    corruption = synth.CorruptionConfig(
        view_warp_sigma=cfg["warp_sigma"],
        appearance_gain=tuple(cfg["gain"]),
        texture_noise=tuple(cfg["texture_noise"]),
        noise_across_views=cfg["noise_across_views"],
    )
    mesh, grid, gt = synth.generate_capture(
        cfg["preset"], cfg["expression"], cfg["views"], cfg["frames"], cfg["size"],
        corruption, seed=cfg["seed"], resolution=cfg["resolution"],
    )
    save_frame_grid(out, grid)
    save_ply(out / "mesh.ply", mesh)
    synth.save_gt_bundle(out / "gt", gt)
    ann = synth.make_landmark_annotation(mesh, grid.cameras[0])
    with open(out / "annotation.json", "w") as f:
        json.dump(ann, f, indent=1)
    _write_snapshot(out, "synth", cfg)
    log.info("wrote %d frames to %s", grid.n_views * grid.n_frames, out)
    return 0


def _fit_config_from(cfg, seed):
    from .fitting import FitConfig

    return FitConfig(
        iterations=cfg["iters"], static_iterations=cfg["static_iters"], seed=seed,
        view_conditioning=not cfg["no_view_conditioning"], use_refine=not cfg["no_refine"],
    )


def _cmd_fit(cfg):
    from . import rig as rg
    from .fitting import fit, load_frame_grid, save_field, save_trace_csv
    from .fitting import extract_frame_mesh
    from .geom import load_ply, save_ply
    from .rig import save_rig
    from .splats import SplatSet

    grid_dir = Path(cfg["grid"])
    out = Path(cfg["out"])
    grid = load_frame_grid(grid_dir)
    mesh_path = cfg["mesh"] or (grid_dir / "mesh.ply")
    mesh = load_ply(mesh_path)
    splats = SplatSet.from_mesh(mesh)
    if cfg["per_gaussian"]:
        rig = rg.per_splat_rig(splats)
    else:
        ctrl = rg.select_control_points(splats, min(cfg["controls"], len(splats)), seed=cfg["seed"])
        rig = rg.compute_blend_weights(splats, ctrl, m=cfg["neighbors"])
    fit_cfg = _fit_config_from(cfg, cfg["seed"])
    field, trace = fit(grid, mesh, rig, fit_cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_field(out / "field.bin", field)
    save_rig(out / "rig.bin", rig)
    save_trace_csv(out / "trace.csv", trace)
    mesh_dir = out / "meshes"
    mesh_dir.mkdir(exist_ok=True)
    for t in range(grid.n_frames):
        save_ply(mesh_dir / f"frame_t{t:03d}.ply", extract_frame_mesh(field, mesh, t))
    _write_snapshot(out, "fit", cfg)
    log.info("fit complete: %s", out)
    return 0


def _cmd_extract(cfg):
    from .fitting import extract_frame_mesh, load_field
    from .geom import load_ply, save_ply

    field = load_field(cfg["field"])
    mesh = load_ply(cfg["mesh"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for t in range(field.n_frames):
        save_ply(out / f"frame_t{t:03d}.ply", extract_frame_mesh(field, mesh, t))
    _write_snapshot(out, "extract", cfg)
    return 0


def _cmd_eval(cfg):
    from . import synth
    from .fitting import load_field, load_frame_grid, render_state
    from .geom import load_ply

    grid = load_frame_grid(cfg["grid"])
    fit_dir = Path(cfg["fit"])
    field = load_field(fit_dir / "field.bin")
    out = Path(cfg["out"])
    rows = []
    gt_dir = Path(cfg["grid"]) / "gt"
    for t in range(grid.n_frames):
        gt = load_ply(gt_dir / f"gt_mesh_t{t:03d}.ply")
        ext = load_ply(fit_dir / "meshes" / f"frame_t{t:03d}.ply")
        rows.append(("p2p", 0, t, synth.metric_p2p(ext, gt)))
        rows.append(("nc", 0, t, synth.metric_nc(ext, gt)))
    for v in range(grid.n_views):
        for t in range(grid.n_frames):
            img = render_state(field, v, t)
            rgb = img[..., :3] + (1 - img[..., 3:]) * field.config.background
            rows.append(("psnr", v, t, synth.metric_psnr(rgb, grid.images[v, t])))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write("metric,view,frame,value\n")
        for m, v, t, val in rows:
            f.write(f"{m},{v},{t},{val:.8g}\n")
    _write_snapshot(out.parent, "eval", cfg)
    means = {m: np.mean([r[3] for r in rows if r[0] == m and np.isfinite(r[3])]) for m in ("p2p", "nc", "psnr")}
    print("mean p2p %.5f  mean NC %.5f  mean PSNR %.2f" % (means["p2p"], means["nc"], means["psnr"]))
    return 0


def _collect_mesh_files(paths):
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files += sorted(p.glob("*.ply"))
        else:
            files.append(p)
    return files


def _cmd_build_model(cfg):
    from . import morphable as mo
    from .geom import load_ply

    files = _collect_mesh_files(cfg["meshes"])
    if len(files) < 2:
        raise SystemExit2("need at least two registered meshes")
    meshes = [load_ply(f) for f in files]
    model = mo.build_model(meshes, cfg["components"])
    if cfg["annotation"]:
        with open(cfg["annotation"]) as f:
            ann = json.load(f)
        static = load_ply(cfg["mesh"]) if cfg["mesh"] else meshes[0]
        model = model.with_landmarks(mo.lift_annotation(static, ann))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    mo.save_model(out, model)
    _write_snapshot(out.parent, "build-model", cfg)
    log.info("model with %d components over %d frames -> %s", model.n_components, len(meshes), out)
    return 0


def _cmd_fit_capture(cfg):
    from . import morphable as mo
    from .geom import load_cameras_json, load_ply

    model = mo.load_model(cfg["model"])
    capture = load_ply(cfg["capture"])
    image = camera = None
    if cfg["image"] and cfg["camera"]:
        from PIL import Image

        image = np.asarray(Image.open(cfg["image"]), dtype=float)[..., :3] / 255.0
        camera = load_cameras_json(cfg["camera"])[cfg["view"]]
    weights = mo.FitWeights(lambda_rgb=cfg["lambda_rgb"])
    coeffs, info = mo.fit_to_capture(model, capture, weights, image=image, camera=camera)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump({"coefficients": coeffs.tolist(), "info": {k: v for k, v in info.items() if v is not None}}, f, indent=1)
    _write_snapshot(out.parent, "fit-capture", cfg)
    print("p2p %.6f" % info["p2p"])
    return 0


def _read_source_csv(path):
    rows = []
    with open(path) as f:
        for line in f:
            parts = line.strip().split(",")
            if not parts or not parts[0]:
                continue
            try:
                vals = [float(x) for x in parts]
            except ValueError:
                continue  # header
            rows.append(vals[1:])
    arr = np.array(rows)
    if arr.shape[1] != 40:
        raise SystemExit2(f"source CSV must have 40 landmark columns, got {arr.shape[1]}")
    return arr.reshape(-1, 20, 2)


def _cmd_retarget(cfg):
    from . import morphable as mo
    from .geom import Camera

    model = mo.load_model(cfg["model"])
    src = _read_source_csv(cfg["source"])
    with open(cfg["annotation"]) as f:
        ann = json.load(f)
    cam = Camera.from_dict(ann["camera"])
    weights = mo.FitWeights(arap_weight=cfg["arap_weight"])
    targets = mo.transfer_landmarks(src, model, cam)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    k = min(cfg["viewer_columns"], model.n_components)
    coeffs_all = []
    report = []
    for fidx in range(len(targets)):
        c, info = mo.retarget_fit(model, targets[fidx], weights)
        coeffs_all.append(c)
        report.append(info)
        log.info("frame %d landmark rms %.5f", fidx, info["landmark_rms"])
    header = "frame," + ",".join(f"c{i}" for i in range(k))
    with open(out / "trajectory.csv", "w") as f:
        f.write(header + "\n")
        for i, c in enumerate(coeffs_all):
            f.write(",".join([str(i)] + ["%.8g" % x for x in c[:k]]) + "\n")
    with open(out / "trajectory_full.csv", "w") as f:
        f.write("frame," + ",".join(f"c{i}" for i in range(model.n_components)) + "\n")
        for i, c in enumerate(coeffs_all):
            f.write(",".join([str(i)] + ["%.8g" % x for x in c]) + "\n")
    with open(out / "retarget_report.json", "w") as f:
        json.dump(report, f, indent=1)
    _write_snapshot(out, "retarget", cfg)
    return 0


def _cmd_export_viewer(cfg):
    from . import morphable as mo

    model = mo.load_model(cfg["model"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    mo.export_viewer(model, out, c_viewer=cfg["components"], n_golden=cfg["golden"], seed=cfg["seed"])
    _write_snapshot(out.parent, "export-viewer", cfg)
    return 0


def _cmd_ablate(cfg):
    from . import experiments as ex

    spec = ex.CaptureSpec(
        n_views=cfg["views"], n_frames=cfg["frames"], size=cfg["size"],
        resolution=700, n_controls=250, iterations=cfg["iters"], static_iterations=200,
    )
    rows = []
    for s in cfg["seeds"]:
        vc = ex.ablation_view_conditioning(s, warp_sigma=cfg["warp_sigma"], spec=spec)
        rf = ex.ablation_refine(s, noise=cfg["texture_noise"], spec=spec)
        lb = ex.ablation_lbs(s, spec=spec)
        rows.append({
            "seed": s,
            "p2p_view_cond": vc["with"], "p2p_no_view_cond": vc["without"],
            "p2p_refine": rf["with"], "p2p_no_refine": rf["without"],
            "nc_rig": lb["rig"], "nc_per_gaussian": lb["per_gaussian"],
        })
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys())
    with open(out / "ablate.csv", "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join("%.6g" % r[c] if c != "seed" else str(r[c]) for c in cols) + "\n")
    _write_snapshot(out, "ablate", cfg)
    for r in rows:
        print(
            "seed %d: view-cond p2p %.4f vs %.4f | refine p2p %.4f vs %.4f | NC rig %.4f vs %.4f"
            % (r["seed"], r["p2p_view_cond"], r["p2p_no_view_cond"], r["p2p_refine"],
               r["p2p_no_refine"], r["nc_rig"], r["nc_per_gaussian"])
        )
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "extract": _cmd_extract,
    "eval": _cmd_eval,
    "build-model": _cmd_build_model,
    "fit-capture": _cmd_fit_capture,
    "retarget": _cmd_retarget,
    "export-viewer": _cmd_export_viewer,
    "ablate": _cmd_ablate,
}


def run(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        cfg = _resolve(args)
        _apply_threads(cfg)
        return _COMMANDS[args.command](cfg)
    except SystemExit2 as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        from .fitting import NumericalAbort

        if isinstance(e, NumericalAbort):
            print(f"numerical abort: {e}", file=sys.stderr)
            return 3
        raise


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
