"""Synthetic oracle: procedural characters, scripted ground-truth deformation,
frame-grid rendering with controlled corruption, and evaluation metrics.

World convention: +z points at the canonical camera, +y is down in the image.
Characters are star-shaped around the origin with colored eye patches and a
mouth band; all deformation modes are linear in their amplitude tracks so the
resulting shape sets live in a low-dimensional linear span with known rank.

Corruption reproduces the two failure modes of generated multi-view video:
a smooth per-view warp field (identity at the canonical view v=0) standing in
for multi-view geometric inconsistency, and per-cell appearance gain plus
multiplicative per-frame texture noise U(lo,hi) standing in for appearance
inconsistency.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import ConvexHull

from .fitting import FrameGrid
from .geom import SE3, Camera, TriMesh, save_ply, vertex_normals
from .splats import SplatSet, _render_forward

log = logging.getLogger(__name__)

# angular layout of the face features (radians)
_EYE_AZ = np.deg2rad(20.0)
_EYE_EL = np.deg2rad(18.0)  # up
_EYE_RADIUS = 0.24
_MOUTH_EL = np.deg2rad(-28.0)  # down
_MOUTH_HALF_AZ = np.deg2rad(32.0)
_MOUTH_HALF_EL = np.deg2rad(9.0)

SKIN = np.array([0.76, 0.60, 0.45])
EYE_DARK = np.array([0.08, 0.08, 0.12])
EYE_RIM = np.array([0.93, 0.93, 0.93])
MOUTH_RED = np.array([0.68, 0.12, 0.15])


def _direction(az, el):
    """Unit vector at azimuth az (about the vertical) and elevation el (up)."""
    return np.array([np.sin(az) * np.cos(el), -np.sin(el), np.cos(az) * np.cos(el)])


def _fibonacci_sphere(n):
    i = np.arange(n)
    phi = np.pi * (3.0 - np.sqrt(5.0))
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(1.0 - y * y)
    th = phi * i
    return np.stack([np.cos(th) * r, y, np.sin(th) * r], axis=-1)


def _hull_faces(dirs):
    hull = ConvexHull(dirs)
    faces = hull.simplices.astype(np.int32)
    # orient outward (consistent counter-clockwise front faces)
    v = dirs[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    c = v.mean(axis=1)
    flip = (n * c).sum(axis=1) < 0
    faces[flip] = faces[flip][:, ::-1]
    return faces


def face_regions(mesh: TriMesh) -> dict[str, np.ndarray]:
    """Soft per-vertex weights of the named facial regions, recomputed from
    vertex directions (valid for every character preset)."""
    d = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)

    def patch(center, radius, sharp=0.35):
        ang = np.arccos(np.clip(d @ center, -1, 1))
        return np.clip(1.0 - (ang - radius * (1 - sharp)) / (radius * sharp), 0.0, 1.0) * (ang < radius)

    def smooth_patch(center, radius):
        ang = np.arccos(np.clip(d @ center, -1, 1))
        w = np.cos(np.clip(ang / radius, 0, 1) * np.pi / 2) ** 2
        return np.where(ang < radius, w, 0.0)

    eye_l = smooth_patch(_direction(+_EYE_AZ, _EYE_EL), _EYE_RADIUS)
    eye_r = smooth_patch(_direction(-_EYE_AZ, _EYE_EL), _EYE_RADIUS)
    az = np.arctan2(d[:, 0], d[:, 2])
    el = -np.arcsin(np.clip(d[:, 1], -1, 1))
    in_front = d[:, 2] > 0
    mouth_az = np.clip(1.0 - np.abs(az) / _MOUTH_HALF_AZ, 0, 1)
    mouth_el = np.clip(1.0 - np.abs(el - _MOUTH_EL) / _MOUTH_HALF_EL, 0, 1)
    mouth = np.sin(mouth_az * np.pi / 2) * np.sin(mouth_el * np.pi / 2) * in_front
    lower = mouth * (el < _MOUTH_EL)
    upper = mouth * (el >= _MOUTH_EL)
    # chin: below the mouth, smooth falloff
    chin = np.clip(1.0 - np.abs(el - (_MOUTH_EL - 2 * _MOUTH_HALF_EL)) / (2.5 * _MOUTH_HALF_EL), 0, 1)
    chin = chin * np.clip(1.0 - np.abs(az) / _MOUTH_HALF_AZ, 0, 1) * in_front
    brow = smooth_patch(_direction(+_EYE_AZ, _EYE_EL + 0.28), 0.22) + smooth_patch(
        _direction(-_EYE_AZ, _EYE_EL + 0.28), 0.22
    )
    cheek = smooth_patch(_direction(+2.2 * _EYE_AZ, _MOUTH_EL * 0.4), 0.3) + smooth_patch(
        _direction(-2.2 * _EYE_AZ, _MOUTH_EL * 0.4), 0.3
    )
    return {
        "eye_left": eye_l, "eye_right": eye_r, "mouth": mouth,
        "mouth_lower": lower, "mouth_upper": upper, "chin": chin,
        "brow": np.clip(brow, 0, 1), "cheeks": np.clip(cheek, 0, 1),
    }


def make_character(preset: str, resolution: int = 1000, seed: int = 0) -> TriMesh:
    """Closed genus-0 character head with colored eye patches and a mouth band.

    preset "sphere_face": near-spherical head. preset "blob_creature": seeded
    low-frequency radial bumps. Deterministic per (preset, resolution, seed).
    """
    if preset not in ("sphere_face", "blob_creature"):
        raise ValueError(f"unknown preset {preset!r}")
    rng = np.random.default_rng(seed)
    dirs = _fibonacci_sphere(resolution)
    faces = _hull_faces(dirs)
    radius = np.ones(resolution)
    if preset == "blob_creature":
        for _ in range(4):
            k = rng.normal(size=3) * rng.uniform(1.0, 2.2)
            ph = rng.uniform(0, 2 * np.pi)
            radius += 0.13 * np.sin(dirs @ k + ph)
    verts = dirs * radius[:, None]
    if preset == "sphere_face":
        verts = verts * np.array([1.0, 1.08, 0.96])

    mesh = TriMesh(verts, faces, np.tile(SKIN, (resolution, 1)))
    reg = face_regions(mesh)
    colors = SKIN + rng.uniform(-0.06, 0.06, size=(resolution, 3))
    d = dirs
    for center in (_direction(+_EYE_AZ, _EYE_EL), _direction(-_EYE_AZ, _EYE_EL)):
        ang = np.arccos(np.clip(d @ center, -1, 1))
        rim = (ang < _EYE_RADIUS) & (ang > 0.62 * _EYE_RADIUS)
        pupil = ang <= 0.62 * _EYE_RADIUS
        colors[rim] = EYE_RIM
        colors[pupil] = EYE_DARK
    mouth_core = reg["mouth"] > 0.35
    colors[mouth_core] = MOUTH_RED
    mesh.vertex_colors = np.clip(colors, 0.0, 1.0)
    return mesh


# ---------------------------------------------------------------------------
# motion scripts


@dataclass
class MotionScript:
    """Named amplitude tracks over t in [0,1] driving linear deformation modes
    (direction field x region weight) plus rigid pose tracks."""

    tracks: dict  # name -> callable t -> amplitude
    modes: dict  # name -> (N,3) displacement per unit amplitude
    region_weights: dict  # name -> (N,) in [0,1]
    rigid_tracks: dict = dc_field(default_factory=dict)  # 'yaw'/'pitch'/'roll' (radians), 'shift' -> (3,)

    def validate(self, n_vertices: int):
        for name, mode in self.modes.items():
            if len(mode) != n_vertices:
                raise ValueError(f"mode {name!r} does not match vertex count")
            w = self.region_weights[name]
            if w.min() < 0 or w.max() > 1:
                raise ValueError(f"region weights of {name!r} outside [0,1]")


def _bump(u):
    return np.sin(np.pi * np.clip(u, 0.0, 1.0)) ** 2


def deformation_modes(mesh: TriMesh):
    """The shared linear mode vocabulary every expression script draws from."""
    reg = face_regions(mesh)
    n = len(mesh.vertices)
    d = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    modes = {}
    weights = {}

    w = np.clip(reg["mouth_lower"] + 0.7 * reg["chin"], 0, 1)
    modes["mouth_open"] = np.tile([0.0, 0.30, -0.06], (n, 1)) * w[:, None]
    weights["mouth_open"] = w

    corner = reg["mouth"] * np.clip(np.abs(mesh.vertices[:, 0]) / 0.35, 0, 1)
    sx = np.sign(mesh.vertices[:, 0])
    modes["smile"] = np.stack([sx * 0.14, np.full(n, -0.12), np.zeros(n)], axis=-1) * corner[:, None]
    weights["smile"] = np.clip(corner, 0, 1)

    for side in ("left", "right"):
        w = reg[f"eye_{side}"]
        center = _direction(+_EYE_AZ if side == "left" else -_EYE_AZ, _EYE_EL) * 1.0
        toward = (center[None] - mesh.vertices) * 0.55
        modes[f"blink_{side}"] = toward * w[:, None]
        weights[f"blink_{side}"] = w

    w = reg["brow"]
    modes["brow_raise"] = np.tile([0.0, -0.16, 0.02], (n, 1)) * w[:, None]
    weights["brow_raise"] = w

    w = reg["cheeks"]
    modes["puff"] = d * 0.16 * w[:, None]
    weights["puff"] = w
    return modes, weights


_EXPRESSIONS = {
    "talk": {
        "mouth_open": lambda t: 0.55 * (0.5 - 0.5 * np.cos(4 * np.pi * t)),
        "smile": lambda t: 0.18 * np.sin(np.pi * t),
        "blink_left": lambda t: 0.25 * _bump(3 * t - 1.2),
        "blink_right": lambda t: 0.25 * _bump(3 * t - 1.2),
        "brow_raise": lambda t: 0.12 * np.sin(2 * np.pi * t),
        "puff": lambda t: 0.06 * np.sin(np.pi * t),
    },
    "laugh": {
        "mouth_open": lambda t: 0.45 * _bump(t),
        "smile": lambda t: 0.55 * _bump(t),
        "blink_left": lambda t: 0.30 * _bump(t),
        "blink_right": lambda t: 0.30 * _bump(t),
        "brow_raise": lambda t: 0.18 * _bump(t),
        "puff": lambda t: 0.10 * _bump(t),
    },
    "blink_wave": {
        "blink_left": lambda t: 0.9 * _bump(2 * t),
        "blink_right": lambda t: 0.9 * _bump(2 * t - 1),
        "mouth_open": lambda t: 0.10 * _bump(t),
        "smile": lambda t: 0.12 * np.sin(np.pi * t),
        "brow_raise": lambda t: 0.15 * _bump(2 * t - 0.5),
        "puff": lambda t: 0.04 * _bump(t),
    },
    "pout": {
        "puff": lambda t: 0.6 * _bump(t),
        "mouth_open": lambda t: 0.14 * _bump(t),
        "smile": lambda t: -0.35 * _bump(t),
        "brow_raise": lambda t: -0.12 * _bump(t),
        "blink_left": lambda t: 0.15 * _bump(t - 0.2),
        "blink_right": lambda t: 0.15 * _bump(t - 0.2),
    },
    "surprise": {
        "brow_raise": lambda t: 0.50 * np.clip(2 * t, 0, 1) ** 2 * (3 - 2 * np.clip(2 * t, 0, 1)),
        "mouth_open": lambda t: 0.40 * np.clip(1.8 * t - 0.2, 0, 1),
        "blink_left": lambda t: -0.12 * np.clip(2 * t, 0, 1),
        "blink_right": lambda t: -0.12 * np.clip(2 * t, 0, 1),
        "smile": lambda t: 0.08 * t,
        "puff": lambda t: 0.12 * t,
    },
}

EXPRESSION_NAMES = tuple(_EXPRESSIONS)


def expression_script(mesh: TriMesh, name: str) -> MotionScript:
    """Standard expression clips over the shared mode vocabulary; every mode
    appears in several clips so any four of them span the fifth.

    A "<clip>_move" variant adds rigid head motion (yaw/pitch/shift) on top of
    the expression; "yaw10" is a pure 10-degree rigid yaw ramp."""
    modes, weights = deformation_modes(mesh)
    if name == "yaw10":
        return MotionScript({}, modes, weights, rigid_tracks={"yaw": lambda t: np.deg2rad(10.0) * t})
    rigid = {}
    base = name
    if name.endswith("_move"):
        base = name[: -len("_move")]
        rigid = {
            "yaw": lambda t: np.deg2rad(12.0) * np.sin(2 * np.pi * t),
            "pitch": lambda t: np.deg2rad(5.0) * np.sin(np.pi * t),
            "shift": lambda t: (0.03 * np.sin(np.pi * t), 0.0, 0.02 * np.sin(2 * np.pi * t)),
        }
    if base not in _EXPRESSIONS:
        raise ValueError(f"unknown expression script {name!r}")
    return MotionScript(dict(_EXPRESSIONS[base]), modes, weights, rigid_tracks=rigid)


def animate(mesh: TriMesh, script: MotionScript, n_frames: int):
    """Apply the script: per frame, linear mode displacements then the rigid
    ground-truth pose. Returns (meshes, poses, amplitude table)."""
    script.validate(len(mesh.vertices))
    frames = []
    poses = []
    amps = []
    for i in range(n_frames):
        t = 0.0 if n_frames == 1 else i / (n_frames - 1)
        verts = mesh.vertices.copy()
        row = {}
        for name, fn in script.tracks.items():
            a = float(fn(t))
            if not np.isfinite(a):
                raise ValueError(f"track {name!r} non-finite at t={t}")
            row[name] = a
            verts = verts + a * script.modes[name]
        yaw = float(script.rigid_tracks.get("yaw", lambda _: 0.0)(t))
        pitch = float(script.rigid_tracks.get("pitch", lambda _: 0.0)(t))
        roll = float(script.rigid_tracks.get("roll", lambda _: 0.0)(t))
        shift = np.asarray(script.rigid_tracks.get("shift", lambda _: (0.0, 0.0, 0.0))(t), dtype=float)
        pose = (
            SE3.from_axis_angle([0.0, 0.0, roll])
            .compose(SE3.from_axis_angle([pitch, 0.0, 0.0]))
            .compose(SE3.from_axis_angle([0.0, yaw, 0.0]))
        )
        pose = SE3(pose.rotation, shift)
        row.update({"yaw": yaw, "pitch": pitch, "roll": roll})
        if yaw == 0.0 and pitch == 0.0 and roll == 0.0 and not shift.any():
            out = verts
        else:
            out = pose.apply(verts)
        frames.append(TriMesh(out, mesh.faces.copy(), mesh.vertex_colors.copy()))
        poses.append(pose)
        amps.append(row)
    return frames, poses, amps


# ---------------------------------------------------------------------------
# frame grid rendering with corruption


@dataclass
class CorruptionConfig:
    view_warp_sigma: float = 0.0  # scene units; smooth per-view displacement amplitude
    appearance_gain: tuple = (1.0, 1.0)  # per-(v,t) RGB gain range
    texture_noise: tuple = (1.0, 1.0)  # multiplicative U(lo,hi) on vertex colors
    noise_across_views: bool = False  # default: per-t noise shared across views

    def __post_init__(self):
        if self.view_warp_sigma < 0:
            raise ValueError("view_warp_sigma must be >= 0")
        for lo, hi in (self.appearance_gain, self.texture_noise):
            if lo > hi:
                raise ValueError("range lo must be <= hi")


@dataclass
class GtBundle:
    meshes: list
    poses: list
    amplitudes: list
    base_mesh: TriMesh


def grid_cameras(n_views: int, size: int = 64, azimuth_span_deg: float = 120.0,
                 elevation_deg: float = 0.0, radius: float = 3.2, focal: float | None = None):
    """Canonical camera first (azimuth 0), then n-1 views over the orbit span
    (the sweep sample nearest azimuth 0 is dropped to keep V cameras total)."""
    if n_views == 1:
        az = [0.0]
    else:
        half = azimuth_span_deg / 2.0
        azs = np.linspace(-half, half, n_views)
        drop = int(np.argmin(np.abs(azs)))
        az = [0.0] + [a for i, a in enumerate(azs) if i != drop]
    return [_single_orbit_cam(a, radius, elevation_deg, focal, size) for a in az]


def _single_orbit_cam(azimuth_deg, radius, elevation_deg, focal, size):
    from .geom import look_at_camera

    a = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye = radius * np.array([np.sin(a) * np.cos(el), np.sin(el), np.cos(a) * np.cos(el)])
    return look_at_camera(eye, (0, 0, 0), (0.0, -1.0, 0.0), focal or float(size), size, size)


def _warp_field(rng: np.random.Generator, sigma: float):
    ks = rng.uniform(2.5, 5.0, size=3)[:, None] * _rand_units(rng, 3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    dirs = _rand_units(rng, 3)
    amps = sigma * rng.uniform(0.5, 1.0, size=3)

    def warp(x):
        out = x.copy()
        for j in range(3):
            out = out + amps[j] * np.sin(x @ ks[j] + phases[j])[:, None] * dirs[j]
        return out

    return warp


def _rand_units(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def render_grid(frames: list, cams: list, corruption: CorruptionConfig | None = None,
                seed: int = 0, splat_scale: float = 0.62, background: float = 1.0):
    """Render the (v,t) grid from ground-truth frame meshes.

    The canonical view v=0 is never warped; views v>0 get a smooth seeded
    displacement field when view_warp_sigma > 0. Appearance gain is drawn per
    grid cell, texture noise per frame (shared across views unless
    noise_across_views). Returns (FrameGrid, masks already inside)."""
    corruption = corruption or CorruptionConfig()
    V, T = len(cams), len(frames)
    H = cams[0].height
    W = cams[0].width
    images = np.zeros((V, T, H, W, 3))
    masks = np.zeros((V, T, H, W))
    rng = np.random.default_rng(seed)
    warps = [None] + [
        _warp_field(np.random.default_rng(rng.integers(2**63)), corruption.view_warp_sigma)
        for _ in range(V - 1)
    ]
    lo_g, hi_g = corruption.appearance_gain
    lo_n, hi_n = corruption.texture_noise
    n_verts = len(frames[0].vertices)
    noise_t = rng.uniform(lo_n, hi_n, size=(T, n_verts, 1))
    noise_vt = rng.uniform(lo_n, hi_n, size=(V, T, n_verts, 1))
    gains = rng.uniform(lo_g, hi_g, size=(V, T, 3))
    for v in range(V):
        for t in range(T):
            mesh = frames[t]
            verts = mesh.vertices
            if v > 0 and corruption.view_warp_sigma > 0:
                verts = warps[v](verts)
            colors = mesh.vertex_colors
            noise = noise_vt[v, t] if corruption.noise_across_views else noise_t[t]
            colors = np.clip(colors * noise * gains[v, t], 0.0, 1.0)
            work = TriMesh(verts, mesh.faces, colors)
            splats = SplatSet.from_mesh(work, splat_scale)
            img, _ = _render_forward(splats, cams[v])
            images[v, t] = img[..., :3] + (1.0 - img[..., 3:4]) * background
            masks[v, t] = (img[..., 3] > 0.5).astype(float)
    return FrameGrid(images, masks, list(cams), view0_index=0)


def generate_capture(preset: str, expression: str, n_views: int, n_frames: int, size: int = 64,
                     corruption: CorruptionConfig | None = None, seed: int = 0, resolution: int = 1000):
    """One full oracle capture: character, script, GT frames, corrupted grid."""
    mesh = make_character(preset, resolution=resolution, seed=seed)
    script = expression_script(mesh, expression)
    frames, poses, amps = animate(mesh, script, n_frames)
    cams = grid_cameras(n_views, size=size)
    grid = render_grid(frames, cams, corruption, seed=seed + 1)
    gt = GtBundle(frames, poses, amps, mesh)
    return mesh, grid, gt


def save_gt_bundle(outdir, gt: GtBundle):
    from pathlib import Path

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(gt.meshes):
        save_ply(out / f"gt_mesh_t{t:03d}.ply", m)
    with open(out / "gt_poses.json", "w") as f:
        json.dump(
            [{"rotation_wxyz": list(map(float, p.rotation)), "translation": list(map(float, p.translation))}
             for p in gt.poses],
            f, indent=1,
        )
    with open(out / "script.json", "w") as f:
        json.dump({"amplitudes": gt.amplitudes}, f, indent=1)


# ---------------------------------------------------------------------------
# landmark annotation (20 points: 6 per eye, 8 on the mouth)


def make_landmark_annotation(mesh: TriMesh, cam: Camera, image_name: str = "frame_v000_t000.png") -> dict:
    """2D landmark annotation on a frontal render: points along the eye patch
    boundaries and the mouth band outline at predefined angles."""
    pts = []
    for region, center_dir, radius, count in (
        ("left_eye", _direction(+_EYE_AZ, _EYE_EL), 0.8 * _EYE_RADIUS, 6),
        ("right_eye", _direction(-_EYE_AZ, _EYE_EL), 0.8 * _EYE_RADIUS, 6),
    ):
        up = np.array([0.0, -1.0, 0.0])
        e1 = np.cross(up, center_dir)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(center_dir, e1)
        for k in range(count):
            ang = 2 * np.pi * k / count
            d = center_dir * np.cos(radius) + (np.cos(ang) * e1 + np.sin(ang) * e2) * np.sin(radius)
            x3 = _surface_point(mesh, d)
            px, _, ok = cam.project(x3)
            if not ok:
                raise ValueError("landmark projects behind the camera")
            pts.append({"xy": [float(px[0]), float(px[1])], "region": region})
    for k in range(8):
        ang = 2 * np.pi * k / 8
        az = _MOUTH_HALF_AZ * 0.8 * np.cos(ang)
        el = _MOUTH_EL + _MOUTH_HALF_EL * 0.8 * np.sin(ang)
        x3 = _surface_point(mesh, _direction(az, el))
        px, _, ok = cam.project(x3)
        if not ok:
            raise ValueError("landmark projects behind the camera")
        pts.append({"xy": [float(px[0]), float(px[1])], "region": "mouth"})
    return {"image": image_name, "camera": cam.to_dict(), "points": pts}


def _surface_point(mesh: TriMesh, direction):
    d = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    i = int(np.argmax(d @ direction))
    return mesh.vertices[i]


# ---------------------------------------------------------------------------
# metrics


def metric_p2p(pred: TriMesh, gt: TriMesh) -> float:
    """Mean vertex-to-vertex distance normalized by the GT bounding-box diagonal."""
    if not np.array_equal(pred.faces, gt.faces) or len(pred.vertices) != len(gt.vertices):
        raise ValueError("metric_p2p requires registered meshes (same topology)")
    d = np.linalg.norm(pred.vertices - gt.vertices, axis=1)
    return float(d.mean() / gt.bbox_diagonal())


def metric_nc(pred: TriMesh, gt: TriMesh) -> float:
    """Mean (1 - cos) deviation between registered vertex normals; 0 is perfect."""
    if not np.array_equal(pred.faces, gt.faces) or len(pred.vertices) != len(gt.vertices):
        raise ValueError("metric_nc requires registered meshes (same topology)")
    np_, ng = vertex_normals(pred), vertex_normals(gt)
    cos = np.clip((np_ * ng).sum(axis=1), -1.0, 1.0)
    return float(np.mean(1.0 - cos))


def metric_psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0,1]; +inf for identical images."""
    if img_a.shape != img_b.shape:
        raise ValueError("psnr requires equal shapes")
    mse = float(np.mean((np.asarray(img_a, dtype=float) - np.asarray(img_b, dtype=float)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
