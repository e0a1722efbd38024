"""Shared geometric primitives: triangle meshes, pinhole cameras, rigid transforms.

Conventions fixed here and honored everywhere else:
  * quaternions stored (w, x, y, z), renormalized after composition/optimizer steps
  * camera poses are world-to-camera
  * pixel (row i, col j) samples the continuous image point (j + 0.5, i + 0.5)
  * points with camera-space depth <= NEAR_PLANE are invalid for projection
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import so3

log = logging.getLogger(__name__)

NEAR_PLANE = 1e-4


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class SE3:
    """Rigid transform as unit quaternion (w,x,y,z) + translation."""

    rotation: np.ndarray = field(default_factory=lambda: so3.IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @staticmethod
    def identity() -> "SE3":
        return SE3()

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "SE3":
        return SE3(so3.mat_to_quat(R), np.asarray(t, dtype=float))

    @staticmethod
    def from_axis_angle(w: np.ndarray, t=(0.0, 0.0, 0.0)) -> "SE3":
        return SE3(so3.axis_angle_to_quat(np.asarray(w, dtype=float)), t)

    def matrix(self) -> np.ndarray:
        return so3.quat_to_mat(self.rotation)

    def compose(self, other: "SE3") -> "SE3":
        """self o other: apply `other` first, then `self`. Renormalizes."""
        q = so3.quat_normalize(so3.quat_mul(self.rotation, other.rotation))
        t = self.apply(other.translation)
        return SE3(q, t)

    def inverse(self) -> "SE3":
        qc = so3.quat_conjugate(so3.quat_normalize(self.rotation))
        return SE3(qc, -so3.quat_rotate(qc, self.translation))

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return so3.quat_rotate(self.rotation, x) + self.translation


def se3_apply(T: SE3, x) -> np.ndarray:
    return T.apply(x)


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. `pose` maps world points into the camera frame."""

    pose: SE3
    focal: float
    principal_point: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "principal_point", np.asarray(self.principal_point, dtype=float))

    def project(self, x):
        """Project one world point. Returns (pixel, depth, valid)."""
        px, z, ok = self.project_points(np.asarray(x, dtype=float)[None])
        return px[0], float(z[0]), bool(ok[0])

    def project_points(self, pts: np.ndarray):
        """Vectorized projection. Returns (pixels (N,2), depth (N,), valid (N,))."""
        xc = self.pose.apply(pts)
        z = xc[..., 2]
        valid = z > NEAR_PLANE
        zs = np.where(valid, z, 1.0)
        u = self.focal * xc[..., 0] / zs + self.principal_point[0]
        v = self.focal * xc[..., 1] / zs + self.principal_point[1]
        return np.stack([u, v], axis=-1), z, valid

    def to_dict(self) -> dict:
        return {
            "rotation_wxyz": [float(v) for v in self.pose.rotation],
            "translation": [float(v) for v in self.pose.translation],
            "focal": float(self.focal),
            "principal_point": [float(v) for v in self.principal_point],
            "width": int(self.width),
            "height": int(self.height),
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            pose=SE3(np.array(d["rotation_wxyz"], dtype=float), np.array(d["translation"], dtype=float)),
            focal=float(d["focal"]),
            principal_point=np.array(d["principal_point"], dtype=float),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def camera_project(cam: Camera, x):
    """Pinhole projection of a single point; invalid when depth <= NEAR_PLANE."""
    return cam.project(x)


def look_at_camera(eye, target, up, focal, width, height) -> Camera:
    """World-to-camera pose with +z forward (into the scene), +x right, +y down."""
    eye = np.asarray(eye, dtype=float)
    target = np.asarray(target, dtype=float)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=float)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        # up parallel to view direction: pick any perpendicular
        up = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)  # world-to-camera rows
    t = -R @ eye
    return Camera(
        pose=SE3(so3.mat_to_quat(R), t),
        focal=focal,
        principal_point=np.array([width / 2.0, height / 2.0]),
        width=width,
        height=height,
    )


def orbit_cameras(
    n: int,
    radius: float,
    target=(0.0, 0.0, 0.0),
    azimuth_span_deg: float = 360.0,
    elevation_deg: float = 0.0,
    focal: float | None = None,
    width: int = 64,
    height: int = 64,
) -> list[Camera]:
    """Cameras at equal azimuth steps on a circle, all looking at `target`.

    A span of 360 distributes endpoints-exclusive; any other span is inclusive
    of both ends. Azimuth 0 looks down -z from +z, i.e. the +z axis is "front".
    """
    if focal is None:
        focal = float(width)
    target = np.asarray(target, dtype=float)
    if azimuth_span_deg >= 360.0:
        az = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    else:
        half = np.deg2rad(azimuth_span_deg) / 2.0
        az = np.linspace(-half, half, n)
    el = np.deg2rad(elevation_deg)
    cams = []
    for a in az:
        eye = target + radius * np.array([np.sin(a) * np.cos(el), np.sin(el), np.cos(a) * np.cos(el)])
        cams.append(look_at_camera(eye, target, (0.0, -1.0, 0.0), focal, width, height))
    return cams


def save_cameras_json(path, cams: list[Camera]):
    with open(path, "w") as f:
        json.dump([c.to_dict() for c in cams], f, indent=1)


def load_cameras_json(path) -> list[Camera]:
    with open(path) as f:
        return [Camera.from_dict(d) for d in json.load(f)]


# ---------------------------------------------------------------------------
# triangle meshes


@dataclass
class TriMesh:
    """Triangle mesh with per-vertex RGB colors in [0,1]."""

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32)
        self.vertex_colors = np.ascontiguousarray(self.vertex_colors, dtype=float)
        self.validate()

    def validate(self):
        n = len(self.vertices)
        if self.faces.size and self.faces.max() >= n:
            raise ValueError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise ValueError("negative face index")
        if len(self.vertex_colors) != n:
            raise ValueError("vertex_colors length must equal vertex count")

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(), self.vertex_colors.copy())

    def with_vertices(self, verts: np.ndarray) -> "TriMesh":
        return TriMesh(np.asarray(verts, dtype=float), self.faces, self.vertex_colors)

    def bbox_diagonal(self) -> float:
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    def mean_edge_length(self) -> float:
        v = self.vertices
        f = self.faces
        e = np.concatenate(
            [v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 1]], v[f[:, 0]] - v[f[:, 2]]]
        )
        return float(np.linalg.norm(e, axis=1).mean())


def face_normals(mesh: TriMesh, normalized: bool = True) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalized:
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(ln < 1e-20, 1.0, ln)
    return n


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized face normals summed, then unit)."""
    fn = face_normals(mesh, normalized=False)  # magnitude = 2 * area
    vn = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(vn, mesh.faces[:, k], fn)
    ln = np.linalg.norm(vn, axis=1)
    degenerate = ln < 1e-20
    if degenerate.any():
        log.warning("%d vertices have only zero-area incident faces; assigning +z", int(degenerate.sum()))
        vn[degenerate] = (0.0, 0.0, 1.0)
        ln[degenerate] = 1.0
    return vn / ln[:, None]


def mesh_depth_render(mesh: TriMesh, cam: Camera):
    """Z-buffer rasterization of a mesh.

    Returns (depth (H,W) with inf where empty, vis (H,W) int32 with the index
    of the dominant visible vertex of the covering triangle, -1 where empty).
    Depth is interpolated perspective-correctly (linear in 1/z).
    """
    H, W = cam.height, cam.width
    depth = np.full((H, W), np.inf)
    vis = np.full((H, W), -1, dtype=np.int32)
    px, z, valid = cam.project_points(mesh.vertices)
    for tri in mesh.faces:
        if not valid[tri].all():
            continue
        p = px[tri]  # (3,2)
        lo = np.floor(p.min(axis=0) - 0.5).astype(int)
        hi = np.ceil(p.max(axis=0) - 0.5).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], W - 1), min(hi[1], H - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        # barycentric coordinates via signed areas
        d = np.stack([gx, gy], axis=-1)
        a, b, c = p[0], p[1], p[2]
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-12:
            continue
        l1 = ((d[..., 0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (d[..., 1] - a[1])) / det
        l2 = ((b[0] - a[0]) * (d[..., 1] - a[1]) - (d[..., 0] - a[0]) * (b[1] - a[1])) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        bc = np.stack([l0, l1, l2], axis=-1)
        inv_z = bc @ (1.0 / z[tri])
        zpix = 1.0 / inv_z
        sub = depth[y0 : y1 + 1, x0 : x1 + 1]
        win = inside & (zpix < sub)
        sub[win] = zpix[win]
        # perspective-correct weights pick the dominant corner
        wpc = bc / z[tri]
        vidx = tri[np.argmax(wpc, axis=-1)]
        vsub = vis[y0 : y1 + 1, x0 : x1 + 1]
        vsub[win] = vidx[win]
    return depth, vis


def visible_vertices(mesh: TriMesh, cam: Camera) -> np.ndarray:
    """Indices of vertices that win at least one pixel of the depth render."""
    _, vis = mesh_depth_render(mesh, cam)
    ids = np.unique(vis)
    return ids[ids >= 0]


# ---------------------------------------------------------------------------
# mesh I/O


def save_obj(path, mesh: TriMesh):
    """OBJ with a per-vertex `vc` color extension line following each `v`."""
    with open(path, "w") as f:
        for v, c in zip(mesh.vertices, mesh.vertex_colors):
            f.write("v %.9g %.9g %.9g\n" % tuple(v))
            f.write("vc %.9g %.9g %.9g\n" % tuple(c))
        for tri in mesh.faces:
            f.write("f %d %d %d\n" % (tri[0] + 1, tri[1] + 1, tri[2] + 1))


def load_obj(path) -> TriMesh:
    verts, colors, faces = [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:  # v x y z r g b variant
                    colors.append([float(x) for x in parts[4:7]])
            elif parts[0] == "vc":
                colors.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
    verts = np.array(verts)
    if not colors:
        colors = np.full_like(verts, 0.5)
    return TriMesh(verts, np.array(faces, dtype=np.int32), np.array(colors))


def save_ply(path, mesh: TriMesh):
    """Binary little-endian PLY with float positions and uchar red/green/blue."""
    n, m = len(mesh.vertices), len(mesh.faces)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {m}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    cols = np.clip(np.round(mesh.vertex_colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for v, c in zip(mesh.vertices.astype("<f4"), cols):
            f.write(struct.pack("<fffBBB", v[0], v[1], v[2], c[0], c[1], c[2]))
        for tri in mesh.faces:
            f.write(struct.pack("<Biii", 3, tri[0], tri[1], tri[2]))


def load_ply(path) -> TriMesh:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        n = m = 0
        props = []
        element = None
        while True:
            line = f.readline().strip()
            if line == b"end_header":
                break
            parts = line.split()
            if parts[0] == b"format" and parts[1] != b"binary_little_endian":
                raise ValueError("only binary little-endian PLY supported")
            if parts[0] == b"element":
                element = parts[1]
                if element == b"vertex":
                    n = int(parts[2])
                else:
                    m = int(parts[2])
            elif parts[0] == b"property" and element == b"vertex":
                props.append((parts[-1].decode(), parts[1].decode()))
        names = [p[0] for p in props]
        if names[:3] != ["x", "y", "z"]:
            raise ValueError("unsupported vertex layout")
        vert_fmt = "<" + "".join({"float": "f", "uchar": "B"}[t] for _, t in props)
        size = struct.calcsize(vert_fmt)
        verts = np.empty((n, 3))
        cols = np.full((n, 3), 0.5)
        has_rgb = {"red", "green", "blue"} <= set(names)
        for i in range(n):
            rec = struct.unpack(vert_fmt, f.read(size))
            verts[i] = rec[:3]
            if has_rgb:
                j = names.index("red")
                cols[i] = np.array(rec[j : j + 3]) / 255.0
        faces = np.empty((m, 3), dtype=np.int32)
        for i in range(m):
            (cnt,) = struct.unpack("<B", f.read(1))
            idx = struct.unpack("<%di" % cnt, f.read(4 * cnt))
            if cnt != 3:
                raise ValueError("only triangle faces supported")
            faces[i] = idx
    return TriMesh(verts, faces, cols)
