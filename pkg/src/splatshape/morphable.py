"""PCA blendshape model over registered frame meshes, plus the downstream
surfaces: coefficient fitting to captures, 2D-landmark lifting, expression
transfer from tracked source landmarks, and ARAP-regularized retargeting.

All frame meshes must share one vertex ordering and face list; the model is
mean + orthonormal basis over stacked vertex coordinates. Relative errors are
normalized by the mean shape's bounding-box diagonal.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import nets
from .geom import Camera, TriMesh, mesh_depth_render
from .splats import SplatSet, _render_forward, _render_backward_from_cache

log = logging.getLogger(__name__)

LANDMARK_LAYOUT = ("left_eye",) * 6 + ("right_eye",) * 6 + ("mouth",) * 8
LIFT_MAX_DIST_PX = 25.0


@dataclass
class FitWeights:
    lambda_rgb: float = 0.1
    landmark_weight: float = 1.0
    arap_weight: float = 0.1
    coeff_l2: float = 0.01

    def __post_init__(self):
        for v in (self.lambda_rgb, self.landmark_weight, self.arap_weight, self.coeff_l2):
            if v < 0:
                raise ValueError("weights must be non-negative")


@dataclass
class BlendshapeModel:
    mean: np.ndarray  # (3N,)
    basis: np.ndarray  # (C,3N), orthonormal rows
    singular_values: np.ndarray  # (C,)
    faces: np.ndarray
    vertex_colors: np.ndarray
    bbox_diag: float
    landmark_indices: np.ndarray | None = None  # 20 vertex ids: 6 left eye, 6 right eye, 8 mouth

    @property
    def n_components(self) -> int:
        return len(self.basis)

    @property
    def n_vertices(self) -> int:
        return len(self.mean) // 3

    def mean_mesh(self) -> TriMesh:
        return TriMesh(self.mean.reshape(-1, 3), self.faces.copy(), self.vertex_colors.copy())

    def with_landmarks(self, indices) -> "BlendshapeModel":
        idx = np.asarray(indices, dtype=np.int64)
        if len(idx) != 20 or idx.min() < 0 or idx.max() >= self.n_vertices:
            raise ValueError("landmark_indices must be 20 valid vertex ids")
        return BlendshapeModel(self.mean, self.basis, self.singular_values, self.faces,
                               self.vertex_colors, self.bbox_diag, idx)


def build_model(frame_meshes: list[TriMesh], n_components: int) -> BlendshapeModel:
    """PCA over the stacked vertex coordinates of registered frame meshes.

    Basis rows are the top right singular vectors of the centered data matrix
    with a deterministic sign convention (largest-magnitude entry positive).
    n_components is capped at frames-1."""
    if len(frame_meshes) < 2:
        raise ValueError("need at least two frames")
    ref = frame_meshes[0]
    for m in frame_meshes[1:]:
        if not np.array_equal(m.faces, ref.faces) or len(m.vertices) != len(ref.vertices):
            raise ValueError("frame meshes must share topology")
    data = np.stack([m.vertices.reshape(-1) for m in frame_meshes])  # (F, 3N)
    mean = data.mean(axis=0)
    centered = data - mean
    cap = min(len(frame_meshes) - 1, centered.shape[1])
    if n_components > cap:
        log.warning("n_components %d capped at %d (frames - 1)", n_components, cap)
    c = min(n_components, cap)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:c]
    sign = np.sign(basis[np.arange(c), np.abs(basis).argmax(axis=1)])
    basis = basis * sign[:, None]
    mean_mesh = TriMesh(mean.reshape(-1, 3), ref.faces.copy(), ref.vertex_colors.copy())
    return BlendshapeModel(
        mean=mean, basis=basis, singular_values=s[:c].copy(),
        faces=ref.faces.copy(), vertex_colors=ref.vertex_colors.copy(),
        bbox_diag=mean_mesh.bbox_diagonal(),
    )


def synthesize(model: BlendshapeModel, coeffs: np.ndarray) -> TriMesh:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (model.n_components,):
        raise ValueError(f"expected {model.n_components} coefficients")
    verts = (model.mean + coeffs @ model.basis).reshape(-1, 3)
    return TriMesh(verts, model.faces.copy(), model.vertex_colors.copy())


def project_coeffs(model: BlendshapeModel, mesh: TriMesh) -> np.ndarray:
    """Closed-form least squares (orthonormal basis => projection)."""
    return model.basis @ (mesh.vertices.reshape(-1) - model.mean)


def _clone_splats(mesh: TriMesh, log_scales: np.ndarray) -> SplatSet:
    ss = SplatSet.from_mesh(mesh)
    return ss.replace(log_scales=log_scales)


def fit_to_capture(model: BlendshapeModel, capture: TriMesh, weights: FitWeights | None = None,
                   image: np.ndarray | None = None, camera: Camera | None = None,
                   steps: int = 60, lr: float = 0.02, background: float = 1.0):
    """Fit coefficients to a registered capture.

    Geometry-only (no image): the exact closed-form projection. With an image
    and camera: the projection initializes a gradient refinement of
    mean-squared point distance plus lambda_rgb times a pixel Huber between the
    rendered splat clone of the reconstruction and the capture image.
    Returns (coeffs, info) with info holding the final l_geo and l_rgb."""
    weights = weights or FitWeights()
    if not np.array_equal(capture.faces, model.faces):
        raise ValueError("capture must be registered to the model topology")
    target = capture.vertices.reshape(-1)
    coeffs = model.basis @ (target - model.mean)
    n = model.n_vertices

    def l_geo(c):
        d = (model.mean + c @ model.basis) - target
        return float((d * d).sum() / n)

    if image is None or camera is None:
        recon = model.mean + coeffs @ model.basis
        res = np.linalg.norm((recon - target).reshape(-1, 3), axis=1).mean()
        return coeffs, {"l_geo": l_geo(coeffs), "l_rgb": None, "p2p": res / model.bbox_diag}

    # frozen clone scales from the mean shape
    base_ls = SplatSet.from_mesh(model.mean_mesh()).log_scales
    delta = 0.05  # pixel Huber width for the rgb term

    state = nets.AdamState.for_tensors([coeffs])
    last = {}
    for _ in range(steps):
        verts_flat = model.mean + coeffs @ model.basis
        dgeo = (verts_flat - target)
        geo = float((dgeo * dgeo).sum() / n)
        ggeo = 2.0 * dgeo / n

        mesh_c = TriMesh(verts_flat.reshape(-1, 3), model.faces, model.vertex_colors)
        splats = _clone_splats(mesh_c, base_ls)
        img, rcache = _render_forward(splats, camera)
        comp = img[..., :3] + (1.0 - img[..., 3:4]) * background
        e = comp - image
        ae = np.abs(e)
        quad = ae <= delta
        h = np.where(quad, 0.5 * e * e, delta * (ae - 0.5 * delta))
        rgb = float(h.mean())
        de = np.where(quad, e, delta * np.sign(e)) / e.size
        gimg = np.zeros_like(img)
        gimg[..., :3] = de
        gimg[..., 3] = -(de.sum(axis=-1)) * background
        gx, _, _, _ = _render_backward_from_cache(splats, rcache, gimg)
        gverts = ggeo + weights.lambda_rgb * gx.reshape(-1)
        gc = model.basis @ gverts
        nets.adam_step(state, [coeffs], [gc], lr)
        last = {"l_geo": geo, "l_rgb": rgb}

    recon = (model.mean + coeffs @ model.basis).reshape(-1, 3)
    p2p = np.linalg.norm(recon - capture.vertices, axis=1).mean() / model.bbox_diag
    last["p2p"] = p2p
    return coeffs, last


# ---------------------------------------------------------------------------
# ARAP


class ArapEnergy:
    """Cell-based as-rigid-as-possible energy against a fixed reference mesh.

    Cotangent weights (clamped >= 0, degenerate triangles dropped) and the
    one-ring structure are precomputed from the reference. Per evaluation the
    best-fit per-vertex rotations come from det-corrected 3x3 SVDs; the
    returned gradient holds those rotations fixed (local-global treatment)."""

    def __init__(self, reference: TriMesh):
        self.reference = reference
        v = reference.vertices
        f = reference.faces
        n = len(v)
        wdict = {}
        for tri in f:
            for k in range(3):
                i, j, o = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
                u1 = v[i] - v[o]
                u2 = v[j] - v[o]
                cr = np.linalg.norm(np.cross(u1, u2))
                cot = 0.0 if cr < 1e-12 else float(u1 @ u2) / cr
                key = (min(i, j), max(i, j))
                wdict[key] = wdict.get(key, 0.0) + 0.5 * cot
        edges = np.array(sorted(wdict), dtype=np.int64)
        w = np.maximum(np.array([wdict[tuple(e)] for e in edges]), 0.0)
        # directed edge lists (i->j and j->i) for one-ring sums
        self.ei = np.concatenate([edges[:, 0], edges[:, 1]])
        self.ej = np.concatenate([edges[:, 1], edges[:, 0]])
        self.w = np.concatenate([w, w])
        self.n = n
        self.rest_e = reference.vertices[self.ei] - reference.vertices[self.ej]

    def rotations(self, mesh: TriMesh) -> np.ndarray:
        cur_e = mesh.vertices[self.ei] - mesh.vertices[self.ej]
        S = np.zeros((self.n, 3, 3))
        contrib = self.w[:, None, None] * (cur_e[:, :, None] * self.rest_e[:, None, :])
        np.add.at(S, self.ei, contrib)
        U, _, Vt = np.linalg.svd(S)
        R = U @ Vt
        det = np.linalg.det(R)
        flip = det < 0
        if flip.any():
            U2 = U[flip].copy()
            U2[:, :, 2] *= -1
            R[flip] = U2 @ Vt[flip]
        return R

    def __call__(self, mesh: TriMesh):
        if not np.array_equal(mesh.faces, self.reference.faces):
            raise ValueError("ARAP requires the reference topology")
        R = self.rotations(mesh)
        cur_e = mesh.vertices[self.ei] - mesh.vertices[self.ej]
        rot_e = np.einsum("nij,nj->ni", R[self.ei], self.rest_e)
        diff = cur_e - rot_e
        energy = float((self.w * (diff * diff).sum(axis=1)).sum())
        # d/dv_i with rotations fixed: 2 sum_j w_ij (2 e_ij - (R_i + R_j) rest_ij)
        term = self.w[:, None] * (2.0 * cur_e - rot_e - np.einsum("nij,nj->ni", R[self.ej], self.rest_e))
        grad = np.zeros((self.n, 3))
        np.add.at(grad, self.ei, 2.0 * term)
        return energy, grad


def arap_energy(mesh: TriMesh, reference: TriMesh):
    """Energy and per-vertex gradient of deforming `reference` into `mesh`."""
    return ArapEnergy(reference)(mesh)


# ---------------------------------------------------------------------------
# landmarks


def lift_landmarks(mesh: TriMesh, cam: Camera, points2d) -> np.ndarray:
    """Snap 2D annotations to visible mesh vertices.

    For each 2D point, among the vertices marked visible by the depth render,
    return the one whose projection is nearest. A point with no visible vertex
    within LIFT_MAX_DIST_PX raises, naming the point."""
    _, vis = mesh_depth_render(mesh, cam)
    ids = np.unique(vis)
    ids = ids[ids >= 0]
    if len(ids) == 0:
        raise ValueError("no visible vertices in this view")
    px, _, ok = cam.project_points(mesh.vertices[ids])
    ids = ids[ok]
    px = px[ok]
    out = np.empty(len(points2d), dtype=np.int64)
    for k, p in enumerate(np.asarray(points2d, dtype=float)):
        d = np.linalg.norm(px - p, axis=1)
        j = int(d.argmin())
        if d[j] > LIFT_MAX_DIST_PX:
            raise ValueError(f"landmark {k} at {p.tolist()} has no visible vertex within {LIFT_MAX_DIST_PX} px")
        out[k] = ids[j]
    return out


def lift_annotation(mesh: TriMesh, annotation: dict) -> np.ndarray:
    """Lift a landmark annotation file; validates the 6/6/8 region layout."""
    regions = [p["region"] for p in annotation["points"]]
    if tuple(regions) != LANDMARK_LAYOUT:
        raise ValueError("annotation must contain 6 left_eye, 6 right_eye, 8 mouth points in order")
    cam = Camera.from_dict(annotation["camera"])
    pts = [p["xy"] for p in annotation["points"]]
    return lift_landmarks(mesh, cam, pts)


def _region_slices():
    return {"left_eye": slice(0, 6), "right_eye": slice(6, 12), "mouth": slice(12, 20)}


def transfer_landmarks(source_traj: np.ndarray, model: BlendshapeModel, cam: Camera) -> np.ndarray:
    """Map per-frame source landmark motion onto the character.

    source_traj: (F,20,2) pixels, frame 0 neutral, layout 6/6/8. Per region
    the source displacement is scaled per axis by the ratio of character to
    source region bbox extent in the camera image plane, applied to the
    character's canonical 2D landmarks, and unprojected at each landmark's
    canonical depth. Returns (F,20,3) world-space targets."""
    if model.landmark_indices is None:
        raise ValueError("model has no landmarks")
    src = np.asarray(source_traj, dtype=float)
    if src.ndim != 3 or src.shape[1:] != (20, 2):
        raise ValueError("source trajectory must be (F,20,2)")
    canon3d = model.mean.reshape(-1, 3)[model.landmark_indices]
    px, depth, ok = cam.project_points(canon3d)
    if not ok.all():
        raise ValueError("canonical landmarks behind the camera")
    out = np.empty((len(src), 20, 3))
    neutral = src[0]
    for name, sl in _region_slices().items():
        char_ext = px[sl].max(axis=0) - px[sl].min(axis=0)
        src_ext = neutral[sl].max(axis=0) - neutral[sl].min(axis=0)
        scale = np.zeros(2)
        for ax in range(2):
            if src_ext[ax] <= 1e-9:
                log.warning("source region %s has zero extent on axis %d; no transfer on that axis", name, ax)
            else:
                scale[ax] = char_ext[ax] / src_ext[ax]
        disp = (src[:, sl] - neutral[sl]) * scale  # (F,6or8,2)
        tgt2d = px[sl] + disp
        z = depth[sl]
        xc = np.empty(tgt2d.shape[:2] + (3,))
        xc[..., 0] = (tgt2d[..., 0] - cam.principal_point[0]) / cam.focal * z
        xc[..., 1] = (tgt2d[..., 1] - cam.principal_point[1]) / cam.focal * z
        xc[..., 2] = z
        inv = cam.pose.inverse()
        out[:, sl] = inv.apply(xc.reshape(-1, 3)).reshape(xc.shape)
    return out


def retarget_fit(model: BlendshapeModel, target_landmarks: np.ndarray, weights: FitWeights | None = None,
                 steps: int = 250, lr: float = 0.05):
    """Solve for coefficients whose landmarks hit the targets, regularized by
    ARAP distortion against the mean shape and a small coefficient L2 term.
    Returns (coeffs, info)."""
    weights = weights or FitWeights()
    if model.landmark_indices is None:
        raise ValueError("model has no landmarks")
    target = np.asarray(target_landmarks, dtype=float)
    if target.shape != (20, 3):
        raise ValueError("target landmarks must be (20,3)")
    idx = model.landmark_indices
    arap = ArapEnergy(model.mean_mesh())
    lm_basis = model.basis.reshape(model.n_components, -1, 3)[:, idx]  # (C,20,3)
    coeffs = np.zeros(model.n_components)
    state = nets.AdamState.for_tensors([coeffs])
    info = {}
    for _ in range(steps):
        mesh = synthesize(model, coeffs)
        lm = mesh.vertices[idx]
        d = lm - target
        l_lm = float((d * d).sum() / 20.0)
        g_lm = np.einsum("cki,ki->c", lm_basis, 2.0 * d / 20.0)
        e_arap, g_arap_v = arap(mesh)
        g_arap = np.einsum("cvi,vi->c", model.basis.reshape(model.n_components, -1, 3), g_arap_v)
        l2 = float(coeffs @ coeffs)
        g = weights.landmark_weight * g_lm + weights.arap_weight * g_arap + weights.coeff_l2 * 2.0 * coeffs
        nets.adam_step(state, [coeffs], [g], lr)
        info = {"l_lm": l_lm, "arap": e_arap, "coeff_l2": l2}
    mesh = synthesize(model, coeffs)
    info["landmark_rms"] = float(np.sqrt(((mesh.vertices[idx] - target) ** 2).sum(axis=1).mean()))
    return coeffs, info


# ---------------------------------------------------------------------------
# model file + viewer export

_MODEL_MAGIC = b"SSBSM1\n"


def save_model(path, model: BlendshapeModel):
    tensors = {
        "mean": model.mean, "basis": model.basis, "singular_values": model.singular_values,
        "faces": model.faces, "vertex_colors": model.vertex_colors,
    }
    if model.landmark_indices is not None:
        tensors["landmark_indices"] = model.landmark_indices
    manifest = {
        "n_components": model.n_components,
        "n_vertices": model.n_vertices,
        "bbox_diag": model.bbox_diag,
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)} for k, v in tensors.items()],
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in tensors.values():
            f.write(np.ascontiguousarray(v).tobytes())


def load_model(path) -> BlendshapeModel:
    with open(path, "rb") as f:
        if f.read(len(_MODEL_MAGIC)) != _MODEL_MAGIC:
            raise ValueError("not a blendshape model file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(hlen))
        tensors = {}
        for spec in manifest["tensors"]:
            nel = int(np.prod(spec["shape"])) if spec["shape"] else 1
            dt = np.dtype(spec["dtype"])
            tensors[spec["name"]] = np.frombuffer(f.read(nel * dt.itemsize), dtype=dt).reshape(spec["shape"]).copy()
    return BlendshapeModel(
        mean=tensors["mean"], basis=tensors["basis"], singular_values=tensors["singular_values"],
        faces=tensors["faces"], vertex_colors=tensors["vertex_colors"],
        bbox_diag=manifest["bbox_diag"],
        landmark_indices=tensors.get("landmark_indices"),
    )


def export_viewer(model: BlendshapeModel, path, c_viewer: int = 16, n_golden: int = 10, seed: int = 0):
    """Self-contained JSON for the browser console: the basis truncated to
    c_viewer plus golden coefficient/vertex pairs for fidelity checks."""
    c = min(c_viewer, model.n_components)
    rng = np.random.default_rng(seed)
    golden = []
    for _ in range(n_golden):
        coeffs = np.zeros(model.n_components)
        coeffs[:c] = rng.normal(0.0, 1.0, size=c) * model.singular_values[:c] * 0.5
        verts = (model.mean + coeffs @ model.basis).reshape(-1, 3)
        golden.append({"coeffs": coeffs[:c].tolist(), "vertices": verts.reshape(-1).tolist()})
    doc = {
        "n_vertices": model.n_vertices,
        "c_viewer": c,
        "mean": model.mean.tolist(),
        "basis": model.basis[:c].reshape(-1).tolist(),
        "singular_values": model.singular_values[:c].tolist(),
        "faces": model.faces.reshape(-1).tolist(),
        "vertex_colors": model.vertex_colors.reshape(-1).tolist(),
        "landmark_indices": None if model.landmark_indices is None else model.landmark_indices.tolist(),
        "bbox_diag": model.bbox_diag,
        "golden": golden,
    }
    with open(path, "w") as f:
        json.dump(doc, f)
    return doc
