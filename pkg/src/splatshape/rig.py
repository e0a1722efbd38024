"""Control-point rig construction and linear blend skinning.

A rig is K rest-pose control points plus, for every splat, the indices of its
M nearest control points and normalized inverse-Mahalanobis blending weights.
Weights are frozen after construction; only the per-control-point rigid
transforms move during fitting. Deformation uses the displacement form

    x' = x + sum_m w_m ((R_m - I) x + t_m)

which equals the plain convex blend whenever the weights sum to one and is
exactly the identity for identity transforms.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import so3
from .splats import SplatSet

log = logging.getLogger(__name__)

WEIGHT_EPS = 1e-8
MIN_SCALE = 1e-9


@dataclass
class ControlRig:
    control_points: np.ndarray  # (K,3)
    neighbor_idx: np.ndarray  # (N,M) int32
    weights: np.ndarray  # (N,M), rows sum to 1

    def __post_init__(self):
        self.control_points = np.ascontiguousarray(self.control_points, dtype=float)
        self.neighbor_idx = np.ascontiguousarray(self.neighbor_idx, dtype=np.int32)
        self.weights = np.ascontiguousarray(self.weights, dtype=float)

    @property
    def n_controls(self) -> int:
        return len(self.control_points)

    @property
    def n_splats(self) -> int:
        return len(self.neighbor_idx)

    @property
    def n_neighbors(self) -> int:
        return self.neighbor_idx.shape[1]


def select_control_points(splats: SplatSet, k: int, seed: int = 0, method: str = "kmeans") -> np.ndarray:
    """K approximately uniformly distributed points covering the splat positions.

    method="kmeans" (default): k-means with farthest-point seeding.
    method="fps": plain farthest-point sampling of the splat positions.
    Deterministic given the seed.
    """
    pts = splats.positions
    n = len(pts)
    if k > n:
        raise ValueError(f"cannot select {k} control points from {n} splats")
    if k == n:
        return pts.copy()
    rng = np.random.default_rng(seed)
    centers = pts[_farthest_point_indices(pts, k, rng)]
    if method == "fps":
        return centers
    if method != "kmeans":
        raise ValueError(f"unknown control point method {method!r}")
    for _ in range(25):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            sel = assign == j
            if sel.any():
                new[j] = pts[sel].mean(axis=0)
        if np.allclose(new, centers, atol=1e-12):
            centers = new
            break
        centers = new
    return centers


def _farthest_point_indices(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(pts)
    idx = np.empty(k, dtype=np.int64)
    idx[0] = rng.integers(n)
    d2 = ((pts - pts[idx[0]]) ** 2).sum(axis=1)
    for i in range(1, k):
        idx[i] = int(d2.argmax())
        d2 = np.minimum(d2, ((pts - pts[idx[i]]) ** 2).sum(axis=1))
    return idx


def compute_blend_weights(splats: SplatSet, controls: np.ndarray, m: int = 10) -> ControlRig:
    """Per-splat rig: M nearest controls by Mahalanobis distance under the
    splat's own rest covariance, weights = normalized 1/(d + eps)."""
    if len(controls) == 0:
        raise ValueError("controls must be non-empty")
    m = min(m, len(controls))
    R = so3.quat_to_mat(splats.quats)
    s = np.exp(splats.log_scales)
    low = s < MIN_SCALE
    if low.any():
        log.warning("%d splat scales below %.0e clamped for Mahalanobis weights", int(low.sum()), MIN_SCALE)
        s = np.maximum(s, MIN_SCALE)
    # Sigma^-1 = R diag(1/s^2) R^T
    A = R / s[:, None, :]  # columns scaled: A = R diag(1/s)
    delta = controls[None, :, :] - splats.positions[:, None, :]  # (N,K,3)
    y = np.einsum("nkj,nji->nki", delta, A)  # delta^T R diag(1/s) per pair
    d = np.sqrt((y**2).sum(axis=-1))  # (N,K) Mahalanobis distances
    nn = np.argsort(d, axis=1, kind="stable")[:, :m]
    dn = np.take_along_axis(d, nn, axis=1)
    w = 1.0 / (dn + WEIGHT_EPS)
    w = w / w.sum(axis=1, keepdims=True)
    return ControlRig(controls.copy(), nn.astype(np.int32), w)


def per_splat_rig(splats: SplatSet) -> ControlRig:
    """Degenerate rig with one control per splat, weight 1 (free per-splat motion)."""
    n = len(splats)
    return ControlRig(
        splats.positions.copy(),
        np.arange(n, dtype=np.int32)[:, None],
        np.ones((n, 1)),
    )


def lbs_deform(positions: np.ndarray, rig: ControlRig, quats: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Blend rigid transforms of the neighboring controls onto each point.

    quats (K,4), trans (K,3): the per-control transforms.
    """
    R = so3.quat_to_mat(quats)  # (K,3,3)
    Rn = R[rig.neighbor_idx]  # (N,M,3,3)
    tn = trans[rig.neighbor_idx]  # (N,M,3)
    disp = np.einsum("nmij,nj->nmi", Rn, positions) - positions[:, None, :] + tn
    return positions + np.einsum("nm,nmi->ni", rig.weights, disp)


def lbs_rotation_blend(rig: ControlRig, quats: np.ndarray, rest_quats: np.ndarray) -> np.ndarray:
    """Weighted quaternion average of neighbor rotations composed with rest orientations.

    Neighbor quaternions are sign-aligned to the highest-weight neighbor before
    summing; a blended norm below 1e-6 falls back to that neighbor's rotation.
    """
    qn = quats[rig.neighbor_idx]  # (N,M,4)
    ref_col = rig.weights.argmax(axis=1)
    ref = qn[np.arange(len(qn)), ref_col]  # (N,4)
    sign = np.where(np.sum(qn * ref[:, None, :], axis=-1) < 0, -1.0, 1.0)
    qs = np.einsum("nm,nmi->ni", rig.weights * sign, qn)
    norm = np.linalg.norm(qs, axis=-1)
    bad = norm < 1e-6
    if bad.any():
        qs[bad] = ref[bad]
        norm = np.linalg.norm(qs, axis=-1)
    qb = qs / norm[:, None]
    return so3.quat_mul(qb, rest_quats)


# ---------------------------------------------------------------------------
# serialization: JSON header line + little-endian binary blob

_MAGIC = b"SSRIG1\n"


def save_rig(path, rig: ControlRig):
    header = json.dumps({"K": rig.n_controls, "N": rig.n_splats, "M": rig.n_neighbors}).encode() + b"\n"
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(rig.control_points.astype("<f8").tobytes())
        f.write(rig.neighbor_idx.astype("<i4").tobytes())
        f.write(rig.weights.astype("<f8").tobytes())


def load_rig(path) -> ControlRig:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a rig file")
        (hlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(hlen))
        K, N, M = meta["K"], meta["N"], meta["M"]
        pts = np.frombuffer(f.read(K * 3 * 8), dtype="<f8").reshape(K, 3)
        idx = np.frombuffer(f.read(N * M * 4), dtype="<i4").reshape(N, M)
        w = np.frombuffer(f.read(N * M * 8), dtype="<f8").reshape(N, M)
    return ControlRig(pts.copy(), idx.copy(), w.copy())
