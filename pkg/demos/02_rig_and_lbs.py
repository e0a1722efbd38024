"""Build a control-point rig and pose the character by hand.

Selects control points with k-means, computes inverse-Mahalanobis blend
weights, then drags the controls near the mouth downward and renders the
result: linear blend skinning spreads the motion smoothly.
"""

import pathlib

import numpy as np

from splatshape import rig as rg
from splatshape import synth
from splatshape.geom import save_ply
from splatshape.so3 import IDENTITY_QUAT
from splatshape.splats import SplatSet, render, save_png

out = pathlib.Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

mesh = synth.make_character("sphere_face", resolution=1000, seed=0)
splats = SplatSet.from_mesh(mesh, scale_factor=0.62)

controls = rg.select_control_points(splats, 200, seed=0)
rig = rg.compute_blend_weights(splats, controls, m=10)
print(f"rig: {rig.n_controls} controls, {rig.n_neighbors} neighbors per splat")
print(f"weight rows sum to 1 within {abs(rig.weights.sum(axis=1) - 1).max():.2e}")

# drag controls in the lower-front region downward (an ad-hoc jaw open)
quats = np.tile(IDENTITY_QUAT, (rig.n_controls, 1))
trans = np.zeros((rig.n_controls, 3))
lower = (controls[:, 1] > 0.25) & (controls[:, 2] > 0.3)
trans[lower] = [0.0, 0.28, -0.05]
print(f"moving {lower.sum()} controls")

posed = rg.lbs_deform(splats.positions, rig, quats, trans)
posed_quats = rg.lbs_rotation_blend(rig, quats, splats.quats)
posed_splats = SplatSet(posed, posed_quats, splats.log_scales, splats.colors)

cam = synth.grid_cameras(1, size=128)[0]
for name, ss in (("rest", splats), ("posed", posed_splats)):
    img = render(ss, cam)
    save_png(out / f"lbs_{name}.png", img[..., :3] + (1 - img[..., 3:]))
save_ply(out / "lbs_posed.ply", mesh.with_vertices(rg.lbs_deform(mesh.vertices, rig, quats, trans)))
print(f"wrote renders and posed mesh to {out}")
