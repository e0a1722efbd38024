"""Build a PCA blendshape model from registered expression clips.

Trains on four oracle expression clips, holds one out, and shows that fit
error is non-increasing in the number of components. Also exports the
browser-viewer JSON with golden test vectors.
"""

import pathlib

import numpy as np

from splatshape import morphable as mo
from splatshape import synth

out = pathlib.Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

mesh = synth.make_character("sphere_face", resolution=800, seed=0)
clips = {}
for name in ("talk", "laugh", "blink_wave", "pout", "surprise"):
    frames, _, _ = synth.animate(mesh, synth.expression_script(mesh, name), 12)
    clips[name] = frames

held_name = "surprise"
train = [m for n, fs in clips.items() if n != held_name for m in fs]
held = clips[held_name]
print(f"training on {len(train)} frames, holding out {held_name!r}")

for c in (1, 5, 10, 20, 40):
    model = mo.build_model(train, c)
    errs = [mo.fit_to_capture(model, fr)[1]["p2p"] for fr in held]
    print(f"  C={c:3d}: held-out mean p2p {np.mean(errs):.6f}")

model = mo.build_model(train, 40)
cam = synth.grid_cameras(1, size=96)[0]
ann = synth.make_landmark_annotation(mesh, cam)
model = model.with_landmarks(mo.lift_annotation(mesh, ann))
mo.save_model(out / "model.bin", model)
mo.export_viewer(model, out / "model_viewer.json", c_viewer=16, n_golden=10, seed=0)
print(f"wrote model.bin and model_viewer.json to {out}")
