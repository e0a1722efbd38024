"""Retarget a scripted source landmark performance onto the blendshape model.

Synthesizes a mouth-open-then-blink source trajectory (standing in for a human
face tracker), transfers it through per-region bbox scaling, solves the
ARAP-regularized coefficient fit per frame, and writes the coefficient
trajectory plus retargeted meshes.

Run demos/04_blendshapes.py first (it writes the model this loads).
"""

import pathlib

import numpy as np

from splatshape import morphable as mo
from splatshape import synth
from splatshape.geom import Camera, save_ply

out = pathlib.Path(__file__).parent / "out"
model_path = out / "model.bin"
if not model_path.exists():
    raise SystemExit("run demos/04_blendshapes.py first")
model = mo.load_model(model_path)

# a synthetic tracked performance: landmarks laid out like the character
# annotation (angle k counterclockwise, image y down), frame 0 neutral
frames = 10
a6 = np.linspace(0, 2 * np.pi, 6, endpoint=False)
a8 = np.linspace(0, 2 * np.pi, 8, endpoint=False)
base = np.zeros((20, 2))
base[0:6] = [30, 30] + 6 * np.stack([np.cos(a6), -np.sin(a6)], axis=1)
base[6:12] = [70, 30] + 6 * np.stack([np.cos(a6), -np.sin(a6)], axis=1)
base[12:20] = [50, 70] + np.stack([12 * np.cos(a8), -6 * np.sin(a8)], axis=1)
traj = np.tile(base, (frames, 1, 1))
for f in range(frames):
    u = f / (frames - 1)
    traj[f, 12:20, 1] += 8 * np.sin(np.pi * u) * np.sign(base[12:20, 1] - 70)  # mouth opens
    for sl in (slice(0, 6), slice(6, 12)):  # eyes narrow late in the clip
        cy = base[sl, 1].mean()
        traj[f, sl, 1] = cy + (base[sl, 1] - cy) * (1 - 0.7 * max(0.0, u - 0.5) * 2)

cam = Camera.from_dict(synth.make_landmark_annotation(model.mean_mesh(), synth.grid_cameras(1, 96)[0])["camera"])
targets = mo.transfer_landmarks(traj, model, cam)

rows = []
for f in range(frames):
    coeffs, info = mo.retarget_fit(model, targets[f])
    rows.append(coeffs)
    save_ply(out / f"retarget_f{f:02d}.ply", mo.synthesize(model, coeffs))
    print(f"frame {f}: landmark rms {info['landmark_rms']:.4f}, arap {info['arap']:.4f}")

with open(out / "trajectory.csv", "w") as fh:
    k = min(16, model.n_components)
    fh.write("frame," + ",".join(f"c{i}" for i in range(k)) + "\n")
    for f, c in enumerate(rows):
        fh.write(",".join([str(f)] + ["%.8g" % x for x in c[:k]]) + "\n")
print(f"wrote retargeted meshes and trajectory.csv to {out}")
