"""
Fitting a voxel field to a synthetic wall
=========================================

A small posed dataset is raytraced from the textured wall scene, a voxel
radiance field is fitted to its training frames, and the held-out frames
tell us how faithful the reconstruction is.
"""

from pathlib import Path

import numpy as np

from viewmt import imqual
from viewmt.field import RenderConfig, TrainConfig, default_field, fit, render_image, smoothed
from viewmt.geometry import CameraIntrinsics
from viewmt.synthscene import default_wall_scene, default_wall_trajectory, generate_dataset

out = Path("demo_output/fit_wall")
out.mkdir(parents=True, exist_ok=True)

###############################################################################
# The dataset
# -----------
# 100 frames along a Lissajous sweep in front of the wall. Every tenth frame
# (index 1, 11, 21, ...) is held out for evaluation.

intr = CameraIntrinsics.from_fov(64, 36, 60.0)
ds = generate_dataset(default_wall_scene(), default_wall_trajectory(100), intr)
print(ds.summary())

###############################################################################
# Fitting
# -------
# The field starts as a uniform gray fog inside the scene box.

init = default_field(ds.scene.scene_box(), (40, 40, 40), background=(0.5, 0.5, 0.5))
res = fit(init, ds.posed(ds.train_indices), TrainConfig(600, 2048, 0.05, 0), RenderConfig(48, True, 1))
print("loss per 100 steps:", np.round(smoothed(res.loss_history), 5))
print(f"fit took {res.wall_time:.1f} s")

###############################################################################
# Held-out quality
# ----------------

rcfg = RenderConfig(48)
for k in ds.eval_indices[:5]:
    real = ds.image(k)
    before = render_image(init, intr, ds.frames[k].pose, rcfg)
    after = render_image(res.field, intr, ds.frames[k].pose, rcfg)
    print(f"frame {ds.frames[k].id}: {imqual.psnr(real, before):5.2f} dB -> {imqual.psnr(real, after):5.2f} dB")
    imqual.write_ppm(out / f"{ds.frames[k].id}_real.ppm", real)
    imqual.write_ppm(out / f"{ds.frames[k].id}_nerf.ppm", after)

print("images written to", out)
