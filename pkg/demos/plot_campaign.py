"""
A metamorphic test campaign
===========================

With a fitted field in hand, every eval frame is rendered at its original
pose and at six perturbed poses. The Harris detector and a histogram
classifier are run on each view, and their outputs are compared.
"""

import numpy as np

from viewmt import mt
from viewmt.cli import reference_classifier
from viewmt.field import RenderConfig, TrainConfig, default_field, fit
from viewmt.geometry import CameraIntrinsics
from viewmt.mutate import default_mutations
from viewmt.suts import HarrisSut, HistSut
from viewmt.synthscene import default_wall_scene, default_wall_trajectory, generate_dataset

intr = CameraIntrinsics.from_fov(64, 36, 60.0)
ds = generate_dataset(default_wall_scene(), default_wall_trajectory(120), intr)
init = default_field(ds.scene.scene_box(), (40, 40, 40), background=(0.5, 0.5, 0.5))
field = fit(init, ds.posed(ds.train_indices), TrainConfig(500, 2048, 0.05, 0), RenderConfig(48, True, 1)).field

###############################################################################
# The transform suite
# -------------------
# Shifts are fractions of the scene diameter; the camera is re-aimed at the
# look-at point after every shift.

suite = mt.build_suite(ds.sidecar)
for t in suite:
    print(t.kind.value, np.round(t.translation, 2), f"roll {np.degrees(t.droll):.1f} deg")

###############################################################################
# Running it
# ----------

poses = [ds.frames[k].pose for k in ds.train_indices]
suts = [HarrisSut(), HistSut(reference_classifier(ds.scene, intr, poses))]
report = mt.run_campaign(field, ds, suts, suite, default_mutations(), mt.CampaignConfig(RenderConfig(48)))
print(report.summary_table())

###############################################################################
# Larger moves should disturb the detector more than small ones.

for small, large in (("tau1", "tau3"), ("tau2", "tau4")):
    a = mt.mean_deviation(report, "harris", small)
    b = mt.mean_deviation(report, "harris", large)
    print(f"harris deviation {small} {a:.3f}  {large} {b:.3f}")

###############################################################################
# Does rendering quality explain SUT disagreement?
# -------------------------------------------------

for e in report.correlations:
    if e["status"] == "ok":
        print(f"{e['sut']:>9} {e['sut_metric']:>14} vs {e['image_metric']:<5} rho {e['rho']:+.2f} p {e['p']:.3f}")
