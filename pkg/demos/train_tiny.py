"""Fit a tiny scene for a few hundred steps, then evaluate and edit it.

A toy run: the default recovery settings take 20k steps. This one finishes
in under a minute and shows the moving parts.
"""

import logging

import numpy as np

from nes.raster import edit_texture, write_png
from nes.training import SceneSpec, TrainConfig, evaluate, generate_scene, offset_error, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

scene = generate_scene(SceneSpec(resolution=48, level=3), seed=1)
result = train(scene, TrainConfig(iterations=600, depth=6, log_every=100))
print(f"{result.seconds:.0f}s, final beta {result.beta[-1]:.4f}")

for split in ("train", "unseen"):
    ev = evaluate(result.model, scene, split)
    print(split, "PSNR %.2f SSIM %.3f" % (ev.mean_psnr, ev.mean_ssim))
print("offset MAE", offset_error(result.model, scene))

# paint a red stripe over the lower half of the atlas at half strength
mask = np.zeros((32, 32, 4))
mask[16:, :, 0] = 1.0
mask[16:, :, 3] = 0.5
img = edit_texture(result.model, scene.template, scene.train_poses[0], scene.cameras[0], mask)
write_png("edited.png", img)
