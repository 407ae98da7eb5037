"""Build a small synthetic scene and rasterise its ground truth.

The analytic ground-truth field answers the same offset and texture queries
as a learned model, so the rasteriser draws it unchanged. Writes PNGs to
./gt_demo/.
"""

from pathlib import Path

from nes.raster import rasterize, write_png, write_uv_debug, deform_for_pose
from nes.training import SceneSpec, generate_scene, psnr, render

out = Path("gt_demo")
out.mkdir(exist_ok=True)

scene = generate_scene(SceneSpec(resolution=64, level=3), seed=0)
print("cameras", len(scene.cameras), "held out", scene.heldout_cameras)
print("train poses", len(scene.train_poses), "unseen poses", len(scene.unseen_poses))

pose, cam = scene.train_poses[0], scene.cameras[0]
uv = rasterize(deform_for_pose(scene.gt, scene.template, pose), cam)
write_uv_debug(out / "uv.png", uv)
print("covered pixels", uv.n_covered)

rr, cov = render(scene.gt, scene, pose, cam, "rr")
write_png(out / "rr.png", rr)
# stored images are 8-bit, so this is quantisation noise only
print("PSNR rr vs stored image", psnr(rr, scene.images[(0, "train", 0)], cov))

# pose changes the bumps and the patch colour
for k, p in enumerate(scene.poses("unseen")):
    write_png(out / f"unseen_{k}.png", render(scene.gt, scene, p, cam, "rr")[0])
