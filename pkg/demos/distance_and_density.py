"""How a point in space becomes a density.

Walks one ray through a tilted offset field: project each sample onto the
template, read the offset there, turn the height gap into a signed distance,
then into density and compositing weights.
"""

from types import SimpleNamespace

import numpy as np

from nes.conversion import sdf_to_density, signed_distance
from nes.volren import composite

# flat template z = 0, texel u = x; the offset surface is the ramp z = 0.5 x + 0.1
slope, lift = 0.5, 0.1
t = np.linspace(0.0, 2.0, 64)
pts = np.stack([np.full_like(t, 0.3), np.zeros_like(t), 1.0 - t], axis=1)  # straight down from z = 1

foot = SimpleNamespace(position=pts * [1, 1, 0], normal=np.tile([0.0, 0.0, 1.0], (len(t), 1)))
l = slope * pts[:, 0] + lift
grad = np.tile([slope, 0.0], (len(t), 1))

refined = signed_distance(pts, foot, l, grad)
plain = signed_distance(pts, foot, l, grad, refined=False)
truth = (pts[:, 2] - slope * pts[:, 0] - lift) / np.hypot(1.0, slope)
print("tilt angle (deg)", np.degrees(refined.alpha[0]))
print("max error, refined  ", np.abs(refined.s - truth).max())
print("max error, unrefined", np.abs(plain.s - truth).max())

# density: flat inside, Laplace tail outside, 1/(2 beta) at the surface
for beta in (0.2, 0.05, 0.01):
    sigma = sdf_to_density(refined.s, beta)
    deltas = np.diff(t, append=t[-1] + (t[1] - t[0]))
    rgb, w, opacity = composite(np.ones((1, len(t), 3)), sigma[None], deltas[None])
    depth = float(w[0] @ t / max(w[0].sum(), 1e-12))
    print(f"beta {beta:5.2f}  opacity {opacity[0]:.4f}  expected depth {depth:.4f}")

hit = (1.0 - slope * 0.3 - lift)  # where the ray meets the ramp
print("true hit depth", hit)
