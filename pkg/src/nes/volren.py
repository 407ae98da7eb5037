"""Pinhole cameras, ray sampling and the volumetric compositing quadrature.

Rendering one ray: stratified depths between the inflated bounding sphere's
near and far points, plus a small stratified window around the first hit of
the deformed mesh. Every sample is cast to the template, run through the
offset and texture fields, converted to density and composited front to
back. The whole chain is traced when a tape is active.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .conversion import sdf_to_density, signed_distance, world_gradient
from .geometry import TemplateMesh, cast_rays, deform_vertices, project_points

N_COARSE = 128
N_SURFACE = 16
LAST_DELTA_CAP = 0.1
# projection is exact within this distance beyond the largest admissible offset
PROJECTION_MARGIN = 0.1


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; pixel centres sit at integer image coordinates.

    ``rotation``/``translation`` map world to camera: ``x_c = R x_w + t``.
    The camera looks down +z with +y pointing down the image.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrices(cls, K, extrinsics, width: int, height: int) -> "Camera":
        K = np.asarray(K, dtype=np.float64)
        E = np.asarray(extrinsics, dtype=np.float64)
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2], E[:3, :3], E[:3, 3], int(width), int(height))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), focal: float = 200.0,
                width: int = 128, height: int = 128) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(focal, focal, (width - 1) / 2, (height - 1) / 2, R, -R @ eye, width, height)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def extrinsics(self) -> np.ndarray:
        E = np.eye(4)
        E[:3, :3] = self.rotation
        E[:3, 3] = self.translation
        return E

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def all_pixels(self) -> np.ndarray:
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([xs.ravel(), ys.ravel()], axis=1)


def generate_rays(camera: Camera, pixels):
    """World-space origins and unit directions through the given pixel centres."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if px.shape[-1] != 2:
        raise ValueError("pixels must be (N, 2) as (x, y)")
    if (px < 0).any() or (px[:, 0] > camera.width - 1).any() or (px[:, 1] > camera.height - 1).any():
        raise ValueError(f"pixel outside the {camera.width}x{camera.height} image")
    d_cam = np.stack([(px[:, 0] - camera.cx) / camera.fx,
                      (px[:, 1] - camera.cy) / camera.fy,
                      np.ones(len(px))], axis=1)
    d = d_cam @ camera.rotation  # R^T d_cam, row-wise
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(camera.center, d.shape).copy(), d


def sphere_interval(origins, directions, center, radius):
    """Entry/exit depths of each ray through a sphere; NaN where it misses."""
    oc = origins - center
    b = np.sum(oc * directions, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        root = np.sqrt(disc)
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    miss = ~(disc > 0) | (far <= 0)
    near[miss] = np.nan
    far[miss] = np.nan
    return near, far


@dataclass
class RaySamples:
    origin: np.ndarray
    direction: np.ndarray
    t: np.ndarray       # (..., S) strictly increasing
    deltas: np.ndarray  # (..., S)
    source: np.ndarray  # (..., S) 0 stratified, 1 surface window

    def points(self) -> np.ndarray:
        return self.origin[..., None, :] + self.t[..., :, None] * self.direction[..., None, :]


def sample_depths(near, far, hit=None, beta: float = 0.1, n_coarse: int = N_COARSE,
                  n_surface: int = N_SURFACE, rng: np.random.Generator | None = None):
    """Batched sample depths for rays that all have (or all lack) a hit.

    Returns ``(t, deltas, source)``, each (R, n_coarse [+ n_surface]).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if not np.all(near < far):
        raise ValueError("near must be smaller than far")
    r = len(near)
    span = (far - near)[:, None]
    t = near[:, None] + span * (np.arange(n_coarse) + rng.random((r, n_coarse))) / n_coarse
    source = np.zeros((r, n_coarse), np.int8)
    if hit is not None and n_surface > 0:
        hit = np.atleast_1d(np.asarray(hit, dtype=np.float64))
        w = 4.0 * float(beta)
        lo = np.maximum(hit - w, near)[:, None]
        hi = np.minimum(hit + w, far)[:, None]
        # half the window strata on each side, so the hit is always bracketed
        half = n_surface // 2
        below = lo + (hit[:, None] - lo) * (np.arange(half) + rng.random((r, half))) / half
        m = n_surface - half
        above = hit[:, None] + (hi - hit[:, None]) * (np.arange(m) + rng.random((r, m))) / m
        t = np.concatenate([t, below, above], axis=1)
        source = np.concatenate([source, np.ones((r, n_surface), np.int8)], axis=1)
        order = np.argsort(t, axis=1, kind="stable")
        t = np.take_along_axis(t, order, axis=1)
        source = np.take_along_axis(source, order, axis=1)
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = np.clip(far - t[:, -1], 1e-9, LAST_DELTA_CAP)
    return t, deltas, source


def sample_ray(origin, direction, near: float, far: float, n_coarse: int = N_COARSE,
               n_surface: int = N_SURFACE, hit: float | None = None, beta: float = 0.1,
               rng: np.random.Generator | None = None) -> RaySamples:
    """Depth samples for one ray: stratified coarse set plus a window around ``hit``."""
    if not near < far:
        raise ValueError(f"near ({near}) must be smaller than far ({far})")
    t, d, src = sample_depths([near], [far], None if hit is None else [hit], beta,
                              n_coarse, n_surface, rng)
    return RaySamples(np.asarray(origin, dtype=np.float64), np.asarray(direction, dtype=np.float64),
                      t[0], d[0], src[0])


def composite(colors, densities, deltas):
    """Front-to-back quadrature over the last sample axis.

    Returns ``(rgb, weights, opacity)``; ``colors`` is (..., S, 3) and
    ``densities``/``deltas`` are (..., S).
    """
    sv, dv, cv = ad.value(densities), np.asarray(deltas), ad.value(colors)
    if sv.shape != dv.shape or cv.shape[:-1] != sv.shape:
        raise ValueError(f"length mismatch: colors {cv.shape}, densities {sv.shape}, deltas {dv.shape}")
    tau = ad.mul(densities, dv.astype(sv.dtype, copy=False))
    trans = ad.exp(ad.neg(ad.cumsum(tau, axis=-1, exclusive=True)))
    alpha = ad.sub(1.0, ad.exp(ad.neg(tau)))
    weights = ad.mul(trans, alpha)
    rgb = ad.total(ad.mul(ad.reshape(weights, sv.shape + (1,)), colors), axis=-2)
    return rgb, weights, ad.total(weights, axis=-1)


def deformed_for_hits(model, template: TemplateMesh, pose):
    """Mesh used to anchor the surface window: the template moved by the current offsets."""
    if model.config.uvl:
        return template
    l = model.eval_offset(template.vertex_texels, pose)
    return deform_vertices(template, np.asarray(l, dtype=np.float64), model.config.max_offset)


@dataclass
class VrOutput:
    rgb: object        # (R, 3), traced in training
    opacity: object    # (R,)
    hit_mask: np.ndarray  # rays that entered the sampling volume
    n_samples: int
    texture_queries: int


def render_rays_vr(model, template: TemplateMesh, pose, origins, directions,
                   hit_mesh: TemplateMesh | None = None, rng: np.random.Generator | None = None,
                   n_coarse: int = N_COARSE, n_surface: int = N_SURFACE) -> VrOutput:
    """Volumetric colour of each ray (black background)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    cfg = model.config
    center, radius = template.bounding_sphere()
    near, far = sphere_interval(origins, directions, center, radius + cfg.max_offset)
    live = np.flatnonzero(np.isfinite(near))
    n_rays = len(origins)
    dtype = model.dtype
    if len(live) == 0:
        z = np.zeros((n_rays, 3), dtype)
        return VrOutput(z, np.zeros(n_rays, dtype), np.zeros(n_rays, bool), 0, 0)

    hit_mesh = hit_mesh if hit_mesh is not None else deformed_for_hits(model, template, pose)
    t_hit, _, _ = cast_rays(hit_mesh, origins[live], directions[live])
    has_hit = np.isfinite(t_hit) & (t_hit >= near[live]) & (t_hit <= far[live])
    beta_now = float(np.exp(model.log_beta.value))

    groups = []  # (ray indices into live, t, deltas)
    for flag in (True, False):
        idx = np.flatnonzero(has_hit == flag)
        if len(idx) == 0:
            continue
        rid = live[idx]
        t, d, _ = sample_depths(near[rid], far[rid], t_hit[idx] if flag else None, beta_now,
                                n_coarse, n_surface if flag else 0, rng)
        groups.append((rid, t, d))

    pts = np.concatenate([(origins[rid][:, None, :] + t[:, :, None] * directions[rid][:, None, :]).reshape(-1, 3)
                          for rid, t, _ in groups])
    proj = project_points(template, pts, cfg.max_offset + PROJECTION_MARGIN)
    height = np.sum((pts - proj.position) * proj.normal, axis=1)
    h_in = height if cfg.uvl else None
    l, g_uv = model.offset_and_gradient(proj.texel, pose, h_in)
    g_w = world_gradient(g_uv, template.uv_metric_sqrt[proj.face].astype(dtype, copy=False))
    conv = signed_distance(pts, proj, l, g_w, refined=not cfg.unrefined)
    sigma = sdf_to_density(conv.s, model.beta)
    color = model.eval_texture(proj.texel, pose, h_in)

    rgb_parts, op_parts, order = [], [], []
    pos = 0
    for rid, t, d in groups:
        r, s = t.shape
        sl = slice(pos, pos + r * s)
        pos += r * s
        sg = ad.reshape(ad.take(sigma, sl), (r, s))
        cg = ad.reshape(ad.take(color, sl), (r, s, 3))
        rgb, _, opacity = composite(cg, sg, d)
        rgb_parts.append(rgb)
        op_parts.append(opacity)
        order.append(rid)
    rgb = ad.concat(rgb_parts, axis=0) if len(rgb_parts) > 1 else rgb_parts[0]
    opacity = ad.concat(op_parts, axis=0) if len(op_parts) > 1 else op_parts[0]
    rows = np.concatenate(order)
    if len(rows) != n_rays or np.any(rows != np.arange(n_rays)):
        # scatter live rays back into ray order; missed rays stay black
        slot = np.full(n_rays, -1)
        slot[rows] = np.arange(len(rows))
        pad = len(rows)
        zero_rgb = np.zeros((1, 3), dtype)
        rgb = ad.take(ad.concat([rgb, zero_rgb], axis=0), np.where(slot >= 0, slot, pad))
        opacity = ad.take(ad.concat([opacity, np.zeros(1, dtype)], axis=0), np.where(slot >= 0, slot, pad))
    mask = np.zeros(n_rays, bool)
    mask[live] = True
    return VrOutput(rgb, opacity, mask, len(pts), len(pts))


def render_pixel_vr(model, template: TemplateMesh, pose, camera: Camera, pixel, seed: int = 0) -> np.ndarray:
    """RGB of one pixel through the volumetric path (pure: no shared state)."""
    o, d = generate_rays(camera, [pixel])
    rng = np.random.default_rng([seed, int(pixel[1]), int(pixel[0])])
    return np.asarray(ad.value(render_rays_vr(model, template, pose, o, d, rng=rng).rgb)[0], dtype=np.float64)


def render_image_vr(model, template: TemplateMesh, pose, camera: Camera, seed: int = 0,
                    chunk: int = 256, threads: int = 1, stats: dict | None = None) -> np.ndarray:
    """Full frame through the volumetric path, sharded into ray chunks.

    Each chunk draws from its own seeded stream so the image does not depend
    on the thread count.
    """
    o, d = generate_rays(camera, camera.all_pixels())
    hit_mesh = deformed_for_hits(model, template, pose)
    starts = range(0, len(o), chunk)

    def work(s):
        rng = np.random.default_rng([seed, s])
        out = render_rays_vr(model, template, pose, o[s : s + chunk], d[s : s + chunk], hit_mesh, rng)
        return np.asarray(ad.value(out.rgb), dtype=np.float64), out.texture_queries

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    if stats is not None:
        stats["texture_queries"] = sum(q for _, q in parts)
        stats["rays"] = len(o)
    img = np.concatenate([p for p, _ in parts])
    return img.reshape(camera.height, camera.width, 3)
