"""Hard rasterisation into a texel buffer and single-query shading.

The deformed mesh is drawn with a depth buffer. For each pixel we keep the
nearest front-facing triangle, its perspective-correct texel and its
camera-space depth. The texture net then runs once per covered pixel.

Pixel centres are at integer image coordinates, matching
:func:`nes.volren.generate_rays`. Coverage follows the top-left fill rule,
so a pixel centre exactly on an edge shared by two triangles belongs to
exactly one of them.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
from PIL import Image

from . import autodiff as ad
from .geometry import TemplateMesh, deform_vertices
from .volren import Camera

NEAR_PLANE = 1e-3
UVL_RR_MESSAGE = "NES_UVL cannot be rendered with Rasterization-based Neural Rendering"


@dataclass
class UvImage:
    width: int
    height: int
    texel: np.ndarray     # (H, W, 2), zero where uncovered
    face: np.ndarray      # (H, W), -1 where uncovered
    depth: np.ndarray     # (H, W) camera-space z, inf where uncovered
    covered: np.ndarray   # (H, W) bool
    bary: np.ndarray      # (H, W, 3) perspective-correct weights of the face corners

    @property
    def n_covered(self) -> int:
        return int(self.covered.sum())


@nb.njit(cache=True, nogil=True)
def _raster_band(sx, sy, sz, front, faces, texels, y0, y1, width, zbuf, fbuf, tbuf, bbuf):
    """Draw every front-facing triangle into rows [y0, y1) of the buffers."""
    for f in range(len(faces)):
        if not front[f]:
            continue
        # orient so the signed area is positive (edge functions >= 0 inside)
        i0, i1, i2 = faces[f, 0], faces[f, 2], faces[f, 1]
        c0, c1, c2 = 0, 2, 1
        x0, y0v, x1, y1v, x2, y2v = sx[i0], sy[i0], sx[i1], sy[i1], sx[i2], sy[i2]
        area = (x1 - x0) * (y2v - y0v) - (y1v - y0v) * (x2 - x0)
        if area <= 0.0:
            continue
        ymin = max(y0, int(np.ceil(min(y0v, y1v, y2v))))
        ymax = min(y1 - 1, int(np.floor(max(y0v, y1v, y2v))))
        xmin = max(0, int(np.ceil(min(x0, x1, x2))))
        xmax = min(width - 1, int(np.floor(max(x0, x1, x2))))
        if ymin > ymax or xmin > xmax:
            continue
        iz0, iz1, iz2 = 1.0 / sz[i0], 1.0 / sz[i1], 1.0 / sz[i2]
        # top-left rule per edge (a -> b): top edges run +x horizontally, left edges run -y
        dx12, dy12 = x2 - x1, y2v - y1v
        dx20, dy20 = x0 - x2, y0v - y2v
        dx01, dy01 = x1 - x0, y1v - y0v
        tl12 = (dy12 == 0.0 and dx12 > 0.0) or dy12 < 0.0
        tl20 = (dy20 == 0.0 and dx20 > 0.0) or dy20 < 0.0
        tl01 = (dy01 == 0.0 and dx01 > 0.0) or dy01 < 0.0
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w0 = dx12 * (py - y1v) - dy12 * (px - x1)
                w1 = dx20 * (py - y2v) - dy20 * (px - x2)
                w2 = dx01 * (py - y0v) - dy01 * (px - x0)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl12) or (w1 == 0.0 and not tl20) or (w2 == 0.0 and not tl01):
                    continue
                l0, l1, l2 = w0 / area, w1 / area, w2 / area
                q0, q1, q2 = l0 * iz0, l1 * iz1, l2 * iz2
                inv = q0 + q1 + q2
                z = 1.0 / inv
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    fbuf[py, px] = f
                    b0, b1, b2 = q0 * z, q1 * z, q2 * z
                    bbuf[py, px, c0] = b0
                    bbuf[py, px, c1] = b1
                    bbuf[py, px, c2] = b2
                    for a in range(2):
                        tbuf[py, px, a] = (b0 * texels[f, c0, a] + b1 * texels[f, c1, a]
                                           + b2 * texels[f, c2, a])


def rasterize(mesh: TemplateMesh, camera: Camera, bands: int = 1, threads: int = 1) -> UvImage:
    """Depth-buffered rasterisation of ``mesh`` into a :class:`UvImage`.

    Triangles with any corner closer than the near plane are dropped whole;
    back faces are culled. The frame is split into ``bands`` row bands; each
    band writes only its own rows, so bands can be drawn on ``threads``
    workers without locking.
    """
    W, H = camera.width, camera.height
    vc = mesh.vertices @ camera.rotation.T + camera.translation
    z = vc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = camera.fx * vc[:, 0] / z + camera.cx
        sy = camera.fy * vc[:, 1] / z + camera.cy
    faces = np.asarray(mesh.faces)
    ok = (z[faces] > NEAR_PLANE).all(axis=1)
    # front-facing: the triangle normal points back toward the camera centre
    tri = vc[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = ok & (np.einsum("ij,ij->i", n, tri[:, 0]) < 0.0)
    sx = np.where(np.isfinite(sx), sx, 0.0)
    sy = np.where(np.isfinite(sy), sy, 0.0)
    texels = np.asarray(mesh.face_texels)

    zbuf = np.full((H, W), np.inf)
    fbuf = np.full((H, W), -1, np.int64)
    tbuf = np.zeros((H, W, 2))
    bbuf = np.zeros((H, W, 3))
    edges = np.linspace(0, H, max(1, min(bands, H)) + 1).astype(int)

    def work(i):
        a, b = edges[i], edges[i + 1]
        # each band owns its rows of the buffers: no two workers share a pixel
        _raster_band(sx, sy, z, front, faces, texels, a, b, W, zbuf, fbuf, tbuf, bbuf)

    if threads > 1 and len(edges) > 2:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, range(len(edges) - 1)))
    else:
        for i in range(len(edges) - 1):
            work(i)
    covered = fbuf >= 0
    return UvImage(W, H, np.clip(tbuf, 0.0, 1.0), fbuf, zbuf, covered, bbuf)


# -- shading ----------------------------------------------------------------

def deform_for_pose(model, template: TemplateMesh, pose):
    """Template moved by the offset field sampled at each vertex's canonical texel."""
    if model.config.uvl:
        raise ValueError(UVL_RR_MESSAGE)
    l = np.asarray(ad.value(model.eval_offset(template.vertex_texels, pose)), dtype=np.float64)
    return deform_vertices(template, l, model.config.max_offset)


def _shade(model, template, pose, camera, edit=None, uv: UvImage | None = None, threads: int = 1):
    if model.config.uvl:
        raise ValueError(UVL_RR_MESSAGE)
    if uv is None:
        uv = rasterize(deform_for_pose(model, template, pose), camera, bands=max(1, threads), threads=threads)
    img = np.zeros((camera.height, camera.width, 3))
    texel = uv.texel[uv.covered]
    if len(texel):
        # the only texture query of the frame: one row per covered pixel
        rgb = np.asarray(ad.value(model.eval_texture(texel, pose)), dtype=np.float64)
        if edit is not None:
            rgba = sample_bilinear(edit, texel)
            a = rgba[:, 3:4]
            rgb = a * rgba[:, :3] + (1.0 - a) * rgb
        img[uv.covered] = rgb
    return img, uv


def render_rr(model, template: TemplateMesh, pose, camera: Camera, threads: int = 1) -> np.ndarray:
    """Deform, rasterise, then query the texture net once per covered pixel."""
    return _shade(model, template, pose, camera, threads=threads)[0]


def sample_bilinear(image, texel) -> np.ndarray:
    """Bilinear lookup of an (h, w, C) image at texels in [0, 1]^2.

    Texel (0, 0) is the centre of the top-left pixel and (1, 1) of the
    bottom-right one; u runs along columns, v along rows.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    x = np.clip(texel[:, 0], 0.0, 1.0) * (w - 1)
    y = np.clip(texel[:, 1], 0.0, 1.0) * (h - 1)
    x0 = np.minimum(np.floor(x).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def edit_texture(model, template: TemplateMesh, pose, camera: Camera, mask, threads: int = 1) -> np.ndarray:
    """Render with an RGBA texel-space overlay blended over the learned texture."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 3 or mask.shape[2] != 4:
        raise ValueError(f"mask must be (h, w, 4) RGBA, got {mask.shape}")
    if mask.shape[0] == 0 or mask.shape[1] == 0:
        raise ValueError("mask resolution must be non-zero")
    return _shade(model, template, pose, camera, edit=mask, threads=threads)[0]


# -- image files ------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), "RGB").save(path, format="PNG")


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), "RGB").save(path, format="PPM")


def read_image(path: str | Path) -> np.ndarray:
    """RGB or RGBA image as floats in [0, 1]."""
    with Image.open(path) as im:
        mode = "RGBA" if im.mode in ("RGBA", "LA", "P") else "RGB"
        return np.asarray(im.convert(mode), dtype=np.float64) / 255.0


def write_uv_debug(path: str | Path, uv: UvImage) -> None:
    """(u, v) in the red and green channels, coverage in blue."""
    img = np.zeros((uv.height, uv.width, 3))
    img[..., :2] = uv.texel
    img[..., 2] = uv.covered
    write_png(path, img)
