"""Synthetic multi-view scenes, the volumetric training loop and metrics.

Ground truth comes from analytic fields on the template surface: a few
smooth pose-modulated bumps for the offset and a soft checker with a
pose-modulated patch for the colour. Both are wrapped in :class:`GtField`,
which has the same evaluation interface as the learned model, so the GT
images go through the very same rasterise-and-shade path used at inference.
A model that equals the GT fields therefore reproduces the images exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import resource
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .fields import Adam, FieldConfig, FieldModel, TrainingError, save_checkpoint
from .geometry import TemplateMesh, make_template, read_obj, texel_to_surface, write_obj
from .raster import (UVL_RR_MESSAGE, read_image, render_rr, write_png)
from .volren import (N_COARSE, N_SURFACE, Camera, deformed_for_hits, generate_rays, render_image_vr,
                     render_rays_vr)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PSNR_CAP = 99.0
METRICS_HEADER = ["split", "camera", "pose", "mode", "psnr", "ssim"]


# -- ground truth -----------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    template: str = "sphere"
    level: int = 4
    cameras: int = 6
    train_cameras: int = 4
    train_poses: int = 8
    unseen_poses: int = 4
    resolution: int = 128
    d_pose: int = 8
    n_bumps: int = 3
    offset_amplitude: float = 0.15   # largest bump height; 0 disables the offset
    bump_width: float = 0.45         # chord-length scale of each bump
    pose_offset: bool = True         # bump heights follow the pose
    pose_texture: bool = True        # colour patch follows the pose
    camera_distance: float = 4.0

    def __post_init__(self):
        if self.cameras < 1 or self.train_poses < 1:
            raise ValueError("need at least one camera and one train pose")
        if not 0 <= self.train_cameras <= self.cameras:
            raise ValueError("train_cameras must lie in [0, cameras]")
        if self.unseen_poses < 0 or self.resolution < 8 or self.n_bumps < 0:
            raise ValueError("invalid scene size")
        if not 0.0 <= self.offset_amplitude <= 0.5:
            raise ValueError("offset_amplitude must lie in [0, 0.5]")


class GtField:
    """Analytic offset and colour fields; quacks like a :class:`FieldModel`.

    Fields are defined on the template point ``p0`` behind each texel, so
    they are continuous across atlas seams.
    """

    def __init__(self, template: TemplateMesh, params: dict, max_offset: float = 0.5):
        self.template = template
        self.params = params
        self.config = FieldConfig(d_pose=len(params["pose_basis"]), max_offset=max_offset)
        self.dtype = np.dtype(np.float64)
        self.texture_queries = 0
        self.log_beta = ad.Var(np.log(0.1), requires_grad=False)

    @staticmethod
    def random_params(spec: SceneSpec, rng: np.random.Generator) -> dict:
        # bump centres: spread directions, randomly rotated
        base = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float) / np.sqrt(3)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        centers = (base @ q.T)[: spec.n_bumps]
        signs = np.array([1.0, -1.0, 1.0, -1.0])[: spec.n_bumps]
        scale = np.array([1.0, 0.8, 0.7, 0.6])[: spec.n_bumps]
        return {
            "pose_basis": (rng.normal(size=(spec.d_pose, 4)) / np.sqrt(2)).tolist(),
            "bump_centers": centers.tolist(),
            "bump_heights": (spec.offset_amplitude * signs * scale).tolist(),
            "bump_width": spec.bump_width,
            "bump_pose": (rng.normal(size=(spec.n_bumps, spec.d_pose)) * 0.6).tolist(),
            "pose_offset": spec.pose_offset,
            "checker_freq": (3.0 + rng.random(3)).tolist(),
            "checker_phase": (rng.random(3) * 2 * np.pi).tolist(),
            "colors": [[0.85, 0.35, 0.15], [0.15, 0.45, 0.85], [0.95, 0.85, 0.2]],
            "patch_center": _unit(rng.normal(size=3)).tolist(),
            "patch_pose": (rng.normal(size=spec.d_pose) * 0.8).tolist(),
            "pose_texture": spec.pose_texture,
        }

    # analytic fields on surface points ------------------------------------
    def offset_at(self, p0, pose) -> np.ndarray:
        P = self.params
        p0 = np.atleast_2d(p0)
        pose = np.broadcast_to(np.asarray(pose, dtype=np.float64), (len(p0), self.config.d_pose))
        out = np.zeros(len(p0))
        for c, h, w in zip(P["bump_centers"], P["bump_heights"], P["bump_pose"]):
            gain = 0.65 + 0.35 * np.tanh(pose @ np.asarray(w)) if P["pose_offset"] else 1.0
            r2 = np.sum((p0 - np.asarray(c)) ** 2, axis=1)
            out += h * gain * np.exp(-r2 / (2.0 * P["bump_width"] ** 2))
        return out

    def color_at(self, p0, pose) -> np.ndarray:
        P = self.params
        p0 = np.atleast_2d(p0)
        pose = np.broadcast_to(np.asarray(pose, dtype=np.float64), (len(p0), self.config.d_pose))
        f, ph = np.asarray(P["checker_freq"]), np.asarray(P["checker_phase"])
        g = np.prod(np.sin(p0 * f + ph), axis=1)
        s = 0.5 + 0.5 * np.tanh(3.0 * g)
        ca, cb, cp = (np.asarray(c) for c in P["colors"])
        base = (1 - s)[:, None] * ca + s[:, None] * cb
        base = base * (0.8 + 0.2 * p0[:, 2:3])
        r2 = np.sum((p0 - np.asarray(P["patch_center"])) ** 2, axis=1)
        strength = 0.5 + 0.5 * np.tanh(pose @ np.asarray(P["patch_pose"])) if P["pose_texture"] else 0.5
        m = (strength * np.exp(-r2 / (2 * 0.35**2)))[:, None]
        return np.clip((1 - m) * base + m * cp, 0.0, 1.0)

    # model interface -------------------------------------------------------
    def _points(self, texel):
        face, _, pos = texel_to_surface(self.template, texel)
        if np.any(face < 0):
            raise ValueError("texel outside the atlas")
        return pos

    def eval_offset(self, texel, pose, height=None):
        return self.offset_at(self._points(texel), pose)

    def eval_texture(self, texel, pose, height=None):
        texel = np.atleast_2d(texel)
        self.texture_queries += len(texel)
        return self.color_at(self._points(texel), pose)

    def vertex_offsets(self, pose) -> np.ndarray:
        return self.offset_at(self.template.vertices, pose)


def _unit(v):
    return v / np.linalg.norm(v)


def pose_from_phase(basis, phase) -> np.ndarray:
    phase = np.atleast_1d(phase)
    feats = np.stack([np.cos(phase), np.sin(phase), np.cos(2 * phase), np.sin(2 * phase)], axis=1)
    return feats @ np.asarray(basis).T


def ring_cameras(spec: SceneSpec) -> list[Camera]:
    """Cameras on a ring at alternating +-20 degree elevation.

    On an even ring whose half is odd, camera k + n/2 sits exactly opposite camera k.
    """
    cams = []
    focal = 1.3 * spec.resolution
    for k in range(spec.cameras):
        az = 2 * np.pi * k / spec.cameras
        el = np.radians(20.0 if k % 2 == 0 else -20.0)
        d = spec.camera_distance
        eye = d * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, [0, 0, 0], focal=focal, width=spec.resolution, height=spec.resolution))
    return cams


def _opposite(cams: list[Camera], i: int) -> int:
    c = cams[i].center
    return int(np.argmin([np.linalg.norm(o.center + c) for o in cams]))


def split_cameras(spec: SceneSpec) -> tuple[list[int], list[int]]:
    """Pick held-out cameras facing a training camera from the opposite side.

    A held-out view then shows the far side of the object, while its outline
    is one the training views already constrain. Without an opposite partner
    the held-out cameras are spread around the ring.
    """
    n, k = spec.cameras, spec.cameras - spec.train_cameras
    cams = ring_cameras(replace(spec, resolution=8))
    held, partners = [], set()
    for i in range(n - 1, -1, -1):
        if len(held) == k:
            break
        j = _opposite(cams, i)
        if i not in partners and j not in held and np.allclose(cams[j].center, -cams[i].center):
            held.append(i)
            partners.add(j)
    if len(held) < k:
        held = sorted({int(round((i + 0.5) * n / k)) % n for i in range(k)}) if k else []
        while len(held) < k:  # rounding collisions on odd rings
            held.append(next(i for i in range(n) if i not in held))
    held = sorted(held)
    return [i for i in range(n) if i not in held], held


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    template: TemplateMesh
    gt: GtField
    cameras: list
    train_cameras: list
    heldout_cameras: list
    train_poses: np.ndarray
    unseen_poses: np.ndarray
    images: dict = field(default_factory=dict)  # (camera, split, pose index) -> (H, W, 3)
    masks: dict = field(default_factory=dict)
    root: Path | None = None

    def poses(self, split: str) -> np.ndarray:
        if split in ("train", "train-pose"):
            return self.train_poses
        if split in ("unseen", "unseen-pose"):
            return self.unseen_poses
        raise ValueError(f"unknown split {split!r}")


def _quantize(img):
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


def render_gt(gt: GtField, template: TemplateMesh, pose, camera: Camera):
    """GT colour and coverage mask through the inference rasteriser."""
    from .raster import _shade
    from .geometry import deform_vertices

    mesh = deform_vertices(template, gt.vertex_offsets(pose), gt.config.max_offset)
    from .raster import rasterize

    uv = rasterize(mesh, camera)
    img, _ = _shade(gt, template, pose, camera, uv=uv)
    return img, uv.covered


def generate_scene(spec: SceneSpec | None = None, seed: int = 0, out: str | Path | None = None,
                   force: bool = False) -> SyntheticScene:
    """Build a deterministic scene; with ``out`` also write images and a manifest."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    template = make_template(spec.template, spec.level)
    params = GtField.random_params(spec, rng)
    gt = GtField(template, params)
    cams = ring_cameras(spec)
    train_cams, held = split_cameras(spec)
    tr_phase = 2 * np.pi * np.arange(spec.train_poses) / spec.train_poses
    # unseen poses sit halfway between neighbouring train phases, spread around the cycle
    n_tr = max(spec.train_poses, 1)
    slots = np.floor(np.arange(spec.unseen_poses) * n_tr / max(spec.unseen_poses, 1))
    un_phase = 2 * np.pi * (slots + 0.5) / n_tr
    scene = SyntheticScene(spec, seed, template, gt, cams, train_cams, held,
                           pose_from_phase(params["pose_basis"], tr_phase),
                           pose_from_phase(params["pose_basis"], un_phase) if spec.unseen_poses else
                           np.zeros((0, spec.d_pose)))
    for split in ("train", "unseen"):
        for pi, pose in enumerate(scene.poses(split)):
            for ci, cam in enumerate(cams):
                img, mask = render_gt(gt, template, pose, cam)
                scene.images[(ci, split, pi)] = _quantize(img)
                scene.masks[(ci, split, pi)] = mask
    if out is not None:
        write_scene(scene, out, force=force, phases={"train": tr_phase, "unseen": un_phase})
    return scene


def _image_name(ci, split, pi):
    return f"cam{ci:02d}_{split}_{pi:02d}"


def write_scene(scene: SyntheticScene, out: str | Path, force: bool = False, phases=None) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        write_obj(scene.template, out / "template.obj")
        entries = []
        for (ci, split, pi), img in sorted(scene.images.items()):
            name = _image_name(ci, split, pi)
            write_png(out / "images" / f"{name}.png", img)
            write_png(out / "masks" / f"{name}.png", np.repeat(scene.masks[(ci, split, pi)][..., None], 3, 2))
            entries.append({"camera": ci, "split": split, "pose": pi,
                            "image": f"images/{name}.png", "mask": f"masks/{name}.png"})
        poses = []
        for split in ("train", "unseen"):
            for pi, theta in enumerate(scene.poses(split)):
                item = {"split": split, "index": pi, "theta": [float(x) for x in theta]}
                if phases is not None:
                    item["phase"] = float(phases[split][pi])
                poses.append(item)
        manifest = {
            "format": "nes-scene",
            "version": 1,
            "seed": scene.seed,
            "spec": asdict(scene.spec),
            "template": "template.obj",
            "ground_truth": scene.gt.params,
            "cameras": [{"index": i, "split": "train" if i in scene.train_cameras else "heldout",
                         "width": c.width, "height": c.height,
                         "intrinsics": c.intrinsics.tolist(), "extrinsics": c.extrinsics.tolist()}
                        for i, c in enumerate(scene.cameras)],
            "poses": poses,
            "images": entries,
        }
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write scene to {out}: {exc}") from exc
    scene.root = out
    return out


def load_scene(root: str | Path) -> SyntheticScene:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no scene manifest at {path}")
    m = json.loads(path.read_text())
    if m.get("format") != "nes-scene":
        raise ValueError(f"{path}: not a scene manifest")
    spec = SceneSpec(**m["spec"])
    template = read_obj(root / m["template"])
    gt = GtField(template, m["ground_truth"])
    cams = [Camera.from_matrices(c["intrinsics"], c["extrinsics"], c["width"], c["height"]) for c in m["cameras"]]
    train_cams = [c["index"] for c in m["cameras"] if c["split"] == "train"]
    held = [c["index"] for c in m["cameras"] if c["split"] != "train"]
    poses = {"train": [], "unseen": []}
    for p in sorted(m["poses"], key=lambda p: (p["split"], p["index"])):
        poses[p["split"]].append(p["theta"])
    scene = SyntheticScene(spec, m["seed"], template, gt, cams, train_cams, held,
                           np.array(poses["train"]).reshape(-1, spec.d_pose),
                           np.array(poses["unseen"]).reshape(-1, spec.d_pose), root=root)
    for e in m["images"]:
        key = (e["camera"], e["split"], e["pose"])
        scene.images[key] = read_image(root / e["image"])[..., :3]
        scene.masks[key] = read_image(root / e["mask"])[..., 0] > 0.5
    return scene


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    rays_per_step: int = 16
    lr: float = 2e-3
    lr_final: float = 1e-4
    seed: int = 0
    fixed_texture: bool = False
    fixed_geometry: bool = False
    unrefined: bool = False
    uvl: bool = False
    depth: int = 12
    width: int = 32
    octaves: int = 6
    n_coarse: int = N_COARSE
    n_surface: int = N_SURFACE
    max_offset: float = 0.5
    d_pose: int = 8
    beta_init: float = 0.1
    beta_lr_scale: float = 1.0
    beta_final: float = 0.001
    beta_anneal: float = 0.6
    covered_fraction: float = 0.8
    hit_refresh: int = 25
    precision: str = "float32"
    checkpoint_every: int = 0
    log_every: int = 500

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_step < 1 or self.hit_refresh < 1:
            raise ValueError("iterations, rays_per_step and hit_refresh must be positive")
        if self.n_coarse < 1 or self.n_surface < 0:
            raise ValueError("sample counts must be positive")
        if not 0.0 <= self.covered_fraction <= 1.0:
            raise ValueError("covered_fraction must lie in [0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if not self.lr > 0 or not self.lr_final > 0:
            raise ValueError("learning rates must be positive")

    def field_config(self) -> FieldConfig:
        return FieldConfig(depth=self.depth, width=self.width, octaves=self.octaves, d_pose=self.d_pose,
                           max_offset=self.max_offset, beta_init=self.beta_init,
                           fixed_texture=self.fixed_texture, fixed_geometry=self.fixed_geometry,
                           unrefined=self.unrefined, uvl=self.uvl)


@dataclass
class TrainResult:
    model: FieldModel
    loss: np.ndarray
    beta: np.ndarray
    seconds: float


class _RayBank:
    """Rays, GT colours and masks of every training (camera, pose) image."""

    def __init__(self, scene: SyntheticScene):
        self.rays = {}
        for ci in scene.train_cameras:
            cam = scene.cameras[ci]
            self.rays[ci] = generate_rays(cam, cam.all_pixels())
        self.scene = scene

    def batch(self, pose_idx: int, n: int, covered_fraction: float, rng: np.random.Generator):
        cams = self.scene.train_cameras
        n_cov = int(round(n * covered_fraction))
        picks = rng.integers(len(cams), size=n)
        o, d, c = [], [], []
        for k, ci_i in enumerate(picks):
            ci = cams[ci_i]
            mask = self.scene.masks[(ci, "train", pose_idx)].ravel()
            pool = np.flatnonzero(mask if k < n_cov else ~mask)
            if len(pool) == 0:
                pool = np.arange(mask.size)
            j = pool[rng.integers(len(pool))]
            o.append(self.rays[ci][0][j])
            d.append(self.rays[ci][1][j])
            c.append(self.scene.images[(ci, "train", pose_idx)].reshape(-1, 3)[j])
        return np.array(o), np.array(d), np.array(c)


def train(scene: SyntheticScene, config: TrainConfig | None = None, out: str | Path | None = None,
          progress=None) -> TrainResult:
    """Fit the offset and texture fields to the training images by volume rendering."""
    config = config or TrainConfig()
    if not scene.train_cameras or not len(scene.train_poses):
        raise ValueError("scene has no training images")
    rng = np.random.default_rng(config.seed)
    model = FieldModel(config.field_config(), seed=config.seed, dtype=np.dtype(config.precision))
    params = model.parameters()
    opt = Adam(params, lr=config.lr, lr_scale={"log_beta": config.beta_lr_scale})
    bank = _RayBank(scene)
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    hit_cache: dict[int, tuple[int, object]] = {}
    n_poses = len(scene.train_poses)
    order = rng.permutation(n_poses)
    losses = np.zeros(config.iterations)
    betas = np.zeros(config.iterations)
    decay = (config.lr_final / config.lr) ** (1.0 / max(config.iterations, 1))
    t0 = time.perf_counter()
    for step in range(config.iterations):
        if step % n_poses == 0 and step:
            order = rng.permutation(n_poses)
        pi = int(order[step % n_poses])
        pose = scene.train_poses[pi]
        cached = hit_cache.get(pi)
        if cached is None or step - cached[0] >= config.hit_refresh:
            hit_cache[pi] = cached = (step, deformed_for_hits(model, scene.template, pose))
        o, d, target = bank.batch(pi, config.rays_per_step, config.covered_fraction, rng)

        with ad.Tape() as tape:
            out_vr = render_rays_vr(model, scene.template, pose, o, d, cached[1], rng,
                                    config.n_coarse, config.n_surface)
            diff = ad.sub(out_vr.rgb, target.astype(model.dtype))
            loss = ad.mean(ad.mul(diff, diff))
        lv = float(ad.value(loss))
        grads = tape.backward(loss, wrt=list(params.values()))
        named = {name: grads[p] for name, p in params.items()}
        if not math.isfinite(lv) or not all(np.all(np.isfinite(g)) for g in named.values()):
            norms = {k: float(np.linalg.norm(g)) for k, g in named.items()}
            worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -np.inf)[:5]
            raise TrainingError(
                f"non-finite loss or gradient at step {step}: loss={lv}, "
                f"beta={float(np.exp(model.log_beta.value)):.6g}, gradient norms {worst}")
        opt.step(named, lr=config.lr * decay**step)
        # beta stays learnable below a ceiling that shrinks towards beta_final
        frac = min(1.0, (step + 1) / max(config.beta_anneal * config.iterations, 1.0))
        ceiling = math.log(config.beta_init) + frac * math.log(config.beta_final / config.beta_init)
        model.log_beta.value = np.minimum(model.log_beta.value, np.asarray(ceiling, model.log_beta.value.dtype))
        losses[step] = lv
        betas[step] = float(np.exp(model.log_beta.value))
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = losses[max(0, step + 1 - config.log_every) : step + 1].mean()
            log.info("step %d loss %.5f beta %.4f (%.1fs)", step + 1, recent, betas[step],
                     time.perf_counter() - t0)
        if progress is not None:
            progress(step, lv)
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, out / f"checkpoint_{step + 1:06d}.nesf")
    seconds = time.perf_counter() - t0
    if out is not None:
        save_checkpoint(model, out / "model.nesf")
        write_loss_curve(out / "loss.csv", losses, betas)
        (out / "train_config.json").write_text(json.dumps(asdict(config), indent=1) + "\n")
    return TrainResult(model, losses, betas, seconds)


def write_loss_curve(path, losses, betas) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "beta"])
        for i, (l, b) in enumerate(zip(losses, betas)):
            w.writerow([i, repr(float(l)), repr(float(b))])


# -- metrics ----------------------------------------------------------------

def psnr(pred, target, mask=None) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask is not None:
        pred, target = pred[mask], target[mask]
    if pred.size == 0:
        raise ValueError("no pixels to compare")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b, sigma: float = 1.5, radius: int = 5) -> float:
    """Mean structural similarity with an 11x11 Gaussian window, data range 1.

    Colour images are scored per channel and averaged; the border where the
    window does not fit is excluded from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., k], b[..., k], sigma, radius) for k in range(a.shape[2])]))
    c1, c2 = 0.01**2, 0.03**2

    def blur(x):
        return gaussian_filter(x, sigma, truncate=radius / sigma, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a**2
    sbb = blur(b * b) - mu_b**2
    sab = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
    return float(s[radius:-radius, radius:-radius].mean())


@dataclass
class EvalResult:
    rows: list
    mean_psnr: float
    mean_ssim: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in METRICS_HEADER})


def render(model, scene: SyntheticScene, pose, camera: Camera, mode: str, seed: int = 0):
    """(image, coverage) through the requested path."""
    if mode == "rr":
        from .raster import deform_for_pose, rasterize, _shade

        uv = rasterize(deform_for_pose(model, scene.template, pose), camera)
        img, _ = _shade(model, scene.template, pose, camera, uv=uv)
        return img, uv.covered
    if mode == "vr":
        stats = {}
        img = render_image_vr(model, scene.template, pose, camera, seed=seed, stats=stats)
        return img, img.max(axis=2) > 0.5 / 255.0
    raise ValueError(f"unknown mode {mode!r}")


def evaluate(model, scene: SyntheticScene, split: str = "train", mode: str = "rr",
             cameras: list | None = None, poses: list | None = None) -> EvalResult:
    """PSNR over the union of GT and rendered coverage, and full-frame SSIM.

    Defaults: held-out cameras for the train poses (novel views) and every
    camera for the unseen poses (novel poses).
    """
    split = {"train-pose": "train", "unseen-pose": "unseen"}.get(split, split)
    if mode == "rr" and model.config.uvl:
        raise ValueError(UVL_RR_MESSAGE)
    all_poses = scene.poses(split)
    if len(all_poses) == 0:
        raise ValueError(f"split {split!r} is empty")
    if cameras is None:
        cameras = scene.heldout_cameras if split == "train" and scene.heldout_cameras else list(range(len(scene.cameras)))
    poses = range(len(all_poses)) if poses is None else poses
    rows = []
    for pi in poses:
        for ci in cameras:
            img, cov = render(model, scene, all_poses[pi], scene.cameras[ci], mode)
            gt = scene.images[(ci, split, pi)]
            mask = scene.masks[(ci, split, pi)] | cov
            rows.append({"split": split, "camera": ci, "pose": pi, "mode": mode,
                         "psnr": psnr(img, gt, mask), "ssim": ssim(img, gt)})
    return EvalResult(rows, float(np.mean([r["psnr"] for r in rows])), float(np.mean([r["ssim"] for r in rows])))


def texel_grid(n: int = 64) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n
    u, v = np.meshgrid(c, c)
    return np.stack([u.ravel(), v.ravel()], axis=1)


def offset_error(model, scene: SyntheticScene, n: int = 64, split: str = "train", rms: bool = False) -> float:
    """Mean |l - l*| (or the RMS with ``rms``) over an n x n texel grid and all poses of ``split``.

    Atlas gaps are skipped.
    """
    grid = texel_grid(n)
    face, _, pos = texel_to_surface(scene.template, grid)
    ok = face >= 0
    errs = []
    for pose in scene.poses(split):
        h = None
        if model.config.uvl:
            h = np.zeros(ok.sum())
        l = np.asarray(ad.value(model.eval_offset(grid[ok], pose, h)), dtype=np.float64)
        errs.append(np.abs(l - scene.gt.offset_at(pos[ok], pose)))
    if rms:
        return float(np.sqrt(np.mean(np.square(errs))))
    return float(np.mean(errs))


# -- benchmark --------------------------------------------------------------

@dataclass
class BenchResult:
    mode: str
    width: int
    height: int
    frames: int
    requested: int
    mean_ms: float
    fps: float
    samples_per_pixel: int
    texture_queries: int
    covered_pixels: int
    peak_rss_mb: float
    completed: bool
    seconds: float

    def as_dict(self) -> dict:
        return asdict(self)


def benchmark(model, template: TemplateMesh, pose, camera: Camera, mode: str = "rr",
              repetitions: int = 100, warmup: int = 3, time_budget: float | None = None,
              n_coarse: int = N_COARSE, n_surface: int = N_SURFACE) -> BenchResult:
    """Mean wall-clock time per full frame after ``warmup`` untimed frames.

    With ``time_budget`` (seconds, warm-up included) the run stops early and
    reports ``completed=False`` with the frames it did time.
    """
    if mode not in ("rr", "vr"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "rr" and model.config.uvl:
        raise ValueError(UVL_RR_MESSAGE)
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    start = time.perf_counter()

    def frame():
        before = model.texture_queries
        if mode == "rr":
            from .raster import deform_for_pose, rasterize, _shade

            uv = rasterize(deform_for_pose(model, template, pose), camera)
            _shade(model, template, pose, camera, uv=uv)
            covered = uv.n_covered
        else:
            img = render_image_vr(model, template, pose, camera)
            covered = int((img.max(axis=2) > 0).sum())
        return model.texture_queries - before, covered

    over = lambda: time_budget is not None and time.perf_counter() - start > time_budget
    for _ in range(warmup):
        if over():
            break
        frame()
    times, queries, covered = [], 0, 0
    for _ in range(repetitions):
        if over():
            break
        t = time.perf_counter()
        queries, covered = frame()
        times.append(time.perf_counter() - t)
    mean = float(np.mean(times)) if times else float("nan")
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    return BenchResult(mode, camera.width, camera.height, len(times), repetitions, mean * 1e3,
                       1.0 / mean if times else 0.0, 1 if mode == "rr" else n_coarse + n_surface,
                       queries, covered, peak, len(times) == repetitions, time.perf_counter() - start)
