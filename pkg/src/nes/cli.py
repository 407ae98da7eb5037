"""``nes`` command line: synth, train, render, bench and eval.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines;
keys are the long flag names (dashes or underscores). Explicit flags win over
the file. Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("nes")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with close-match hints for mistyped flags."""

    def error(self, message):
        if "unrecognized arguments" in message:
            opts = [o for a in self._actions for o in a.option_strings if o.startswith("--")]
            for sub in self._subparsers._group_actions if self._subparsers else []:
                for p in getattr(sub, "choices", {}).values():
                    opts += [o for a in p._actions for o in a.option_strings if o.startswith("--")]
            bad = [w for w in message.split(":", 1)[1].split() if w.startswith("-")]
            hints = []
            for w in bad:
                near = difflib.get_close_matches(w.split("=")[0], sorted(set(opts)), n=1)
                if near:
                    hints.append(f"{w}: did you mean {near[0]}?")
            if hints:
                message += "\n  " + "\n  ".join(hints)
        super().error(message)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def default_threads() -> int:
    env = os.environ.get("NES_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"NES_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def build_parser() -> _Parser:
    p = _Parser(prog="nes", description="Neural explicit surfaces: synthetic scenes, training and rendering.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key = value file; flags override it")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=_positive_int, help="worker cap (default: NES_THREADS or all cores)")

    s = sub.add_parser("synth", help="generate a synthetic multi-view scene")
    common(s)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.add_argument("--template", choices=["sphere", "capsule"], default="sphere")
    s.add_argument("--cameras", type=_positive_int, default=6, help="cameras on the ring (a third are held out)")
    s.add_argument("--poses", type=_positive_int, default=12, help="poses in total (a third are unseen)")
    s.add_argument("--resolution", type=_positive_int, default=128)
    s.add_argument("--amplitude", type=float, default=0.15, help="largest GT offset; 0 for none")
    s.add_argument("--fast", action="store_true", help="64x64 images")

    t = sub.add_parser("train", help="fit a model to a scene by volume rendering")
    common(t)
    t.add_argument("--scene", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--iterations", type=_nonneg_int)
    t.add_argument("--rays", type=_positive_int, help="rays per step")
    t.add_argument("--lr", type=float)
    t.add_argument("--fixed-texture", type=_bool, nargs="?", const=True, default=False)
    t.add_argument("--fixed-geometry", type=_bool, nargs="?", const=True, default=False)
    t.add_argument("--unrefined", type=_bool, nargs="?", const=True, default=False)
    t.add_argument("--uvl", type=_bool, nargs="?", const=True, default=False)
    t.add_argument("--depth", type=int, choices=[12, 6, 3], default=12)
    t.add_argument("--width", type=_positive_int, default=32)
    t.add_argument("--checkpoint-every", type=_nonneg_int, default=0)
    t.add_argument("--fast", action="store_true", help="4000 steps")

    def model_args(sp):
        sp.add_argument("--scene", type=Path, required=True)
        sp.add_argument("--model", type=Path, required=True, help="checkpoint file or training directory")

    r = sub.add_parser("render", help="render one view to PNG")
    common(r)
    model_args(r)
    r.add_argument("--mode", choices=["rr", "vr"], default="rr")
    r.add_argument("--split", choices=["train", "unseen"], default="train")
    r.add_argument("--pose", type=_nonneg_int, default=0)
    r.add_argument("--camera", type=_nonneg_int, default=0)
    r.add_argument("--resolution", type=_positive_int, help="override the camera resolution")
    r.add_argument("--edit", type=Path, help="RGBA texel-space overlay (rr only)")
    r.add_argument("--uv-debug", type=Path, help="also write the UV image")
    r.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("bench", help="time full-frame rendering in both modes")
    common(b)
    model_args(b)
    b.add_argument("--mode", choices=["rr", "vr", "both"], default="both")
    b.add_argument("--repetitions", type=_positive_int, default=100)
    b.add_argument("--warmup", type=_nonneg_int, default=3)
    b.add_argument("--resolution", type=_positive_int, default=256)
    b.add_argument("--camera", type=_nonneg_int, default=0)
    b.add_argument("--pose", type=_nonneg_int, default=0)
    b.add_argument("--time-budget", type=float, help="seconds per mode; stops early")
    b.add_argument("--out", type=Path, help="CSV of the timing rows")

    e = sub.add_parser("eval", help="PSNR/SSIM against the scene's GT images")
    common(e)
    model_args(e)
    e.add_argument("--split", choices=["train", "unseen"], default="train")
    e.add_argument("--mode", choices=["rr", "vr"], default="rr")
    e.add_argument("--cameras", type=str, help="comma-separated camera indices")
    e.add_argument("--out", type=Path, help="metrics CSV")
    return p


# -- config files -----------------------------------------------------------

def read_config_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(sub: _Parser, path: Path) -> None:
    """Install the config file as the subcommand's defaults so explicit flags still win."""
    raw = read_config_file(path)
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    values = {}
    for k, v in raw.items():
        if k not in actions or k in ("config", "help"):
            near = difflib.get_close_matches(k, list(actions), n=1)
            hint = f" (did you mean {near[0]}?)" if near else ""
            raise UsageError(f"{path}: unknown key {k!r}{hint}")
        a = actions[k]
        try:
            if isinstance(a, argparse._StoreTrueAction):
                values[k] = _bool(v)
            else:
                values[k] = a.type(v) if a.type else v
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{path}: bad value for {k}: {exc}") from None
        if a.choices is not None and values[k] not in a.choices:
            raise UsageError(f"{path}: {k} must be one of {list(a.choices)}")
    sub.set_defaults(**values)
    for a in sub._actions:
        if a.dest in values:
            a.required = False


def resolve(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config is not None and command is not None:
        _apply_config(parser._subparsers._group_actions[0].choices[command], known.config)
    args = parser.parse_args(argv)
    if args.threads is None:
        args.threads = default_threads()
    return args


def _log_config(args) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
    return cfg


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .training import SceneSpec, generate_scene

    n_unseen = args.poses // 3
    n_held = args.cameras // 3
    spec = SceneSpec(template=args.template, cameras=args.cameras, train_cameras=args.cameras - n_held,
                     train_poses=args.poses - n_unseen, unseen_poses=n_unseen,
                     resolution=64 if args.fast else args.resolution, offset_amplitude=args.amplitude)
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} is not a directory")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    scene = generate_scene(spec, seed=args.seed, out=out, force=args.force)
    print(f"wrote {len(scene.images)} images for {len(scene.cameras)} cameras to {out}")
    return EXIT_OK


def _train_config(args):
    from .training import TrainConfig

    base = TrainConfig()
    kw = dict(seed=args.seed, fixed_texture=args.fixed_texture, fixed_geometry=args.fixed_geometry,
              unrefined=args.unrefined, uvl=args.uvl, depth=args.depth, width=args.width,
              checkpoint_every=args.checkpoint_every,
              iterations=4000 if args.fast else base.iterations)
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    if args.rays is not None:
        kw["rays_per_step"] = args.rays
    if args.lr is not None:
        kw["lr"] = args.lr
    return TrainConfig(**kw)


def cmd_train(args) -> int:
    from .training import evaluate, load_scene, train

    scene = load_scene(args.scene)
    cfg = _train_config(args)
    out = Path(args.out)
    if (out / "model.nesf").exists() and not args.force:
        raise UsageError(f"{out} already holds a model (use --force)")
    res = train(scene, cfg, out=out)
    mode = "vr" if cfg.uvl else "rr"
    msg = f"trained {cfg.iterations} steps in {res.seconds:.1f}s; final loss {res.loss[-50:].mean():.5f}" \
        if cfg.iterations else "saved untrained model"
    print(msg)
    if cfg.iterations and not cfg.uvl:
        ev = evaluate(res.model, scene, "train", mode)
        print(f"held-out views, train poses ({mode}): PSNR {ev.mean_psnr:.2f} dB, SSIM {ev.mean_ssim:.4f}")
    return EXIT_OK


def _load_model(path: Path):
    from .fields import load_checkpoint

    path = Path(path)
    if path.is_dir():
        path = path / "model.nesf"
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def _camera(scene, index, resolution=None):
    from .volren import Camera

    if index >= len(scene.cameras):
        raise UsageError(f"--camera {index} out of range (scene has {len(scene.cameras)})")
    cam = scene.cameras[index]
    if resolution is None or resolution == cam.width:
        return cam
    s = resolution / cam.width
    h = max(1, round(cam.height * s))
    return Camera(cam.fx * s, cam.fy * s, (resolution - 1) / 2 + (cam.cx - (cam.width - 1) / 2) * s,
                  (h - 1) / 2 + (cam.cy - (cam.height - 1) / 2) * s, cam.rotation, cam.translation, resolution, h)


def _pose(scene, split, index):
    poses = scene.poses(split)
    if index >= len(poses):
        raise UsageError(f"--pose {index} out of range ({split} split has {len(poses)})")
    return poses[index]


def cmd_render(args) -> int:
    from .raster import UVL_RR_MESSAGE, edit_texture, rasterize, deform_for_pose, read_image, write_png, write_uv_debug, render_rr
    from .training import load_scene
    from .volren import render_image_vr

    scene = load_scene(args.scene)
    model = _load_model(args.model)
    cam = _camera(scene, args.camera, args.resolution)
    pose = _pose(scene, args.split, args.pose)
    if model.config.uvl and (args.mode == "rr" or args.edit or args.uv_debug):
        raise ValueError(UVL_RR_MESSAGE)
    if args.mode == "vr" and (args.edit or args.uv_debug):
        raise UsageError("--edit and --uv-debug need --mode rr")
    if args.mode == "rr":
        if args.edit:
            mask = read_image(args.edit)
            if mask.shape[2] != 4:
                raise UsageError(f"{args.edit}: edit mask must be RGBA")
            img = edit_texture(model, scene.template, pose, cam, mask, threads=args.threads)
        else:
            img = render_rr(model, scene.template, pose, cam, threads=args.threads)
        if args.uv_debug:
            write_uv_debug(args.uv_debug, rasterize(deform_for_pose(model, scene.template, pose), cam))
    else:
        img = render_image_vr(model, scene.template, pose, cam, seed=args.seed, threads=args.threads)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, img)
    print(f"wrote {args.out}")
    return EXIT_OK


BENCH_HEADER = ["mode", "width", "height", "frames", "mean_ms", "fps", "samples_per_pixel",
                "texture_queries", "covered_pixels", "peak_rss_mb", "completed"]


def cmd_bench(args) -> int:
    from .raster import UVL_RR_MESSAGE
    from .training import benchmark, load_scene

    scene = load_scene(args.scene)
    model = _load_model(args.model)
    cam = _camera(scene, args.camera, args.resolution)
    pose = _pose(scene, "train", args.pose)
    modes = ["rr", "vr"] if args.mode == "both" else [args.mode]
    if model.config.uvl and "rr" in modes:
        if args.mode == "rr":
            raise ValueError(UVL_RR_MESSAGE)
        modes = ["vr"]
    rows = [benchmark(model, scene.template, pose, cam, m, args.repetitions, args.warmup, args.time_budget)
            for m in modes]
    print(f"{'mode':<6}{'frames':>8}{'ms/frame':>12}{'FPS':>10}{'samples/px':>12}{'queries':>10}")
    for r in rows:
        name = "VR" if r.mode == "vr" else "RR"
        flag = "" if r.completed else "  (time budget hit)"
        print(f"{name:<6}{r.frames:>8}{r.mean_ms:>12.2f}{r.fps:>10.3f}{r.samples_per_pixel:>12}"
              f"{r.texture_queries:>10}{flag}")
    if len(rows) == 2 and rows[1].fps > 0:
        print(f"FPS ratio RR/VR: {rows[0].fps / rows[1].fps:.1f}")
    if args.out:
        import csv

        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_HEADER)
            for r in rows:
                d = r.as_dict()
                w.writerow([d[k] for k in BENCH_HEADER])
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate, load_scene

    scene = load_scene(args.scene)
    model = _load_model(args.model)
    cams = None
    if args.cameras:
        try:
            cams = [int(c) for c in args.cameras.split(",")]
        except ValueError:
            raise UsageError(f"--cameras expects comma-separated integers, got {args.cameras!r}") from None
        if any(c < 0 or c >= len(scene.cameras) for c in cams):
            raise UsageError("--cameras index out of range")
    from .raster import UVL_RR_MESSAGE

    if model.config.uvl and args.mode == "rr":
        raise ValueError(UVL_RR_MESSAGE)
    res = evaluate(model, scene, args.split, args.mode, cameras=cams)
    print(f"{'camera':>6}{'pose':>6}{'PSNR':>9}{'SSIM':>8}")
    for r in res.rows:
        print(f"{r['camera']:>6}{r['pose']:>6}{r['psnr']:>9.2f}{r['ssim']:>8.4f}")
    print(f"mean ({args.split} poses, {args.mode}): PSNR {res.mean_psnr:.2f} dB, SSIM {res.mean_ssim:.4f}")
    if args.out:
        res.write_csv(args.out)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "bench": cmd_bench, "eval": cmd_eval}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = resolve(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"nes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _log_config(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"nes: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"nes: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
