"""Command-line entry point: ``exnerf <subcommand> ...``.

Exit codes: 0 success, 2 invalid arguments or config, 3 numeric divergence, 4 I/O.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import InvalidArgumentError, TrainingDivergenceError, UnsupportedFormatError

log = logging.getLogger("exnerf")

EXIT_OK, EXIT_ARGS, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _emit(report, out=None):
    text = json.dumps(report, indent=1, default=_json_default,
                      allow_nan=True).replace("Infinity", "\"inf\"")
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _read_json(path_or_literal):
    if os.path.exists(path_or_literal):
        with open(path_or_literal) as fh:
            return json.load(fh)
    try:
        return json.loads(path_or_literal)
    except ValueError as exc:
        raise InvalidArgumentError(f"{path_or_literal!r} is neither a file nor JSON") from exc


def _beta(arg, default=None):
    if arg is None:
        return default
    beta = np.asarray(_read_json(arg), dtype=np.float64).reshape(-1)
    return beta


def _camera_from_args(args):
    from . import camera as cam
    from . import synth
    if args.camera:
        return cam.Camera.from_json(_read_json(args.camera))
    if args.data is not None and args.frame is not None:
        return synth.load_dataset(args.data).frames[args.frame].camera
    if args.azimuth is not None:
        scene = synth.load_dataset(args.data).scene if args.data else synth.SceneConfig()
        return synth.orbit_camera(scene, args.azimuth)
    raise InvalidArgumentError("give --camera, --data with --frame, or --azimuth")


def cmd_synth(args):
    from . import synth
    cfg = synth.SceneConfig.from_json(_read_json(args.config)) if args.config else synth.SceneConfig()
    overrides = {k: v for k, v in (("frames", args.frames), ("width", args.width),
                                   ("height", args.height), ("samples_per_ray", args.samples_per_ray))
                 if v is not None}
    overrides["seed"] = args.seed
    cfg = synth.SceneConfig.from_json(dict(cfg.to_json(), **overrides))
    ds = synth.generate_dataset(cfg, args.out)
    _emit({"out": args.out, "frames": len(ds.frames), "train": ds.train_indices,
           "val": ds.val_indices})


def cmd_train(args):
    from . import synth, training
    ds = synth.load_dataset(args.data)
    state = None
    if args.resume:
        state, _ = training.restore(args.resume)
        config = state.config
        if args.iterations:
            config.iterations = args.iterations
    else:
        field = training.desk_field_config(use_prior=not args.no_prior) if not args.full_scale \
            else training.FieldConfig(use_prior=not args.no_prior)
        config = training.TrainConfig(iterations=args.iterations or 20000,
                                      batch_rays=args.batch_rays, seed=args.seed,
                                      frr_weight=args.frr_weight, field=field,
                                      checkpoint_every=args.checkpoint_every,
                                      log_every=args.log_every)
    state = training.train(ds, config, args.out, state=state)
    _emit({"checkpoint": os.path.join(args.out, "model.ckpt"), "iterations": state.iteration,
           "final": state.stats})


def cmd_render(args):
    from .field import render_image
    from .imageio import write_depth_png, write_rgb_png
    from .prior import rasterize_silhouette
    from .training import load_model, scene_mesh
    model, header = load_model(args.ckpt)
    camera = _camera_from_args(args)
    frame = args.code_frame
    beta = _beta(args.beta, np.zeros(50))
    mask = rasterize_silhouette(scene_mesh(header), camera).bits
    scene = header["scene"]
    img, depth, _ = render_image(model, camera, model.latents.deformation.value[frame],
                                 model.latents.appearance.value[frame], beta, mask,
                                 scene["t_near"], scene["t_far"])
    write_rgb_png(args.out, img)
    if args.depth:
        write_depth_png(args.depth, depth, scene["t_near"], scene["t_far"])
    _emit({"image": args.out, "depth": args.depth})


def cmd_eval(args):
    from . import synth
    from .evaluation import evaluate
    from .training import load_model
    model, _ = load_model(args.ckpt)
    ds = synth.load_dataset(args.data)
    report = evaluate(model, ds, frames=args.frames, steps=args.steps, lr=args.lr,
                      batch_rays=args.batch_rays, seed=args.seed)
    _emit(report.to_json(), args.out)


def cmd_reanimate(args):
    from .evaluation import DriveSequence, reanimate
    from .training import load_model
    model, header = load_model(args.ckpt)
    drive = DriveSequence.load(args.drive)
    report = reanimate(model, header, drive, args.out)
    _emit(report, args.report)


def cmd_ablate(args):
    from .evaluation import ablate_background
    from .training import load_model
    on, off = load_model(args.with_prior), load_model(args.without_prior)
    camera = _camera_from_args(args)
    beta_a = _beta(args.beta_a)
    beta_b = _beta(args.beta_b)
    if beta_a is None or beta_b is None:
        raise InvalidArgumentError("--beta-a and --beta-b are required")
    stats = ablate_background(on, off, camera, beta_a, beta_b, args.out)
    _emit(stats, args.report)


def _camera_args(p):
    p.add_argument("--camera", help="camera JSON object or file")
    p.add_argument("--data", help="dataset directory (with --frame)")
    p.add_argument("--frame", type=int, help="take the camera of this dataset frame")
    p.add_argument("--azimuth", type=float, help="orbit camera at this azimuth in degrees")


def build_parser():
    parser = argparse.ArgumentParser(prog="exnerf", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--deterministic", action="store_true",
                        help="single BLAS thread so reductions run in a fixed order")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic oracle dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="SceneConfig JSON (object or file)")
    p.add_argument("--frames", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--samples-per-ray", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a field to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-rays", type=int, default=128)
    p.add_argument("--frr-weight", type=float, default=1.0)
    p.add_argument("--no-prior", action="store_true", help="feed the expression to every ray")
    p.add_argument("--full-scale", action="store_true", help="full-size networks and samples")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=2000)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one image from a checkpoint")
    p.add_argument("--ckpt", required=True)
    _camera_args(p)
    p.add_argument("--beta", help="50 numbers as JSON (default zeros)")
    p.add_argument("--code-frame", type=int, default=0, help="latent codes of this frame")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", help="also write a 16-bit depth PNG here")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="fit codes on validation frames and report MSE/PSNR")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frames", type=int, nargs="*")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-rays", type=int, default=32)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reanimate", help="render a driving sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--drive", required=True, help="JSON array of {beta, camera}")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_reanimate)

    p = sub.add_parser("ablate-background", help="outside-silhouette change between expressions")
    p.add_argument("--with-prior", required=True)
    p.add_argument("--without-prior", required=True)
    _camera_args(p)
    p.add_argument("--beta-a", required=True)
    p.add_argument("--beta-b", required=True)
    p.add_argument("--out", help="directory for diff images")
    p.add_argument("--report")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ARGS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = 1 if args.deterministic else args.threads
    if threads is not None and threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_ARGS
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=threads):
            args.func(args)
    except (InvalidArgumentError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (TrainingDivergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, default=_json_default), file=sys.stderr)
        return EXIT_DIVERGED
    except (UnsupportedFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
