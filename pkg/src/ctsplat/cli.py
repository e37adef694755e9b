"""Command line entry points: ``ctsplat generate|train|render|evaluate|sweep``.

Every subcommand takes ``--config FILE``, a JSON object whose keys are the
subcommand's option names (dashes or underscores). Flags given on the command
line win over the file. ``--threads`` (or ``CTSPLAT_THREADS``) caps the
number of worker threads.

Exit status is 0 on success, 2 for bad flags or values and 1 for failures
while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("ctsplat")

THREADS_ENV = "CTSPLAT_THREADS"
DEFAULT_FRACTIONS = (0.5, 0.25, 0.10, 0.05)
SPLIT_FILE = "split.json"

# train flag -> TrainConfig field; the dest names double as config-file keys
_TRAIN_FLAGS = {
    "iterations": int, "train_fraction": float, "seed": int,
    "lambda_l1": float, "lambda_dssim": float, "lambda_beta": float, "lambda_tv": float,
    "lr_position_init": float, "lr_position_final": float, "lr_log_scale": float,
    "lr_rotation": float, "lr_opacity": float, "lr_intensity": float,
    "densify_from": int, "densify_until": int, "densify_interval": int,
    "densify_grad_threshold": float, "opacity_reset_interval": int, "max_gaussians": int,
    "n_init": int, "checkpoint_interval": int,
}
_TRAIN_HELP = {
    "iterations": "optimization steps (default 20000)",
    "train_fraction": "fraction of views used for training (default 0.5)",
    "seed": "random seed for initialization and view sampling (default 0)",
    "lambda_l1": "L1 weight (default 0.8)",
    "lambda_dssim": "D-SSIM weight (default 0.2)",
    "lambda_beta": "opacity-map Beta regularizer weight (default 1e-3)",
    "lambda_tv": "total variation weight (default 1e-4)",
    "lr_position_init": "initial position learning rate, times scene extent (default 1.6e-4)",
    "lr_position_final": "final position learning rate, times scene extent (default 1.6e-6)",
    "lr_log_scale": "log-scale learning rate (default 5e-3)",
    "lr_rotation": "rotation learning rate (default 1e-3)",
    "lr_opacity": "opacity logit learning rate (default 5e-2)",
    "lr_intensity": "intensity learning rate (default 2.5e-3)",
    "densify_from": "first densification iteration (default 500)",
    "densify_until": "last densification iteration (default 15000)",
    "densify_interval": "iterations between densification steps (default 100)",
    "densify_grad_threshold": "mean screen-space gradient that triggers densification (default 2e-4)",
    "opacity_reset_interval": "iterations between opacity resets (default 3000)",
    "max_gaussians": "upper bound on the cloud size (default unbounded)",
    "n_init": "number of initial Gaussians (default 10000)",
    "checkpoint_interval": "iterations between checkpoint PLYs, 0 disables (default 5000)",
}


class UsageError(Exception):
    """Bad flag values detected after parsing; reported with exit status 2."""


# ---------------------------------------------------------------- helpers


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _dims(text: str) -> tuple[int, int, int]:
    try:
        vals = [int(x) for x in text.lower().replace("x", ",").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or NX,NY,NZ, got {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected N or NX,NY,NZ, got {text!r}")
    return tuple(vals)


def set_threads(n: int | None) -> None:
    """Cap numba worker threads; ``None`` falls back to ``CTSPLAT_THREADS``."""
    import numba

    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be at least 1, got {n}")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of option defaults (flags override)")
    p.add_argument("--threads", type=int, help=f"worker thread cap (default ${THREADS_ENV} or all cores)")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")


def _add_train_flags(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("training")
    for name, typ in _TRAIN_FLAGS.items():
        if name in skip:
            continue
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                       help=_TRAIN_HELP[name])
    g.add_argument("--lr-all", type=float, default=None,
                   help="set every learning rate to this value (applied before the per-group flags)")


def _train_config(args):
    from .trainer import TrainConfig

    given = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k, None) is not None}
    try:
        cfg = TrainConfig()
        if args.lr_all is not None:
            cfg = cfg.with_all_lr(args.lr_all)
        return TrainConfig.from_dict({**cfg.to_dict(), **given})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _load_dataset(path):
    from .dataset import Dataset

    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return Dataset.load(path)


def _write_split(out: Path, train_idx, test_idx, fraction, seed) -> None:
    d = {"train_fraction": fraction, "seed": seed,
         "train": [int(i) for i in train_idx], "test": [int(i) for i in test_idx]}
    (out / SPLIT_FILE).write_text(json.dumps(d, indent=2) + "\n")


def _test_indices(args, n_views: int) -> list[int]:
    """Held-out views: explicit flag, then the split saved next to the model, then recomputed."""
    from .trainer import split_views

    if getattr(args, "test_indices", None) is not None:
        idx = [int(i) for i in args.test_indices]
    elif args.train_fraction is None and (Path(args.model).parent / SPLIT_FILE).exists():
        idx = json.loads((Path(args.model).parent / SPLIT_FILE).read_text())["test"]
    else:
        frac = 0.5 if args.train_fraction is None else args.train_fraction
        if not 0.0 < frac <= 1.0:
            raise UsageError(f"train fraction must lie in (0, 1], got {frac}")
        idx = list(split_views(n_views, frac)[1])
    bad = [i for i in idx if not 0 <= i < n_views]
    if bad:
        raise UsageError(f"test view indices out of range for {n_views} views: {bad}")
    return idx


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    from .geometry import ScanGeometry
    from .phantom import generate_dataset, make_head_phantom

    try:
        geom = ScanGeometry(n_views=args.n_views, angular_step_deg=args.step,
                            angular_start_deg=args.start_angle, image_width=args.image_size,
                            image_height=args.image_size)
        geom.validate()
        if min(args.dims) < 8:
            raise ValueError(f"phantom needs at least 8 voxels per axis, got {args.dims}")
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    ph = make_head_phantom(args.dims, seed=args.seed, fov_side=geom.fov_side)
    m = generate_dataset(ph, geom, args.out, float_sidecar=args.float_sidecar)
    print(f"wrote {len(m.views)} views of {args.image_size}x{args.image_size} to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _train_config(args)
    ds = _load_dataset(args.manifest)
    out = Path(args.out)
    res = train(ds, cfg, out_dir=out)
    _write_split(out, res.train_indices, res.test_indices, cfg.train_fraction, cfg.seed)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"trained on {len(res.train_indices)} views ({len(res.test_indices)} held out); "
          f"{len(res.cloud)} Gaussians written to {out / 'model.ply'}")
    return 0


def cmd_render(args) -> int:
    from .formats import read_ply, write_image
    from .geometry import pose_at_angle
    from .rasterizer import render

    if (args.angles is None) == (not args.all_test):
        raise UsageError("give exactly one of --angles or --all-test")
    ds = _load_dataset(args.manifest)
    geom = ds.geometry
    if args.all_test:
        angles = [float(ds.angles_deg[k]) for k in _test_indices(args, len(ds))]
    else:
        angles = args.angles
        bad = [a for a in angles if not (math.isfinite(a) and 0.0 <= a < 360.0)]
        if bad:
            raise UsageError(f"angles must lie in [0, 360) degrees, got {bad}")
    cloud = read_ply(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for a in angles:
        img = render(cloud, pose_at_angle(geom, a), geom.image_width, geom.image_height)
        write_image(img, out / f"render_{a:07.3f}.png")
    print(f"wrote {len(angles)} renders to {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .formats import read_ply
    from .metrics import evaluate, write_summary

    ds = _load_dataset(args.manifest)
    idx = _test_indices(args, len(ds))
    if not idx:
        raise UsageError("empty test set")
    cloud = read_ply(args.model)
    frac = args.train_fraction
    if frac is None and (Path(args.model).parent / SPLIT_FILE).exists():
        frac = json.loads((Path(args.model).parent / SPLIT_FILE).read_text())["train_fraction"]
    rep = evaluate(cloud, ds, idx, math.nan if frac is None else frac, len(ds) - len(idx))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "metrics.csv")
    write_summary([rep], out / "summary.csv")
    print(rep.table())
    return 0


def cmd_sweep(args) -> int:
    from .metrics import sweep_fractions, sweep_table

    cfg = _train_config(args)
    bad = [f for f in args.fractions if not 0.0 < f <= 1.0]
    if bad:
        raise UsageError(f"fractions must lie in (0, 1], got {bad}")
    ds = _load_dataset(args.manifest)
    reports = sweep_fractions(ds, args.fractions, cfg, out_dir=args.out)
    print(sweep_table(reports))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ctsplat",
        description="Gaussian splatting for CT projection views: simulate a scan, "
                    "fit a Gaussian cloud, render and evaluate held-out angles.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("generate", help="make a head phantom and its DRR orbit dataset")
    g.add_argument("--out", required=True, type=Path, help="output directory")
    g.add_argument("--dims", type=_dims, default=(128, 128, 128), help="phantom voxels, N or NX,NY,NZ (default 128)")
    g.add_argument("--n-views", type=int, default=360, help="number of projection views (default 360)")
    g.add_argument("--step", type=float, default=1.0, help="angular step in degrees (default 1)")
    g.add_argument("--start-angle", type=float, default=0.0, help="first view angle in degrees (default 0)")
    g.add_argument("--image-size", type=int, default=128, help="square image side in pixels (default 128)")
    g.add_argument("--seed", type=int, default=0, help="phantom inclusion seed (default 0)")
    g.add_argument("--float-sidecar", action="store_true", help="also save float64 .npy copies of each view")
    _add_common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a Gaussian cloud to a dataset's training views")
    t.add_argument("--manifest", required=True, type=Path, help="dataset manifest.json (or its directory)")
    t.add_argument("--out", required=True, type=Path, help="output directory for model, log and checkpoints")
    _add_train_flags(t)
    _add_common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render projection views from a trained model")
    r.add_argument("--model", required=True, type=Path, help="trained PLY")
    r.add_argument("--manifest", required=True, type=Path, help="dataset manifest supplying the geometry")
    r.add_argument("--out", required=True, type=Path, help="output directory for PNGs")
    r.add_argument("--angles", type=_float_list, help="comma-separated view angles in degrees")
    r.add_argument("--all-test", action="store_true", help="render every held-out view of the dataset")
    r.add_argument("--train-fraction", type=float, help="split used to find held-out views "
                   "(default: split.json next to the model, else 0.5)")
    _add_common(r)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("evaluate", help="score a model on held-out views (PSNR, SSIM, size)")
    e.add_argument("--model", required=True, type=Path, help="trained PLY")
    e.add_argument("--manifest", required=True, type=Path, help="dataset manifest")
    e.add_argument("--out", required=True, type=Path, help="directory for metrics.csv and summary.csv")
    e.add_argument("--train-fraction", type=float, help="split defining the held-out views "
                   "(default: split.json next to the model, else 0.5)")
    e.add_argument("--test-indices", type=_float_list, help="explicit comma-separated held-out view indices")
    _add_common(e)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="train and evaluate at several training fractions")
    s.add_argument("--manifest", required=True, type=Path, help="dataset manifest")
    s.add_argument("--out", required=True, type=Path, help="output directory")
    s.add_argument("--fractions", type=_float_list, default=list(DEFAULT_FRACTIONS),
                   help="comma-separated training fractions (default 0.5,0.25,0.10,0.05)")
    _add_train_flags(s, skip=("train_fraction",))
    _add_common(s)
    s.set_defaults(func=cmd_sweep)
    return p


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from ``--config`` so explicit flags still win."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config file {args.config}: {exc}")
    if not isinstance(data, dict):
        parser.error(f"config file {args.config} must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in data.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            parser.error(f"unknown key {key!r} in config file for '{args.command}'")
        action = known[dest]
        if action.type is not None and isinstance(val, str):
            try:
                val = action.type(val)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                parser.error(f"config key {key!r}: {exc}")
        elif action.type is _float_list and isinstance(val, (int, float)):
            val = [float(val)]
        elif action.type is _dims and isinstance(val, (int, list)):
            val = _dims(",".join(str(v) for v in np.atleast_1d(val)))
        defaults[dest] = val
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config_file(parser, argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        set_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"ctsplat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to status 1
        print(f"ctsplat {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
