"""Command-line entry point: ``chadet {gen-data,train,eval,infer}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import Config, ConfigError, load_config
from .geometry import Intrinsics
from .imageio import ImageFormatError, read_pfm, read_ppm, write_pfm
from .net import chadet_forward
from .synth import generate_dataset, load_split
from .tensor import ShapeError, Tensor
from .train import TrainingError, evaluate, load_params, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(path) -> Config:
    return load_config(path) if path else Config()


def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    generate_dataset(args.out, args.train, args.val, args.seed, cfg.synth_config())
    print(f"wrote {args.train} train / {args.val} val samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    data = args.data or cfg.data_root
    if data is None:
        raise UsageError("train: --data is required (or set data_root in the config)")
    tc = cfg.train_config()
    samples = load_split(data, "train")
    if not samples:
        raise FileNotFoundError(f"no samples in {Path(data) / 'train'}")
    tc.stage.check_input_size(*samples[0].gt_depth.shape)
    result = train(tc, samples, checkpoint_path=args.out, log_fn=print, resume_from=args.resume)
    print(f"trained {result.steps} steps; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    tc = cfg.train_config()
    params = load_params(args.ckpt, tc.stage)
    samples = load_split(args.data, args.split)
    if not samples:
        raise FileNotFoundError(f"no samples in {Path(args.data) / args.split}")
    result = evaluate(params, samples, tc)
    print(result.model.as_table())
    if args.baselines:
        for title, rep in (("sparse-to-dense output", result.quasi_dense),
                           ("constant mean depth", result.constant_mean),
                           ("min-pool fill", result.pooled_fill)):
            print(f"\n{title}:\n{rep.as_table()}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args.config)
    tc = cfg.train_config()
    params = load_params(args.ckpt, tc.stage)
    rgb = read_ppm(args.rgb)
    sparse = read_pfm(args.sparse)
    if rgb.shape[:2] != sparse.shape:
        raise ShapeError(f"rgb is {rgb.shape[1]}x{rgb.shape[0]} but sparse is {sparse.shape[1]}x{sparse.shape[0]}")
    H, W = sparse.shape
    K = Intrinsics(args.fx, args.fy or args.fx, args.cx, args.cy) if args.fx else Intrinsics.default_for(H, W)
    depth = chadet_forward(Tensor(rgb.transpose(2, 0, 1)[None]), Tensor(sparse[None, None]), params,
                           tc.stage, tc.depth_range, K)
    write_pfm(args.out, depth.data[0, 0])
    print(f"wrote {W}x{H} depth to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chadet", description="Depth completion on synthetic RGB-D scenes.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="render a synthetic dataset",
                       description="Render train/val splits of synthetic RGB + sparse depth samples.")
    g.add_argument("--out", required=True, help="dataset root directory (created if missing)")
    g.add_argument("--train", type=int, default=200, help="number of training samples (default 200)")
    g.add_argument("--val", type=int, default=40, help="number of validation samples (default 40)")
    g.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    g.add_argument("--config", help="config file; image size and point budget are read from it")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", description="Train with the photometric objective.")
    t.add_argument("--config", help="config file (defaults apply when omitted)")
    t.add_argument("--data", help="dataset root containing train/ (overrides data_root)")
    t.add_argument("--out", required=True, help="checkpoint path, rewritten after every epoch")
    t.add_argument("--resume", help="checkpoint to resume from (restores optimizer and RNG state)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report depth metrics", description="Evaluate a checkpoint on a split.")
    e.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", default="val", help="split directory name (default val)")
    e.add_argument("--config", help="config the checkpoint was trained with")
    e.add_argument("--baselines", action="store_true", help="also print the sparse-to-dense, constant-depth and min-pool baselines")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="complete one depth map", description="Predict dense depth for one frame.")
    i.add_argument("--ckpt", required=True, help="checkpoint to use")
    i.add_argument("--rgb", required=True, help="input image (binary PPM)")
    i.add_argument("--sparse", required=True, help="sparse depth (PFM, 0 = missing)")
    i.add_argument("--out", required=True, help="output dense depth (PFM)")
    i.add_argument("--config", help="config the checkpoint was trained with")
    i.add_argument("--fx", type=float, help="focal length in pixels (default: 60 degree field of view)")
    i.add_argument("--fy", type=float, help="vertical focal length (default: fx)")
    i.add_argument("--cx", type=float, help="principal point x (required with --fx)")
    i.add_argument("--cy", type=float, help="principal point y (required with --fx)")
    i.set_defaults(func=cmd_infer)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "fx", None) is not None and (args.cx is None or args.cy is None):
            raise UsageError("infer: --cx and --cy are required with --fx")
        return args.func(args)
    except SystemExit as e:            # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ConfigError, CheckpointError, ImageFormatError, ShapeError, TrainingError,
            ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
