"""Command-line entry points: simulate, train, eval, bench, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, from_ini, load_config, to_ini
from .harness import bench_csv, bench_fusion, evaluate_model, run_gradchecks
from .head import write_detections
from .metrics import metrics_table, write_pr_curves
from .serialize import load_tensors
from .sim import CLASSES, DatasetError, generate_scene, read_dataset, write_dataset
from .train import NumericalError, load_model, train, write_loss_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("attentivegru")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [model] [sim] [train] [eval] sections")
    common.add_argument("--preset", choices=("desk", "full"), default="desk",
                        help="defaults the config file is applied on top of (default: desk)")
    common.add_argument("--seed", type=int, help="override the seed of the command")
    common.add_argument("--out", type=Path, help="output path")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    common.add_argument("--precision", choices=("f32", "f64"), help="training precision")
    common.add_argument("--mode", choices=("attentivegru", "baseline"), help="model variant")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="attentivegru", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="write a simulated dataset")
    p.add_argument("--num-sequences", type=int, default=100)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("bench", parents=[common], help="fusion-layer runtime and MAC count vs T")
    p.add_argument("--lengths", default="2,4,8,16", help="comma-separated sequence lengths")
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def apply_overrides(args, cfg: RunConfig) -> RunConfig:
    if args.mode:
        cfg.model = dataclasses.replace(cfg.model, mode=args.mode)
    if args.precision:
        cfg.train = dataclasses.replace(cfg.train, precision=args.precision)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.sim_seed = args.seed
    return cfg.validate()


def resolve_config(args) -> RunConfig:
    return apply_overrides(args, load_config(args.config, args.preset))


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise DatasetError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise DatasetError(f"{path} is not empty (use --force to write into it)")
    path.mkdir(parents=True, exist_ok=True)


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    if args.num_sequences < 0:
        raise UsageError("--num-sequences must be >= 0")
    _prepare_dir(out, args.force)
    base = cfg.sim_seed * 1_000_000
    scenes = [generate_scene(cfg.sim, base + i) for i in range(args.num_sequences)]
    files = write_dataset(scenes, out)
    manifest = {"format": "radarsim-dataset/1", "num_sequences": len(files), "seed": cfg.sim_seed,
                "config_digest": cfg.sim.digest(), "files": [f.name for f in files]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (out / "config.ini").write_text(to_ini(cfg))
    print(f"wrote {len(files)} sequences to {out}")
    return EXIT_OK


def _read_data(path: Path):
    if not path.exists():
        raise DatasetError(f"dataset {path} does not exist")
    return read_dataset(path)


def cmd_train(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    sequences = _read_data(args.data)
    if not sequences:
        raise DatasetError(f"dataset {args.data} has no sequences")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(cfg))
    result = train(cfg, sequences, ckpt=out / "checkpoint", resume=args.resume)
    write_loss_log(out / "loss_log.csv", result.epochs)
    (out / "step_losses.txt").write_text("".join(f"{v!r}\n" for v in result.step_losses))
    for e in result.epochs:
        print(f"epoch {e['epoch']}: train {e['train_loss']:.5f} val {e['val_loss']:.5f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    ckpt = args.ckpt / "checkpoint" if (args.ckpt / "checkpoint").is_dir() else args.ckpt
    if not (ckpt / "manifest.json").exists():
        raise DatasetError(f"no checkpoint at {args.ckpt}")
    if args.config is None:
        # without an explicit config the model is rebuilt as it was trained
        _, meta = load_tensors(ckpt)
        if "config" in meta:
            cfg = apply_overrides(args, from_ini(meta["config"], RunConfig()))
    sequences = _read_data(args.data)
    model = load_model(ckpt, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(cfg))
    if not sequences:
        (out / "metrics.csv").write_text(metrics_table(None, CLASSES))
        write_detections(out / "detections.txt", [])
        print("empty dataset: wrote header-only metrics")
        return EXIT_OK
    dets, ev = evaluate_model(model, sequences, cfg)
    (out / "metrics.csv").write_text(metrics_table(ev, CLASSES))
    write_detections(out / "detections.txt", dets)
    write_pr_curves(ev, out / "pr", CLASSES)
    print(f"mAP {ev.summary.mean_ap:.4f} " + " ".join(f"AP{t:g}={v:.4f}" for t, v in ev.summary.ap.items()))
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    try:
        lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --lengths {args.lengths!r}") from None
    if len(lengths) < 2 or min(lengths) < 1:
        raise UsageError("--lengths needs at least two positive values")
    rows = bench_fusion(cfg, lengths, args.repeats, seed=cfg.train.seed)
    text = bench_csv(rows)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
        args.out.with_suffix(".ini").write_text(to_ini(cfg))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    summary = run_gradchecks(cfg, args.tolerance, seed=cfg.train.seed)
    text = "\n".join(summary.lines()) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
        args.out.with_suffix(".ini").write_text(to_ini(cfg))
    sys.stdout.write(text)
    if not summary.passed:
        print("gradcheck failed: " + ", ".join(summary.failures), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
