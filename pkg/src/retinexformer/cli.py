"""Command-line entry point: ``rxf <command> [flags]``.

Exit codes: 0 ok, 2 usage/validation, 3 I/O, 4 corrupt data, 5 numeric failure.
Every command echoes its resolved configuration to stderr as ``key=value``
lines, which can be fed back through ``--config``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .attention import FLOP_COLUMNS, flop_report
from .checks import SCOPES, run_grad_checks
from .data import load_image, read_dataset, save_image, synthesize_dataset, write_dataset
from .errors import ConfigError, NumericError, RetinexformerError, UsageError
from .network import ModelConfig, load_weights, save_weights
from .orf import ORF_MODES, DegradationConfig
from .train import TrainConfig, enhance, evaluate, metric_row, summarize, train, write_log, write_metrics

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CORRUPT, EXIT_NUMERIC = 0, 2, 3, 4, 5



def deterministic() -> bool:
    return os.environ.get("RXF_DETERMINISTIC", "") == "1"


# --------------------------------------------------------------------------
# key=value configuration


def _bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _ints(text):
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# every trainable setting, its parser, and which dataclass owns it
TRAIN_KEYS = {
    "base_channels": (int, "model"),
    "heads_per_scale": (_ints, "model"),
    "igab_per_stage": (_ints, "model"),
    "pos_encoding": (str, "model"),
    "qk_norm": (_bool, "model"),
    "steps": (int, "train"),
    "batch_size": (int, "train"),
    "crop_size": (int, "train"),
    "seed": (int, "train"),
    "lr_start": (float, "train"),
    "lr_end": (float, "train"),
    "mode": (str, "train"),
    "aux_lit_loss": (_bool, "train"),
    "augment": (_bool, "train"),
    "log_every": (int, "train"),
}


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are ignored."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TRAIN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve_train_settings(file_values, flag_values):
    """Defaults, then the config file, then flags. Returns (ModelConfig, TrainConfig)."""
    merged = {}
    for key, (parse, _) in TRAIN_KEYS.items():
        if flag_values.get(key) is not None:
            merged[key] = parse(flag_values[key])
        elif key in file_values:
            try:
                merged[key] = parse(file_values[key])
            except ValueError:
                raise ConfigError(f"bad value for {key}: {file_values[key]!r}") from None
    model_keys = {k: v for k, v in merged.items() if TRAIN_KEYS[k][1] == "model"}
    train_keys = {k: v for k, v in merged.items() if TRAIN_KEYS[k][1] == "train"}
    crop = train_keys.get("crop_size", TrainConfig.crop_size)
    model = ModelConfig(crop_size=crop, **model_keys)
    return model, TrainConfig(**train_keys)


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def print_resolved(command, settings):
    lines = [f"# rxf {command} resolved config", f"deterministic={int(deterministic())}"]
    lines += [f"{k}={_format(v)}" for k, v in settings.items()]
    print("\n".join(lines), file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    cfg = DegradationConfig(sigma=args.sigma, l_min=args.lmin)
    print_resolved("synth-data", {"clean_dir": args.clean_dir, "out_dir": args.out_dir,
                                  "count": args.count, "seed": args.seed, **asdict(cfg)})
    clean_dir = Path(args.clean_dir)
    if not clean_dir.is_dir():
        raise FileNotFoundError(f"clean directory {clean_dir} does not exist")
    paths = sorted(clean_dir.glob("*.ppm"))
    if not paths:
        raise UsageError(f"no .ppm files in {clean_dir}")
    cleans = [load_image(p).data.astype(np.float64) for p in paths]
    pairs = synthesize_dataset(cleans, args.count, cfg, args.seed)
    write_dataset(args.out_dir, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out_dir}")
    return EXIT_OK


def _dataset(path):
    items = read_dataset(path)
    if not items:
        raise UsageError(f"dataset {path} is empty")
    return items


def cmd_train(args):
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k, None) for k in TRAIN_KEYS}
    model, cfg = resolve_train_settings(file_values, flags)
    print_resolved("train", {"data": args.data, "out_weights": args.out_weights, "log": args.log,
                             **{f.name: getattr(model, f.name) for f in fields(model)},
                             **asdict(cfg)})
    items = _dataset(args.data)
    result = train(model, [pair for _, pair in items], cfg)
    save_weights(result.params, args.out_weights)
    if args.log:
        write_log(result.log, args.log)
    print(f"final loss {result.losses[-1]:.6f}; weights written to {args.out_weights}")
    return EXIT_OK


def _enhance_targets(inputs, out):
    """Pair every input PPM with its output path."""
    files = []
    for item in inputs:
        path = Path(item)
        files.extend(sorted(path.glob("*.ppm")) if path.is_dir() else [path])
    if not files:
        raise UsageError("no input images")
    out = Path(out)
    single = len(files) == 1 and not Path(inputs[0]).is_dir() and out.suffix == ".ppm"
    if single:
        return [(files[0], out)]
    out.mkdir(parents=True, exist_ok=True)
    return [(f, out / f.name) for f in files]


def cmd_enhance(args):
    print_resolved("enhance", {"weights": args.weights, "in": ",".join(args.inputs),
                               "out": args.out, "mode": args.mode})
    params = load_weights(args.weights)
    for src, dst in _enhance_targets(args.inputs, args.out):
        image = load_image(src)
        out = enhance(image, params, args.mode, params.config)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output for {src}")
        save_image(out, dst)
        print(f"{src} -> {dst}")
    return EXIT_OK


def cmd_eval(args):
    if (args.weights is None) == (args.pred is None):
        raise UsageError("give exactly one of --weights or --pred")
    print_resolved("eval", {"weights": args.weights, "pred": args.pred, "data": args.data,
                            "report": args.report, "mode": args.mode})
    items = _dataset(args.data)
    if args.weights is not None:
        params = load_weights(args.weights)
        rows = evaluate(params, items, args.mode, params.config)
    else:
        pred = Path(args.pred)
        rows = [metric_row(n, p.low, load_image(pred / f"{n}.ppm"), p.reference) for n, p in items]
    write_metrics(rows, args.report)
    mean = summarize(rows)
    print(
        f"mean PSNR in {mean['psnr_in']:.4f} out {mean['psnr_out']:.4f} | "
        f"SSIM in {mean['ssim_in']:.4f} out {mean['ssim_out']:.4f}"
    )
    return EXIT_OK


def cmd_grad_check(args):
    print_resolved("grad-check", {"scope": args.scope, "seed": args.seed})
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    failed = 0
    print("scope,target,max_rel_error,threshold,status")
    for scope in scopes:
        for row in run_grad_checks(scope, seed=args.seed):
            status = "ok" if row.passed else "FAIL"
            failed += not row.passed
            print(f"{row.scope},{row.target},{row.max_rel_error:.3e},{row.threshold:.0e},{status}")
    return EXIT_NUMERIC if failed else EXIT_OK


def parse_grid_point(text):
    """``HxW,C,k`` -> (H, W, C, k)."""
    try:
        hw, c, k = text.split(",")
        h, w = hw.lower().split("x")
        return int(h), int(w), int(c), int(k)
    except ValueError:
        raise UsageError(f"grid point must look like 16x16,8,2, got {text!r}") from None


def cmd_flops(args):
    grid = [parse_grid_point(g) for g in args.grid]
    print_resolved("flops", {"grid": " ".join(args.grid)})
    rows = flop_report(grid)
    writer = csv.writer(sys.stdout)
    writer.writerow(FLOP_COLUMNS)
    for row in rows:
        writer.writerow([row[c] for c in FLOP_COLUMNS])
    mismatched = [r for r in rows if r["formula_igmsa"] != r["measured"]]
    return EXIT_NUMERIC if mismatched else EXIT_OK


# --------------------------------------------------------------------------
# parser


def _train_flags(p):
    for key, (parse, _) in TRAIN_KEYS.items():
        if key == "steps":
            continue
        kind = str if parse in (_bool, _ints) else parse
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="rxf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="build a synthetic low-light dataset")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--lmin", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--log", help="CSV training log")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance PPM images")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="PPM files or directories")
    p.add_argument("--out", required=True, help="output .ppm (single input) or directory")
    p.add_argument("--mode", choices=ORF_MODES, default="lightup_map_plus_flu")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a dataset")
    p.add_argument("--weights")
    p.add_argument("--pred", help="directory of <name>.ppm predictions to score instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--mode", choices=ORF_MODES, default="lightup_map_plus_flu")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="ops")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("flops", help="attention cost formula vs instrumented count")
    p.add_argument("--grid", nargs="+", required=True, metavar="HxW,C,k")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: unknown flag, missing value, --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RetinexformerError as exc:
        print(f"rxf {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError, OSError) as exc:
        print(f"rxf {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"rxf {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
