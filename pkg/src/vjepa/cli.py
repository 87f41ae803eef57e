"""Command-line entry point: ``vjepa <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, mask_preset, save_config
from .data import ClipFormatError, iter_batches, save_clips
from .masking import LONG_RANGE, RANDOM_TUBE, SHORT_RANGE, MaskConfig, MaskError, mask_stats
from .optim import lr_at, momentum_at, wd_at

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="JSON run configuration (unknown keys are errors)")
    p.add_argument("--seed", type=int, help="top-level seed; all randomness derives from it")
    p.add_argument("--out", metavar="DIR", help="output directory (default: ./runs/<subcommand>)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-exact reruns")
    p.add_argument("--f64", action="store_true", help="run in 64-bit floating point")


def _checkpoint_arg(p):
    p.add_argument("--checkpoint", metavar="PATH",
                   help="VJPF checkpoint to evaluate (default: a randomly initialised model)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vjepa", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth-data", help="render synthetic sprite clips to a raw clip file")
    _common(p)
    p.add_argument("--count", type=int, default=256, help="number of clips (default 256)")

    p = sub.add_parser("pretrain", help="run feature-prediction (or pixel) pretraining")
    _common(p)
    p.add_argument("--iterations", type=int, help="training iterations (schedule rescaled)")
    p.add_argument("--batch-size", type=int, help="clips per iteration")
    p.add_argument("--objective", choices=("feature", "pixel"), help="prediction target kind")
    p.add_argument("--masks", metavar="PRESET",
                   help="multi-block | short | long | random-tube[r] | causal multi-block[p]")
    p.add_argument("--no-stop-gradient", action="store_true",
                   help="collapse ablation: targets from the trainable encoder, with gradient")
    p.add_argument("--checkpoint-every", type=int, help="iterations between checkpoints")

    p = sub.add_parser("probe", help="frozen evaluation with a linear or attentive probe")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--probe", choices=("frozen-linear", "frozen-attentive"), help="probe kind")
    p.add_argument("--clips-per-video", type=int, help="equal-segment clips per video")
    p.add_argument("--clip-frames", type=int, help="frames per evaluation clip")
    p.add_argument("--label-fraction", type=float, help="fraction of labelled training videos")
    p.add_argument("--low-shot", action="store_true", help="run 5%%/10%%/50%% x 3 stratified splits")
    p.add_argument("--online", action="store_true", help="probe the online encoder instead of the EMA one")

    p = sub.add_parser("finetune", help="end-to-end fine-tuning with layer-wise lr decay")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--layer-decay", type=float, help="per-block lr decay factor in (0, 1]")
    p.add_argument("--iterations", type=int, help="fine-tuning iterations")

    p = sub.add_parser("ablate", help="pretrain and probe a grid of configurations, write a CSV")
    _common(p)
    p.add_argument("--objectives", default="feature", help="comma-separated: feature,pixel")
    p.add_argument("--masks", default="multi-block", help="semicolon-separated mask presets")
    p.add_argument("--probes", default="frozen-attentive",
                   help="comma-separated: frozen-linear,frozen-attentive,finetune")
    p.add_argument("--iterations", type=int, help="pretraining iterations per cell")

    p = sub.add_parser("mask-stats", help="Monte-Carlo coverage statistics of a mask sampler")
    _common(p)
    p.add_argument("--kind", default="long", help="short | long | random-tube[r] | causal multi-block[p]")
    p.add_argument("--draws", type=int, default=10000, help="number of masks to sample")
    p.add_argument("--grid", default="8x14x14", help="token grid TxHxW (default 8x14x14)")

    p = sub.add_parser("grad-check", help="central-difference gradient suite in 64-bit mode")
    _common(p)
    p.add_argument("--seeds", type=int, default=20, help="number of random seeds (default 20)")
    p.add_argument("--no-composite", action="store_true", help="skip the end-to-end loss check")

    p = sub.add_parser("schedule-dump", help="write lr / weight decay / momentum schedules as CSV")
    _common(p)
    p.add_argument("--every", type=int, default=1, help="iteration stride (default 1)")

    p = sub.add_parser("median-check", help="L1 regression lands on the conditional median")
    _common(p)
    p.add_argument("--samples", type=int, default=3000, help="samples per x value")
    return parser


# ---------------------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    rep = {}
    if args.seed is not None:
        rep["seed"] = args.seed
    if args.deterministic:
        rep["deterministic"] = True
    if args.f64:
        rep["f64"] = True
    cfg = dataclasses.replace(cfg, **rep)
    if getattr(args, "iterations", None) is not None and args.command in ("pretrain", "ablate"):
        if args.iterations < 1:
            raise UsageError("--iterations must be >= 1")
        cfg = cfg.with_iterations(args.iterations)
    if args.command == "pretrain":
        if args.batch_size is not None:
            cfg = dataclasses.replace(cfg, batch_size=args.batch_size)
        if args.objective is not None:
            cfg = dataclasses.replace(cfg, objective=dataclasses.replace(cfg.objective, kind=args.objective))
        if args.no_stop_gradient:
            cfg = dataclasses.replace(cfg, objective=dataclasses.replace(cfg.objective, stop_gradient=False))
        if args.masks is not None:
            cfg = dataclasses.replace(cfg, masks=mask_preset(args.masks, cfg.encoder.patch.tubelet))
        if args.checkpoint_every is not None:
            cfg = dataclasses.replace(cfg, checkpoint_every=args.checkpoint_every)
    if args.command == "probe":
        ev = {}
        if args.probe is not None:
            ev["protocol"] = args.probe
        if args.clips_per_video is not None:
            ev["clips_per_video"] = args.clips_per_video
        if args.clip_frames is not None:
            ev["clip_frames"] = args.clip_frames
        if args.label_fraction is not None:
            ev["label_fraction"] = args.label_fraction
        if args.online:
            ev["use_target_encoder"] = False
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, **ev))
    if args.command == "finetune":
        ft = {}
        if args.layer_decay is not None:
            ft["layer_decay"] = args.layer_decay
        if args.iterations is not None:
            ft["iterations"] = args.iterations
        cfg = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, **ft))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_json(obj):
    print(json.dumps(obj, indent=2))


def _model(cfg: RunConfig, checkpoint):
    from . import train

    if checkpoint is None:
        with T.precision(np.float64 if cfg.f64 else np.float32):
            return train.build_state(cfg)
    return train.load_state(cfg, checkpoint)


def cmd_synth_data(args, cfg, out):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    from .train import data_spec

    spec = data_spec(cfg, "data")
    n = save_clips(out / "clips.vjcl", iter_batches(spec, args.count, 64))
    print(f"wrote {n} clips to {out / 'clips.vjcl'}")
    return EXIT_OK


def cmd_pretrain(args, cfg, out):
    from . import train

    def log(row):
        if row["iter"] % 50 == 0 or row["iter"] == cfg.iterations - 1:
            print(f"iter {row['iter']:6d}  loss {row['loss']:.5f}  lr {row['lr']:.3e}", flush=True)

    result = train.pretrain(cfg, out, log=log)
    print(f"done in {result.seconds:.1f}s; y-representation std ratio (final/init) {result.std_ratio:.4f}")
    return EXIT_OK


def cmd_probe(args, cfg, out):
    from . import train

    state = _model(cfg, args.checkpoint)
    feats = train.extract_features(state, cfg)
    if args.low_shot:
        reports = train.low_shot(state, cfg, features=feats)
    else:
        reports = [train.train_probe(state, cfg, feats)]
    rows = [r.row() for r in reports]
    (out / "reports.json").write_text(json.dumps(rows, indent=2) + "\n")
    _print_json(rows)
    return EXIT_OK


def cmd_finetune(args, cfg, out):
    from . import train

    report = train.finetune(_model(cfg, args.checkpoint), cfg)
    (out / "report.json").write_text(json.dumps(report.row(), indent=2) + "\n")
    _print_json(report.row())
    return EXIT_OK


def cmd_ablate(args, cfg, out):
    from . import train

    objectives = [s.strip() for s in args.objectives.split(",") if s.strip()]
    masks = [s.strip() for s in args.masks.split(";") if s.strip()]
    probes = [s.strip() for s in args.probes.split(",") if s.strip()]
    for o in objectives:
        if o not in ("feature", "pixel"):
            raise UsageError(f"unknown objective {o!r}")
    for m in masks:
        mask_preset(m)
    for p in probes:
        if p not in ("frozen-linear", "frozen-attentive", "finetune"):
            raise UsageError(f"unknown probe {p!r}")
    rows = train.ablate(cfg, objectives, masks, probes, out)
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


def _mask_config(kind: str, tubelet: int) -> MaskConfig:
    key = kind.strip().lower()
    if key == "short":
        return SHORT_RANGE
    if key == "long":
        return LONG_RANGE
    if key == "random-tube":
        return MaskConfig(kind=RANDOM_TUBE, tubelet=tubelet)
    configs = mask_preset(kind, tubelet)
    if len(configs) != 1:
        # causal presets hold a short and a long config; report the long one
        return configs[-1]
    return configs[0]


def _parse_grid(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad grid {text!r}; expected TxHxW") from None
    if len(dims) == 2:
        dims = (1,) + dims
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"bad grid {text!r}; expected TxHxW")
    return dims


MASK_STATS_FIELDS = ("kind", "num_blocks", "scale", "mean_coverage", "std_coverage")


def cmd_mask_stats(args, cfg, out):
    if args.draws < 1:
        raise UsageError("--draws must be >= 1")
    mcfg = _mask_config(args.kind, cfg.encoder.patch.tubelet)
    stats = mask_stats(mcfg, _parse_grid(args.grid), args.draws, seed=cfg.seed)
    row = {k: stats[k] for k in MASK_STATS_FIELDS}
    row["kind"] = args.kind
    with open(out / "mask_stats.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MASK_STATS_FIELDS)
        w.writeheader()
        w.writerow(row)
    w = csv.DictWriter(sys.stdout, fieldnames=MASK_STATS_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    return EXIT_OK


def cmd_grad_check(args, cfg, out):
    from .gradsuite import TOLERANCE, run_suite

    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    worst = run_suite(seeds, composite=not args.no_composite)
    (out / "grad_check.json").write_text(json.dumps(worst, indent=2) + "\n")
    failed = [k for k, v in worst.items() if not v < TOLERANCE]
    for k, v in worst.items():
        print(f"{'PASS' if v < TOLERANCE else 'FAIL'}  {k:16s} {v:.3e}")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_schedule_dump(args, cfg, out):
    if args.every < 1:
        raise UsageError("--every must be >= 1")
    s = cfg.schedule
    path = out / "schedule.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "lr", "wd", "momentum"])
        for it in range(0, s.total_iters, args.every):
            w.writerow([it, repr(lr_at(s, it)), repr(wd_at(s, it)), repr(momentum_at(s, it))])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_median_check(args, cfg, out):
    from .objective import median_oracle_check, skewed_conditional, train_tabular_l1

    x, y = skewed_conditional(args.samples, seed=cfg.seed)
    table = train_tabular_l1(x, y, seed=cfg.seed)
    spread = float(y.max() - y.min())
    err = median_oracle_check(x, y, table)
    means = {v.item(): float(y[x == v].mean()) for v in np.unique(x)}
    gap = min(abs(table[k] - means[k]) for k in table)
    result = {"spread": spread, "max_median_error": err, "tolerance": 0.01 * spread,
              "min_gap_to_mean": gap, "predictions": table, "conditional_means": means}
    (out / "median_check.json").write_text(json.dumps(result, indent=2) + "\n")
    _print_json(result)
    ok = err <= 0.01 * spread and gap > 0.01 * spread
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "mask-stats": cmd_mask_stats,
    "grad-check": cmd_grad_check,
    "schedule-dump": cmd_schedule_dump,
    "median-check": cmd_median_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        out = _out_dir(args)
        save_config(cfg, out / "config.json")
    except (ConfigError, UsageError, MaskError, ValueError, OSError) as e:
        print(f"vjepa {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with T.deterministic(cfg.deterministic):
            return COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError) as e:
        print(f"vjepa {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, RuntimeError, OSError, CheckpointError, ClipFormatError,
            MaskError, ValueError, KeyError) as e:
        print(f"vjepa {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
