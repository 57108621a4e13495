"""Command-line entry point: ``fsgnet <gen-data|train|eval|ablate|export-maps>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import data as D
from .metrics import write_report_csv
from .network import CheckpointError, FsgnetConfig
from .tensor import FftResidueError, NonFiniteError
from .train import ROW_SETS, NumericError, TrainConfig, ablate, evaluate, export_feature_maps, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_net_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("network (overrides --net-config)")
    g.add_argument("--net-config", type=Path, help="FsgnetConfig as JSON")
    g.add_argument("--input-hw", type=int)
    g.add_argument("--stage-channels", type=_csv_ints)
    for name in ("use-miam", "use-mfm", "use-gpm"):
        g.add_argument(f"--{name}", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--gsgf-count", type=int)
    g.add_argument("--bn-momentum", type=float)
    g.add_argument("--cam-ratio", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training (overrides --train-config)")
    g.add_argument("--train-config", type=Path, help="TrainConfig as JSON")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr0", type=float)
    g.add_argument("--lr-min", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--betas", type=lambda s: tuple(float(v) for v in s.split(",")))
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-threshold", type=float)
    g.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--clip", type=float)


def _overrides(args, cls) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(cls)
            if getattr(args, f.name, None) is not None}


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise D.DataError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None


def _net_config(args) -> FsgnetConfig:
    base = FsgnetConfig.from_dict(_load_json(args.net_config)) if args.net_config else FsgnetConfig()
    try:
        return replace(base, **_overrides(args, FsgnetConfig)).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid network config: {exc}") from None


def _train_config(args) -> TrainConfig:
    base = TrainConfig(**_load_json(args.train_config)) if args.train_config else TrainConfig()
    try:
        return replace(base, **_overrides(args, TrainConfig)).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def cmd_gen_data(args) -> int:
    if args.spec:
        template = D.SceneTemplate(**_load_json(args.spec))
    else:
        template = D.preset(args.preset, args.hw)
    m = D.build_manifest(args.out, args.split_ratio, template, args.count, args.seed)
    n_train = sum(1 for e in m.entries if e[0] == "train")
    print(f"wrote {len(m.entries)} scenes ({n_train} train / {len(m.entries) - n_train} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, net_cfg = _train_config(args), _net_config(args)
    res = train(cfg, net_cfg, D.load_manifest(args.manifest), args.out, verbose=not args.quiet)
    if res.history:
        best = res.history[res.best_epoch - 1]
        print(f"best epoch {res.best_epoch}: iou {best.iou:.4f} niou {best.niou:.4f} pd {best.pd:.4f} "
              f"fa {best.fa_e6:.2f}e-6")
    print(f"checkpoint {res.checkpoint}, log {res.log}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rep, roc = evaluate(args.checkpoint, D.load_manifest(args.manifest), args.threshold, args.roc,
                        args.split, noise_sigma=args.noise_sigma, noise_seed=args.noise_seed)
    if args.report:
        write_report_csv([rep], args.report)
    print(f"iou {rep.iou:.6f}  niou {rep.niou:.6f}  pd {rep.pd:.6f}  fa {rep.fa_e6:.4f}e-6  n {rep.n_samples}")
    for flag in rep.flags:
        print(f"note: {flag}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rows = ablate(_net_config(args), _train_config(args), args.rows, args.seeds,
                  D.load_manifest(args.manifest), args.out, dry_run=args.dry_run, verbose=not args.quiet)
    for r in rows:
        print(f"({r['strategy']}) iou {r['iou_mean']:.4f} +- {r['iou_std']:.4f}  "
              f"niou {r['niou_mean']:.4f} +- {r['niou_std']:.4f}")
    return EXIT_OK


def cmd_export_maps(args) -> int:
    layers = [s for s in args.layers.split(",") if s]
    try:
        paths = export_feature_maps(args.checkpoint, args.image, layers, args.out)
    except ValueError as exc:
        if isinstance(exc, D.DataError):
            raise
        raise UsageError(str(exc)) from None
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fsgnet", description="Small-target segmentation network: data, training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset and manifest")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=160)
    g.add_argument("--split-ratio", type=float, default=0.8)
    g.add_argument("--preset", choices=sorted(D.PRESETS), default="default")
    g.add_argument("--spec", type=Path, help="scene template JSON (overrides --preset)")
    g.add_argument("--hw", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network on a manifest")
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--quiet", action="store_true")
    _add_net_flags(t)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--roc", type=Path, help="write the ROC curve CSV here")
    e.add_argument("--report", type=Path, help="write the metrics CSV here")
    e.add_argument("--noise-sigma", type=float, default=0.0, help="re-noise inputs (gray levels)")
    e.add_argument("--noise-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train a row set of ablation configurations")
    a.add_argument("--manifest", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--rows", choices=sorted(ROW_SETS), required=True)
    a.add_argument("--seeds", type=_csv_ints, default=(0,))
    a.add_argument("--dry-run", action="store_true", help="one epoch per row")
    a.add_argument("--quiet", action="store_true")
    _add_net_flags(a)
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-maps", help="write channel-averaged activations as PGM")
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--image", type=Path, required=True)
    x.add_argument("--layers", required=True, help="comma-separated tap names, e.g. mfm.0.in,mfm.0.out")
    x.add_argument("--out", type=Path, required=True)
    x.set_defaults(func=cmd_export_maps)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fsgnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, NonFiniteError, FftResidueError) as exc:
        print(f"fsgnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DataError, CheckpointError, OSError) as exc:
        print(f"fsgnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
