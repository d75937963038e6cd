"""Command line entry point.

Subcommands: train, eval, export, verify, analyze. Runs are driven by
TOML config files; every output directory gets the config hash stamped
into its summary so results can be traced back to their configuration.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis
from .config import Config, ConfigError, build_datasets, load_config
from .inference import (check_equivalence, export_int, load_int_model,
                        packed_payload_bytes, save_int_model)
from .layers import build_model, load_checkpoint, load_full_precision, save_checkpoint
from .trainer import SGD, TrainingDiverged, evaluate, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3


def _load_cfg(args) -> Config:
    return load_config(args.config, getattr(args, "set", None) or [])


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_data, test_data = build_datasets(cfg)
    rng = np.random.default_rng(cfg.trainer.seed)
    model = build_model(cfg.model, rng)
    if args.init_from:
        load_full_precision(model, args.init_from)
    teacher = None
    if cfg.trainer.distill:
        if not args.teacher:
            raise ConfigError("distillation enabled but no --teacher checkpoint given")
        teacher, _ = load_checkpoint(args.teacher)
    opt = SGD(model, cfg.trainer.lr0, cfg.trainer.momentum, cfg.trainer.weight_decay)
    model, metrics, best = train(model, train_data, test_data, cfg.trainer,
                                 teacher=teacher, optimizer=opt)
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics.write_csv(os.path.join(cfg.out_dir, "metrics.csv"))
    metrics.write_summary(os.path.join(cfg.out_dir, "summary.json"),
                          extra={"config_hash": cfg.hash})
    save_checkpoint(os.path.join(cfg.out_dir, "last.ckpt"), model,
                    epoch=cfg.trainer.epochs - 1,
                    optimizer_state=opt.state_arrays(), cfg_hash=cfg.hash)
    if best:
        model.load_state(best["arrays"], best["steps"])
        save_checkpoint(os.path.join(cfg.out_dir, "best.ckpt"), model,
                        epoch=best["epoch"], cfg_hash=cfg.hash)
    print(f"best top1 {metrics.best_top1:.4f} (epoch {metrics.best_epoch}); "
          f"outputs in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    _, test_data = build_datasets(cfg)
    model, header = load_checkpoint(args.ckpt)
    if model.config.arch == "mlp":
        want = model.config.input_dim
        have = test_data.x.reshape(len(test_data), -1).shape[1]
    else:
        want = tuple(model.config.input_shape)
        have = tuple(test_data.x.shape[1:])
    if want != have:
        raise ConfigError(f"dataset dims {have} do not match model input {want}")
    top1, top5 = evaluate(model, test_data)
    print(f"top1 {top1:.4f}")
    print(f"top5 {top5:.4f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"top1": top1, "top5": top5,
                       "config_hash": header.get("config_hash", "")}, f, indent=2)
            f.write("\n")
    return EXIT_OK


def cmd_export(args) -> int:
    model, header = load_checkpoint(args.ckpt)
    im = export_int(model)
    im.meta["config_hash"] = header.get("config_hash", "")
    save_int_model(args.out, im)
    size = analysis.model_size(im)
    print(f"exported {args.out}: payload {size['payload_bytes']} bytes "
          f"(+{size['overhead_bytes']} overhead)")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load_cfg(args)
    _, test_data = build_datasets(cfg)
    model, _ = load_checkpoint(args.ckpt)
    im = load_int_model(args.intmodel) if args.intmodel else export_int(model)
    batch = test_data.x[:args.batch]
    report = check_equivalence(model, im, batch, tol=args.tol)
    print(f"max relative discrepancy {report['max_rel_discrepancy']:.3e}, "
          f"argmax agreement {report['argmax_agreement']:.4f}")
    if not report["passed"]:
        print(f"FAIL at tol={args.tol}", file=sys.stderr)
        return EXIT_VERIFY
    print("PASS")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.kind == "r-ratio":
        cfg = _load_cfg(args)
        train_data, _ = build_datasets(cfg)
        model, _ = load_checkpoint(args.ckpt)
        rows = []
        modes = [args.gscale] if args.gscale else list(analysis.GSCALE_MODES)
        for mode in modes:
            for rec in analysis.measure_R(model, train_data, window=args.window,
                                          gscale_mode=mode):
                rows.append({"layer": rec.layer, "param": rec.param,
                             "gscale": rec.gscale_mode, "window": rec.window,
                             "r": rec.r})
        analysis.emit_report("r_ratio", rows, args.out)
    elif args.kind == "qe-sweep":
        model, _ = load_checkpoint(args.ckpt)
        rows = []
        for layer in model.layers:
            if layer.weight_step is None:
                continue
            res = analysis.quant_error_sweep(
                layer.weight.data, layer.weight_step.value,
                layer.weight_spec, layer=layer.name)
            rows.append({"layer": res.layer, "s_hat": res.s_hat,
                         "mae_s": res.best_s["mae"], "mse_s": res.best_s["mse"],
                         "kl_s": res.best_s["kl"],
                         "mae_pct": res.percent_diff["mae"],
                         "mse_pct": res.percent_diff["mse"],
                         "kl_pct": res.percent_diff["kl"]})
        if not rows:
            raise ConfigError("checkpoint has no quantized layers to sweep")
        analysis.emit_report("qe_sweep", rows, args.out)
    else:  # size-table
        cfg = _load_cfg(args)
        _, test_data = build_datasets(cfg)
        rows = []
        for path in args.ckpts:
            model, _ = load_checkpoint(path)
            top1, top5 = evaluate(model, test_data)
            size = analysis.model_size(model)
            rows.append({"checkpoint": os.path.basename(path),
                         "bits": model.config.bits if model.config.bits else 32,
                         "payload_bytes": size["payload_bytes"],
                         "overhead_bytes": size["overhead_bytes"],
                         "top1": top1, "top5": top5})
        analysis.emit_report("size_table", rows, args.out)
    print(f"report written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsqnet",
                                     description="Quantized training and inference runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[],
                   help="override a config key: section.key=value")
    p.add_argument("--init-from", default=None,
                   help="full-precision checkpoint to fine-tune from")
    p.add_argument("--teacher", default=None,
                   help="frozen teacher checkpoint for distillation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True, help="config providing the dataset")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--json", default=None, help="also write metrics to this JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export a checkpoint to an integer model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="check integer-path equivalence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--intmodel", default=None,
                   help="integer model file (default: export in memory)")
    p.add_argument("--config", required=True, help="config providing the dataset")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=256)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze", help="emit diagnostic reports")
    p.add_argument("kind", choices=["r-ratio", "qe-sweep", "size-table"])
    p.add_argument("--ckpt", default=None)
    p.add_argument("--ckpts", nargs="*", default=[])
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--gscale", choices=list(analysis.GSCALE_MODES), default=None)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "analyze":
        if args.kind in ("r-ratio", "qe-sweep") and not args.ckpt:
            parser.error(f"analyze {args.kind} requires --ckpt")
        if args.kind in ("r-ratio", "size-table") and not args.config:
            parser.error(f"analyze {args.kind} requires --config")
        if args.kind == "size-table" and not args.ckpts:
            parser.error("analyze size-table requires --ckpts")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e.filename or e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
