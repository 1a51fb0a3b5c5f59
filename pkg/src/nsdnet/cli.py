"""Command-line entry point.

Subcommands: train, retrain, sweep-p, sweep-size, eval, gradcheck.
Every ExperimentConfig field is reachable via ``--config file.json`` plus
individual flag overrides.  Exit codes: 0 ok, 1 configuration error,
2 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .harness import (
    ConfigError,
    DivergenceError,
    ExperimentConfig,
    config_from_dict,
    config_from_file,
)
from .ndcore import Rng, derive
from .nn import grad_check
from .nsdropout import build_masks, class_group, class_means, ns_layers

log = logging.getLogger("nsdnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise ConfigError(message)


def _parse_arch(text):
    try:
        return tuple(int(v) for v in text.split("-"))
    except ValueError as err:
        raise ConfigError(f"bad architecture {text!r}: {err}") from err


def _parse_floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as err:
        raise ConfigError(f"bad float list {text!r}") from err


def _parse_ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as err:
        raise ConfigError(f"bad int list {text!r}") from err


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file (keys = config fields)")
    p.add_argument("--dataset",
                   help="mnist|fashion-mnist|cifar10|synthetic|toy")
    p.add_argument("--data-root", dest="data_root",
                   help=f"dataset directory (or ${harness.DATA_ROOT_ENV})")
    p.add_argument("--dataset-opt", action="append", default=[],
                   metavar="KEY=VALUE",
                   help="synthetic/toy generator option, repeatable")
    p.add_argument("--arch", help="e.g. 784-128-128-128-10")
    p.add_argument("--regularizer", choices=harness.REGULARIZERS)
    p.add_argument("--p", help="per-slot drop fractions, e.g. 0.5,0.2,0.2,0.2")
    p.add_argument("--budget", type=int)
    p.add_argument("--train-frac", dest="train_frac", type=float)
    p.add_argument("--subsample-n", dest="subsample_n", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--lr-multiplier", dest="lr_multiplier", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--l2", dest="l2_decay", type=float)
    p.add_argument("--anneal", type=float)
    p.add_argument("--refresh", choices=harness.REFRESH_POLICIES)
    p.add_argument("--eval-modes", dest="eval_modes",
                   help="comma list: labeled,predicted,union,intersection,off")
    p.add_argument("--signed-deviation", dest="signed_deviation",
                   action="store_true", default=None)
    p.add_argument("--zca", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output_dir", help="run output directory")
    p.add_argument("--no-trace", dest="trace_masks", action="store_false",
                   default=None)


def _config_from_args(args):
    if args.config:
        cfg = config_from_file(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for name in ("dataset", "data_root", "regularizer", "budget",
                 "train_frac", "subsample_n", "epochs", "batch_size",
                 "learning_rate", "lr_multiplier", "momentum", "l2_decay",
                 "anneal", "refresh", "signed_deviation", "zca", "seed",
                 "output_dir", "trace_masks"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "arch", None):
        overrides["arch"] = _parse_arch(args.arch)
    if getattr(args, "p", None):
        overrides["p"] = _parse_floats(args.p)
    if getattr(args, "eval_modes", None):
        overrides["eval_modes"] = tuple(args.eval_modes.split(","))
    opts = dict(cfg.dataset_options)
    for item in getattr(args, "dataset_opt", []):
        if "=" not in item:
            raise ConfigError(f"--dataset-opt needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        opts[key] = value
    if opts:
        overrides["dataset_options"] = opts
    cfg = replace(cfg, **overrides)
    return config_from_dict(cfg.to_dict())


def _cmd_train(args):
    cfg = _config_from_args(args)
    result = harness.run_training(cfg)
    last = result.records[-1]
    print(f"final epoch {last.epoch}: train_acc={last.train_acc:.4f} "
          f"unseen_val_acc={last.unseen_val_acc:.4f} "
          + " ".join(f"test_acc_{m}={v:.4f}"
                     for m, v in last.test_acc.items()))
    if result.out_dir:
        if result.trace:
            harness.emit_mask_trace(result, result.out_dir)
        print(f"outputs in {result.out_dir}")
    return 0


def _cmd_retrain(args):
    cfg = _config_from_args(args)
    phase1, phase2, e_star = harness.run_retrain_schedule(cfg)
    last = phase2.records[-1]
    print(f"best epoch {e_star}; retrained model test accuracies: "
          + " ".join(f"{m}={v:.4f}" for m, v in last.test_acc.items()))
    return 0


def _cmd_sweep_p(args):
    cfg = _config_from_args(args)
    p_list = _parse_floats(args.p_list)
    out = Path(cfg.output_dir) if cfg.output_dir else None
    rows = harness.sweep_p(cfg, p_list, out)
    for row in rows:
        print(row)
    return 0


def _cmd_sweep_size(args):
    cfg = _config_from_args(args)
    sizes = _parse_ints(args.sizes)
    out = Path(cfg.output_dir) if cfg.output_dir else None
    rows = harness.sweep_size(cfg, sizes, out)
    for row in rows:
        print(row)
    return 0


def _cmd_eval(args):
    config, net = harness.restore_run(args.run_dir)
    if args.data_root:
        config = replace(config, data_root=args.data_root)
    _, test = harness.load_dataset(config)
    modes = (tuple(args.modes.split(",")) if args.modes
             else config.eval_modes)
    for mode in modes:
        counts = harness.emit_confusion_matrix(net, test, mode)
        acc = counts.trace() / counts.sum()
        print(f"test_acc_{mode}={acc:.4f}")
        if args.emit_confusion:
            out = Path(args.run_dir) / f"confusion_{mode}.csv"
            out.write_text("\n".join(
                ",".join(str(v) for v in row) for row in counts) + "\n")
    return 0


def _cmd_gradcheck(args):
    arch = _parse_arch(args.arch)
    regs = (harness.REGULARIZERS if args.regularizer == "all"
            else (args.regularizer,))
    rng = Rng(derive(args.seed, "gradcheck-data"))
    x = rng.uniforms((args.batch, arch[0]))
    labels = (rng.uniforms(args.batch) * arch[-1]).astype(np.int64)
    worst = 0.0
    for reg in regs:
        cfg = config_from_dict({"arch": arch, "regularizer": reg,
                                "seed": args.seed,
                                "p": args.p and _parse_floats(args.p)})
        net = harness.build_network(cfg, arch[0], arch[-1])
        # per-class masks need references; build them from the check data
        for layer in ns_layers(net):
            ref = harness.capture_reference(net, x)
            idx = net.layers.index(layer)
            groups = class_group(labels, layer.class_count)
            means = class_means(ref[idx], groups)
            layer.set_masks(build_masks(means, means, layer.p))
        err = grad_check(net, x, labels, epsilon=args.epsilon)
        worst = max(worst, err)
        print(f"{reg}: max relative error {err:.3e}")
    print(f"worst {worst:.3e} (threshold {args.threshold:.1e})")
    return 0 if worst < args.threshold else 1


def build_parser():
    parser = _Parser(prog="nsdnet",
                     description="train and compare per-class deterministic "
                                 "dropout networks")
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--quiet", "-q", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="one training run")
    _add_config_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_retrain = sub.add_parser(
        "retrain", help="train, then retrain to the best epoch")
    _add_config_flags(p_retrain)
    p_retrain.set_defaults(func=_cmd_retrain)

    p_sp = sub.add_parser("sweep-p", help="error vs drop fraction table")
    _add_config_flags(p_sp)
    p_sp.add_argument("--p-list", dest="p_list", required=True,
                      help="comma list of drop fractions")
    p_sp.set_defaults(func=_cmd_sweep_p)

    p_ss = sub.add_parser("sweep-size", help="error vs training-set size")
    _add_config_flags(p_ss)
    p_ss.add_argument("--sizes", required=True, help="comma list of budgets")
    p_ss.set_defaults(func=_cmd_sweep_size)

    p_eval = sub.add_parser("eval", help="evaluate a finished run directory")
    p_eval.add_argument("--run-dir", dest="run_dir", required=True)
    p_eval.add_argument("--data-root", dest="data_root")
    p_eval.add_argument("--modes", help="comma list of eval modes")
    p_eval.add_argument("--emit-confusion", action="store_true")
    p_eval.set_defaults(func=_cmd_eval)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_gc.add_argument("--arch", default="784-8-8-3")
    p_gc.add_argument("--regularizer", default="all",
                      choices=harness.REGULARIZERS + ("all",))
    p_gc.add_argument("--p", help="per-slot drop fractions")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--batch", type=int, default=8)
    p_gc.add_argument("--epsilon", type=float, default=1e-5)
    p_gc.add_argument("--threshold", type=float, default=1e-5)
    p_gc.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=(logging.DEBUG if args.verbose
                   else logging.WARNING if args.quiet else logging.INFO),
            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
