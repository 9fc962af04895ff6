"""Command line interface.

Verbs: train (one setting/variant), bench (six-setting sweep), sweep-lambda,
report, gradcheck, make-data. Exit codes group failures by category:
2 configuration, 3 file I/O or format, 4 numeric.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import experiment, network, regularizer
from .exceptions import ConfigError, FormatError, InputError, NumericError

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_OVERRIDE_FIELDS = (
    "data_dir", "out_dir", "seeds", "variant", "lam", "heldout", "mode", "backbone",
    "mlp_hidden", "multi_levels", "multi_decay", "pretrain_epochs", "par_epochs",
    "learning_rate", "momentum", "batch_size", "radial_radius", "random_keep_prob",
    "mask_seed", "val_fraction", "train_limit", "eval_limit", "num_classes",
)


def _parse_seeds(s: str):
    return experiment._parse_seeds(s)


def _parse_optint(s: str):
    return experiment._parse_optint(s)


def _parse_floats(s: str):
    return tuple(float(x) for x in s.replace(",", " ").split())


def _parse_names(s: str):
    return tuple(x for x in s.replace(",", " ").split())


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file with section headers")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--seeds", type=_parse_seeds, help="comma-separated, e.g. 0,1,2")
    p.add_argument("--variant", choices=experiment.VARIANTS)
    p.add_argument("--lambda", dest="lam", type=float, help="adversarial weight")
    p.add_argument("--heldout", choices=("original", "radial", "random"))
    p.add_argument("--mode", choices=("independent", "dependent"))
    p.add_argument("--backbone", help="e.g. c32k5p2-c64k5p2-f1024")
    p.add_argument("--mlp-hidden", dest="mlp_hidden", type=int)
    p.add_argument("--multi-levels", dest="multi_levels", type=int)
    p.add_argument("--multi-decay", dest="multi_decay", type=float)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--par-epochs", dest="par_epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--radial-radius", dest="radial_radius", type=float)
    p.add_argument("--random-keep-prob", dest="random_keep_prob", type=float)
    p.add_argument("--mask-seed", dest="mask_seed", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--train-limit", dest="train_limit", type=_parse_optint)
    p.add_argument("--eval-limit", dest="eval_limit", type=_parse_optint)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--fast", action="store_true",
                   help="desk-scale profile: 10k subsample, 20+20 epochs, slim backbone")


def _config_from_args(args) -> experiment.ExperimentConfig:
    file_values = experiment.parse_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in _OVERRIDE_FIELDS}
    return experiment.build_config(file_values, overrides, fast=args.fast)


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    outcomes = experiment.run_experiment(cfg)
    for o in outcomes:
        print(f"{o.setting} {o.variant} seed{o.seed}: "
              f"val {o.final_val_acc:.4f} heldout {o.final_heldout_acc:.4f}")
    print(f"summary: {cfg.out_dir}/summary.csv")
    return 0


def _cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    experiment.bench(cfg, variants=args.variants, jobs=args.jobs)
    print(experiment.report(cfg.out_dir), end="")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    experiment.sweep_lambda(cfg, grid=args.grid, jobs=args.jobs)
    print(experiment.report(cfg.out_dir), end="")
    return 0


def _cmd_report(args) -> int:
    print(experiment.report(args.results), end="")
    return 0


def _jitter_biases(tensors, seed: int) -> None:
    # biases start at zero, which parks relu pre-activations of all-zero
    # fibers exactly on the kink; nudge them so the check runs at a point
    # where the loss is differentiable
    rng = np.random.default_rng(seed)
    for k, v in tensors.items():
        if k.endswith("bias"):
            v += rng.uniform(0.02, 0.1, size=v.shape)


def _cmd_gradcheck(args) -> int:
    cfg = _config_from_args(args)
    rng = np.random.default_rng(args.seed)
    variant = cfg.variant
    spec = experiment.make_side_spec(cfg, variant)
    graph = network.build_backbone(cfg.backbone, cfg.num_classes,
                                   attach_level=cfg.attach_level_for(variant))
    params = network.init_params(graph, args.seed)
    _jitter_biases(params.as_dict(), args.seed + 100)
    batch = rng.uniform(0.0, 1.0, size=(args.batch, *graph.input_shape))
    labels = rng.integers(0, cfg.num_classes, size=args.batch)
    if spec is None:
        report = network.finite_diff_check(graph, params, batch, labels, eps=args.eps,
                                           max_coords_per_tensor=args.max_coords,
                                           coord_seed=args.seed)
    elif spec.multi_level is not None:
        raise ConfigError("gradcheck covers single-level variants; use par, par_b, par_m, or par_h")
    else:
        phi = regularizer.init_side_params(spec, graph.level_shape(spec.attach_level)[0],
                                           args.seed + 1)
        _jitter_biases(phi, args.seed + 101)
        report = regularizer.par_finite_diff_check(graph, params, phi, spec, batch, labels,
                                                   eps=args.eps,
                                                   max_coords_per_tensor=args.max_coords,
                                                   coord_seed=args.seed)
    width = max(len(k) for k in report)
    worst = 0.0
    for k, v in report.items():
        print(f"{k.ljust(width)}  max rel err {v:.3e}")
        worst = max(worst, v)
    print(f"worst: {worst:.3e} (tolerance {args.tolerance:g})")
    if worst > args.tolerance:
        raise NumericError(f"gradient check failed: {worst:.3e} > {args.tolerance:g}")
    print("gradient check passed")
    return 0


def _cmd_make_data(args) -> int:
    from . import synth

    paths = synth.write_idx_corpus(args.out, n_train=args.train, n_test=args.test,
                                   seed=args.seed)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchreg",
                                 description="patch-wise adversarial regularization harness")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one setting/variant over the seed list")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("bench", help="run all six settings for the given variants")
    _add_config_flags(p)
    p.add_argument("--variants", type=_parse_names, default=("vanilla", "par"))
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("sweep-lambda", help="sweep the adversarial weight over a grid")
    _add_config_flags(p)
    p.add_argument("--grid", type=_parse_floats,
                   default=experiment.DEFAULT_LAMBDA_GRID)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="summarize a results directory")
    p.add_argument("--results", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    _add_config_flags(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--max-coords", dest="max_coords", type=int, default=150,
                   help="coordinates sampled per tensor")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("make-data", help="write the synthetic digit corpus as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=12000)
    p.add_argument("--test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
