"""Experiment orchestration for the pattern-shortcut benchmark.

A benchmark setting is (held-out kernel) x (attachment mode): the two
kernels that are not held out are attached to training and validation
images, while every test image gets the held-out kernel. Variants of the
regularized model are compared against a vanilla baseline trained for the
same total epoch budget.

Runs sharing a setting, seed, and schedule also share their entire
pretraining trajectory, so the engine trains that prefix once per
(setting, seed) and branches per variant; branching is bit-identical to
running each variant from scratch. The side-branch probe of the first
regularized variant rides along inside the prefix (its updates never
reach the backbone), the vanilla branch drops the side columns, and any
further regularized variant with a different side shape re-runs its own
pretraining phase.

Directory layout under out_dir:

    <setting>/<variant>/seed<k>/metrics.csv + params.bin [+ side.bin] + manifest.txt
    <setting>/assignments/seed<k>/{train,val,test}.txt
    summary.csv, config.ini

sweep-lambda nests the same layout under lambda_<value>/ per grid point.
"""

from __future__ import annotations

import configparser
import os
from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint, network, regularizer, training
from .data import (TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS, LabeledDataset,
                   load_mnist_idx, split, subsample)
from .exceptions import ConfigError
from .perturb import KERNEL_IDS, assignment_manifest, attach_pattern, attach_uniform, make_pattern_kernels
from .regularizer import MultiLevelSpec, SideClassifierSpec
from .training import Schedule

__all__ = [
    "ExperimentConfig",
    "VARIANTS",
    "SETTINGS",
    "parse_config_file",
    "build_config",
    "write_config",
    "setting_name",
    "make_side_spec",
    "run_experiment",
    "bench",
    "sweep_lambda",
    "report",
    "DEFAULT_LAMBDA_GRID",
    "FAST_OVERRIDES",
]

VARIANTS = ("vanilla", "par", "par_b", "par_m", "par_h", "multi")
MODES = ("independent", "dependent")
SETTINGS = tuple((held, mode) for held in KERNEL_IDS for mode in MODES)
DEFAULT_LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)

# Desk-scale profile: subsampled data, short schedule, slim backbone.
FAST_OVERRIDES = {
    "train_limit": 10000,
    "eval_limit": 2000,
    "pretrain_epochs": 20,
    "par_epochs": 20,
    "batch_size": 125,
    "backbone": "c6k3p0-c12k3p0-f48",
    # sharper masks than the full-scale defaults: at desk scale the
    # pattern must be separable enough for its suppression to register
    # within 20 epochs on a slim backbone
    "radial_radius": 6.0,
    "random_keep_prob": 0.25,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "results"
    seeds: tuple[int, ...] = (0, 1, 2)
    variant: str = "par"
    lam: float = 1.0
    heldout: str = "original"
    mode: str = "dependent"
    backbone: str = "c32k5p2-c64k5p2-f1024"
    mlp_hidden: int = 64
    multi_levels: int = 2
    multi_decay: float = 0.5
    pretrain_epochs: int = 50
    par_epochs: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    radial_radius: float = 12.0
    random_keep_prob: float = 0.5
    mask_seed: int = 7
    val_fraction: float = 1.0 / 6.0
    train_limit: int | None = None
    eval_limit: int | None = None
    num_classes: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.heldout not in KERNEL_IDS:
            raise ConfigError(f"heldout must be one of {KERNEL_IDS}, got {self.heldout!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction!r}")
        if not (self.lam >= 0):
            raise ConfigError(f"lambda must be non-negative, got {self.lam!r}")
        for name in ("train_limit", "eval_limit"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be positive or absent, got {v}")
        # Schedule's own validation covers the optimizer fields.
        self.schedule()

    def schedule(self) -> Schedule:
        return Schedule(self.pretrain_epochs, self.par_epochs, self.learning_rate,
                        self.momentum, self.batch_size)

    def attach_level_for(self, variant: str) -> int:
        return 2 if variant == "par_h" else 1


# Config file schema: field -> (section, parser). "lambda" is the file
# spelling of lam. train/eval limits accept "none".
def _parse_seeds(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"seeds must be a comma-separated integer list, got {s!r}")


def _parse_optint(s: str):
    if s.strip().lower() in ("none", ""):
        return None
    return int(s)


_SCHEMA: dict[str, tuple[str, object]] = {
    "seeds": ("experiment", _parse_seeds),
    "variant": ("experiment", str),
    "lambda": ("experiment", float),
    "heldout": ("experiment", str),
    "mode": ("experiment", str),
    "backbone": ("experiment", str),
    "mlp_hidden": ("experiment", int),
    "multi_levels": ("experiment", int),
    "multi_decay": ("experiment", float),
    "pretrain_epochs": ("schedule", int),
    "par_epochs": ("schedule", int),
    "learning_rate": ("schedule", float),
    "momentum": ("schedule", float),
    "batch_size": ("schedule", int),
    "radial_radius": ("perturbation", float),
    "random_keep_prob": ("perturbation", float),
    "mask_seed": ("perturbation", int),
    "data_dir": ("data", str),
    "out_dir": ("data", str),
    "val_fraction": ("data", float),
    "train_limit": ("data", _parse_optint),
    "eval_limit": ("data", _parse_optint),
    "num_classes": ("data", int),
}


def _field_name(key: str) -> str:
    return "lam" if key == "lambda" else key


def parse_config_file(path) -> dict:
    """Flat key=value config with section headers; unknown keys are errors."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    values: dict[str, object] = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            if _field_name(key) in values:
                raise ConfigError(f"config key {key!r} given more than once")
            parser = _SCHEMA[key][1]
            try:
                values[_field_name(key)] = parser(raw)
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for config key {key!r}")
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None,
                 fast: bool = False) -> ExperimentConfig:
    """Precedence: defaults < config file < fast profile < explicit overrides."""
    merged: dict[str, object] = {}
    if file_values:
        merged.update(file_values)
    if fast:
        merged.update(FAST_OVERRIDES)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    valid = {f.name for f in fields(ExperimentConfig)}
    unknown = set(merged) - valid
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**merged)


def write_config(cfg: ExperimentConfig, path) -> None:
    """Emit the resolved config grouped by section, for experiment provenance."""
    sections: dict[str, list[str]] = {}
    for key, (section, _) in _SCHEMA.items():
        v = getattr(cfg, _field_name(key))
        if key == "seeds":
            v = ",".join(str(s) for s in v)
        elif v is None:
            v = "none"
        sections.setdefault(section, []).append(f"{key} = {v}")
    text = []
    for section in ("experiment", "schedule", "perturbation", "data"):
        text.append(f"[{section}]")
        text.extend(sections[section])
        text.append("")
    checkpoint.atomic_write_text(path, "\n".join(text))


def setting_name(heldout: str, mode: str) -> str:
    return f"heldout_{heldout}-{mode}"


def make_side_spec(cfg: ExperimentConfig, variant: str, lam: float | None = None) -> SideClassifierSpec | None:
    """Map a variant name to its side-classifier spec (None for vanilla)."""
    lam = cfg.lam if lam is None else lam
    if variant == "vanilla":
        return None
    common = dict(lam=lam, num_classes=cfg.num_classes,
                  attach_level=cfg.attach_level_for(variant))
    if variant == "par":
        return SideClassifierSpec(kind="linear", **common)
    if variant == "par_b":
        return SideClassifierSpec(kind="conv3", **common)
    if variant == "par_m":
        return SideClassifierSpec(kind="mlp3", mlp_hidden=cfg.mlp_hidden, **common)
    if variant == "par_h":
        return SideClassifierSpec(kind="linear", **common)
    if variant == "multi":
        return SideClassifierSpec(kind="linear",
                                  multi_level=MultiLevelSpec(cfg.multi_levels, cfg.multi_decay),
                                  **common)
    raise ConfigError(f"unknown variant {variant!r}")


def _seed_for(run_seed: int, purpose: int) -> int:
    """Deterministic derived seed; purposes keep rng streams disjoint."""
    return int(np.random.SeedSequence([run_seed, purpose]).generate_state(1)[0])


def load_corpus(cfg: ExperimentConfig):
    """(train file dataset, test file dataset); missing files are I/O errors."""
    d = Path(cfg.data_dir)
    paths = [d / TRAIN_IMAGES, d / TRAIN_LABELS, d / TEST_IMAGES, d / TEST_LABELS]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(
            f"dataset files missing: {', '.join(missing)}; "
            f"run 'patchreg make-data --out {cfg.data_dir}' or point --data-dir at MNIST IDX files"
        )
    full_train = load_mnist_idx(paths[0], paths[1])
    full_test = load_mnist_idx(paths[2], paths[3])
    return full_train, full_test


def prepare_setting_data(cfg: ExperimentConfig, heldout: str, mode: str, seed: int,
                         full_train: LabeledDataset, full_test: LabeledDataset):
    """Split, subsample, and attach kernels for one (setting, seed).

    Returns (train, eval_sets) where eval_sets has "val" (in-domain, the
    two training kernels) and "heldout" (every test image filtered by the
    held-out kernel).
    """
    h, w = full_train.images.shape[-2:]
    kernels = make_pattern_kernels(h, w, cfg.radial_radius, cfg.random_keep_prob, cfg.mask_seed)
    train0, val0 = split(full_train, (1.0 - cfg.val_fraction, cfg.val_fraction), seed)
    if cfg.train_limit is not None:
        train0 = subsample(train0, cfg.train_limit, seed)
    test0 = full_test
    if cfg.eval_limit is not None:
        val0 = subsample(val0, cfg.eval_limit, seed)
        test0 = subsample(test0, cfg.eval_limit, seed)
    ka, kb = [k for k in KERNEL_IDS if k != heldout]
    train_set = attach_pattern(train0, mode, ka, kb, _seed_for(seed, 1), kernels)
    val_set = attach_pattern(val0, mode, ka, kb, _seed_for(seed, 2), kernels)
    test_set = attach_uniform(test0, heldout, kernels)
    eval_sets = OrderedDict(val=val_set, heldout=test_set)
    return train_set, eval_sets


@dataclass(frozen=True)
class Branch:
    """One training continuation sharing the setting/seed pretrain prefix."""

    label: str     # directory name: variant, or variant@lambda in sweeps
    variant: str
    lam: float


@dataclass
class RunOutcome:
    setting: str
    variant: str
    lam: float
    seed: int
    final_val_acc: float
    final_heldout_acc: float
    run_dir: str


def _write_assignments(setting_dir: Path, seed: int, train_set, eval_sets) -> None:
    adir = setting_dir / "assignments" / f"seed{seed}"
    adir.mkdir(parents=True, exist_ok=True)
    checkpoint.atomic_write_text(adir / "train.txt", assignment_manifest(train_set))
    checkpoint.atomic_write_text(adir / "val.txt", assignment_manifest(eval_sets["val"]))
    checkpoint.atomic_write_text(adir / "test.txt", assignment_manifest(eval_sets["heldout"]))


def run_setting_seed(cfg: ExperimentConfig, heldout: str, mode: str, seed: int,
                     branches: tuple[Branch, ...], out_root: Path,
                     full_train: LabeledDataset, full_test: LabeledDataset) -> list[RunOutcome]:
    """Train every branch for one (setting, seed), sharing the pretrain prefix."""
    sname = setting_name(heldout, mode)
    setting_dir = out_root / sname
    train_set, eval_sets = prepare_setting_data(cfg, heldout, mode, seed, full_train, full_test)
    _write_assignments(setting_dir, seed, train_set, eval_sets)
    schedule = cfg.schedule()
    base_graph = network.build_backbone(cfg.backbone, cfg.num_classes, attach_level=1)
    params0 = network.init_params(base_graph, seed)

    def init_phi(spec):
        if spec.multi_level is not None:
            return regularizer.init_multi_side_params(base_graph, spec, _seed_for(seed, 3))
        return regularizer.init_side_params(
            spec, base_graph.level_shape(spec.attach_level)[0], _seed_for(seed, 3))

    # the probe of the first regularized variant rides inside the shared
    # prefix; lambda does not enter probe updates, so branches differing
    # only in lambda share it too
    primary = next((b.variant for b in branches if b.variant != "vanilla"), None)
    spec0 = make_side_spec(cfg, primary) if primary else None
    prefix = training.new_state(params0, init_phi(spec0) if spec0 else None)
    training.run_epochs(prefix, base_graph, spec0, schedule, train_set, eval_sets, seed,
                        1, schedule.pretrain_epochs, par_active=False)
    outcomes = []
    eval_names = list(eval_sets.keys())
    for br in branches:
        spec = make_side_spec(cfg, br.variant, br.lam)
        if spec is None:
            graph = base_graph
            st = prefix.clone()
            st.phi = None
            st.vel_phi = None
            st.rows = [replace(r, side_loss=0.0,
                               side_accuracies={n: 0.0 for n in r.side_accuracies})
                       for r in st.rows]
            training.run_epochs(st, graph, None, schedule, train_set, eval_sets, seed,
                                schedule.pretrain_epochs + 1, schedule.total_epochs,
                                par_active=False)
        else:
            graph = (base_graph if spec.attach_level == 1 else
                     network.build_backbone(cfg.backbone, cfg.num_classes,
                                            attach_level=spec.attach_level))
            if br.variant == primary:
                st = prefix.clone()
            else:
                st = training.new_state(params0, init_phi(spec))
                training.run_epochs(st, graph, spec, schedule, train_set, eval_sets, seed,
                                    1, schedule.pretrain_epochs, par_active=False)
            training.run_epochs(st, graph, spec, schedule, train_set, eval_sets, seed,
                                schedule.pretrain_epochs + 1, schedule.total_epochs,
                                par_active=True)
        run_dir = setting_dir / br.label / f"seed{seed}"
        training.save_run_checkpoint(run_dir, graph, spec, st, eval_names)
        last = st.rows[-1]
        outcomes.append(RunOutcome(sname, br.variant, br.lam, seed,
                                   last.accuracies["val"], last.accuracies["heldout"],
                                   str(run_dir)))
    return outcomes


def _fmt(v) -> str:
    return f"{v:.6g}"


def _merge_summary(out_root: Path, outcomes: list[RunOutcome]) -> None:
    """Aggregate per-seed outcomes into summary.csv rows (mean/std over seeds).

    Existing rows for other (setting, variant, lambda) keys are kept, so
    sequential run_experiment calls into one directory accumulate.
    """
    path = out_root / "summary.csv"
    rows: dict[tuple, dict] = {}
    if path.exists():
        lines = path.read_text().splitlines()
        for ln in lines[1:]:
            c = ln.split(",")
            rows[(c[0], c[1], c[2])] = dict(zip(
                ("setting", "variant", "lambda", "n_seeds", "val_mean", "val_std",
                 "heldout_mean", "heldout_std"), c))
    by_key: dict[tuple, list[RunOutcome]] = {}
    for o in outcomes:
        by_key.setdefault((o.setting, o.variant, _fmt(o.lam)), []).append(o)
    for key, group in by_key.items():
        vals = np.array([o.final_val_acc for o in group])
        helds = np.array([o.final_heldout_acc for o in group])
        rows[key] = {
            "setting": key[0], "variant": key[1], "lambda": key[2],
            "n_seeds": str(len(group)),
            "val_mean": _fmt(vals.mean()), "val_std": _fmt(vals.std()),
            "heldout_mean": _fmt(helds.mean()), "heldout_std": _fmt(helds.std()),
        }
    header = ["setting", "variant", "lambda", "n_seeds", "val_mean", "val_std",
              "heldout_mean", "heldout_std"]
    lines = [",".join(header)]
    for key in sorted(rows):
        lines.append(",".join(rows[key][h] for h in header))
    checkpoint.atomic_write_text(path, "\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig) -> list[RunOutcome]:
    """One (setting, variant) over the seed list; writes runs and a summary row."""
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_root / "config.ini")
    full_train, full_test = load_corpus(cfg)
    branches = (Branch(cfg.variant, cfg.variant, cfg.lam),)
    outcomes = []
    for seed in cfg.seeds:
        outcomes += run_setting_seed(cfg, cfg.heldout, cfg.mode, seed, branches,
                                     out_root, full_train, full_test)
    _merge_summary(out_root, outcomes)
    return outcomes


def _bench_task(args):
    cfg, heldout, mode, seed, branch_list = args
    full_train, full_test = load_corpus(cfg)
    return run_setting_seed(cfg, heldout, mode, seed, tuple(branch_list),
                            Path(cfg.out_dir), full_train, full_test)


def _limit_worker_threads():
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")


def bench(cfg: ExperimentConfig, variants=("vanilla", "par"), jobs: int = 1) -> list[RunOutcome]:
    """All six settings x variants x seeds. jobs > 1 parallelizes over
    (setting, seed) pairs with one process each."""
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r} in bench list")
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_root / "config.ini")
    branches = tuple(Branch(v, v, cfg.lam) for v in variants)
    tasks = [(cfg, heldout, mode, seed, branches)
             for (heldout, mode) in SETTINGS for seed in cfg.seeds]
    outcomes: list[RunOutcome] = []
    if jobs > 1:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        with ctx.Pool(processes=jobs, initializer=_limit_worker_threads) as pool:
            for res in pool.map(_bench_task, tasks):
                outcomes += res
    else:
        full_train, full_test = load_corpus(cfg)
        for (_, heldout, mode, seed, brs) in tasks:
            outcomes += run_setting_seed(cfg, heldout, mode, seed, brs, out_root,
                                         full_train, full_test)
    _merge_summary(out_root, outcomes)
    return outcomes


def sweep_lambda(cfg: ExperimentConfig, grid=DEFAULT_LAMBDA_GRID, jobs: int = 1) -> list[RunOutcome]:
    """PAR runs across the lambda grid, all settings, shared seeds.

    Results nest under lambda_<value>/, one full layout per grid point.
    """
    if not len(grid):
        raise ConfigError("lambda grid must be nonempty")
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_root / "config.ini")
    variant = cfg.variant if cfg.variant != "vanilla" else "par"
    outcomes: list[RunOutcome] = []
    full_train, full_test = load_corpus(cfg)
    for lam in grid:
        sub = Path(cfg.out_dir) / f"lambda_{lam:g}"
        lam_cfg = replace(cfg, lam=float(lam), out_dir=str(sub), variant=variant)
        branches = (Branch(variant, variant, float(lam)),)
        for (heldout, mode) in SETTINGS:
            for seed in cfg.seeds:
                outs = run_setting_seed(lam_cfg, heldout, mode, seed, branches, sub,
                                        full_train, full_test)
                for o in outs:
                    o.setting = f"lambda_{lam:g}/{o.setting}"
                outcomes += outs
    _merge_summary(out_root, outcomes)
    return outcomes


def report(results_dir) -> str:
    """Aligned mean/std table per (setting, variant) plus report.csv.

    Values are recomputed from the per-run metrics CSVs, so regenerating
    from the same directory is byte-identical. Seed directories without a
    metrics.csv are listed as absent rather than filled in.
    """
    root = Path(results_dir)
    if not root.exists():
        raise FileNotFoundError(f"results directory not found: {results_dir}")
    groups: dict[tuple[str, str], dict[int, tuple[float, float]]] = {}
    absent: list[str] = []
    for mpath in sorted(root.rglob("metrics.csv")):
        rel = mpath.relative_to(root).parent
        parts = rel.parts
        if len(parts) < 3 or not parts[-1].startswith("seed"):
            continue
        setting = "/".join(parts[:-2])
        variant = parts[-2]
        try:
            seed = int(parts[-1][4:])
        except ValueError:
            continue
        names, rows = training.read_metrics_csv(mpath)
        if not rows:
            absent.append(str(rel))
            continue
        last = rows[-1]
        groups.setdefault((setting, variant), {})[seed] = (
            last.accuracies.get("val", float("nan")),
            last.accuracies.get("heldout", float("nan")),
        )
    for sdir in sorted(root.rglob("seed*")):
        if sdir.is_dir() and not (sdir / "metrics.csv").exists():
            parts = sdir.relative_to(root).parts
            if len(parts) >= 3 and parts[-3] != "assignments" and parts[-2] != "assignments":
                absent.append("/".join(parts))
    header = ("setting", "variant", "seeds", "val_acc", "heldout_acc")
    table_rows = []
    csv_lines = ["setting,variant,n_seeds,val_mean,val_std,heldout_mean,heldout_std"]
    for (setting, variant) in sorted(groups):
        per_seed = groups[(setting, variant)]
        vals = np.array([v for v, _ in per_seed.values()])
        helds = np.array([h for _, h in per_seed.values()])
        table_rows.append((
            setting, variant, str(len(per_seed)),
            f"{vals.mean():.4f} +- {vals.std():.4f}",
            f"{helds.mean():.4f} +- {helds.std():.4f}",
        ))
        csv_lines.append(",".join([setting, variant, str(len(per_seed)),
                                   _fmt(vals.mean()), _fmt(vals.std()),
                                   _fmt(helds.mean()), _fmt(helds.std())]))
    widths = [max(len(h), *(len(r[i]) for r in table_rows)) if table_rows else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in table_rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    if absent:
        lines.append("")
        lines.append("absent runs (no metrics.csv):")
        for a in sorted(set(absent)):
            lines.append(f"  {a}")
    text = "\n".join(lines) + "\n"
    checkpoint.atomic_write_text(root / "report.csv", "\n".join(csv_lines) + "\n")
    checkpoint.atomic_write_text(root / "report.txt", text)
    return text
