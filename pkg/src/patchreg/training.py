"""Two-phase training loop: conventional pretraining, then adversarial epochs.

Phase 1 trains the backbone conventionally. When a side branch exists, its
parameters train alongside as a pure probe: they minimize their own patch
loss but send nothing back into the backbone, so the backbone trajectory
of phase 1 is bit-identical to a run that never constructed a side branch.
The probe's accuracy at the phase boundary is therefore a measure of how
much local label signal the pretrained features carry. Phase 2 switches
every step to the combined objective, reversing the side gradient into the
backbone while the side parameters keep chasing.

The loop is deterministic: batch order comes from (seed, epoch), updates
are sequential, and evaluation uses a fixed batch size, so identical
(config, seed) pairs replay bit-identical metric logs.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, network, regularizer
from .data import LabeledDataset, batches
from .exceptions import ConfigError, InputError, NumericError, ShapeError
from .regularizer import SideClassifierSpec

__all__ = [
    "Schedule",
    "MetricsRow",
    "sgd_step",
    "evaluate",
    "dataset_side_accuracy",
    "TrainState",
    "TrainResult",
    "train",
    "run_epochs",
    "new_state",
    "write_metrics_csv",
    "read_metrics_csv",
    "save_run_checkpoint",
    "load_run_checkpoint",
]

EVAL_BATCH = 500  # fixed so evaluation numerics never depend on config


@dataclass(frozen=True)
class Schedule:
    """Epoch budget and optimizer settings for the two phases."""

    pretrain_epochs: int
    par_epochs: int
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self):
        if self.pretrain_epochs < 0 or self.par_epochs < 0:
            raise ConfigError(
                f"epoch counts must be non-negative, got {self.pretrain_epochs}, {self.par_epochs}"
            )
        if not (self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def total_epochs(self) -> int:
        return self.pretrain_epochs + self.par_epochs


@dataclass
class MetricsRow:
    """One training epoch: losses, train accuracy, and per-eval-set accuracies."""

    epoch: int
    phase: str  # "pretrain" or "par"
    train_loss: float
    side_loss: float
    train_accuracy: float
    accuracies: dict[str, float]
    side_accuracies: dict[str, float]


def sgd_step(params, grads, lr: float, momentum: float, velocity=None):
    """v <- momentum*v + g; p <- p - lr*v, in place over a named tensor mapping.

    Returns (params, velocity). velocity=None allocates zeros.
    """
    if velocity is None:
        velocity = {k: np.zeros_like(params[k]) for k in params.keys()}
    for k in params.keys():
        if k not in grads:
            raise InputError(f"gradient missing for parameter {k!r}")
        g = grads[k]
        p = params[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter is {p.shape}")
        v = velocity[k]
        v *= momentum
        v += g
        p -= lr * v
    return params, velocity


def evaluate(graph, params, dataset: LabeledDataset, batch_size: int = EVAL_BATCH) -> float:
    """Mean argmax accuracy over the dataset; ties break to the lowest class."""
    n = len(dataset)
    if n == 0:
        raise InputError("evaluate needs a nonempty dataset")
    correct = 0
    for lo in range(0, n, batch_size):
        xb = dataset.images[lo : lo + batch_size]
        yb = dataset.labels[lo : lo + batch_size]
        logits, _ = network.forward(graph, params, xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / n


def dataset_side_accuracy(graph, params, phi, spec: SideClassifierSpec,
                          dataset: LabeledDataset, batch_size: int = EVAL_BATCH) -> float:
    """side_accuracy aggregated over a dataset (location-mean per sample)."""
    n = len(dataset)
    if n == 0:
        raise InputError("side accuracy needs a nonempty dataset")
    total = 0.0
    for lo in range(0, n, batch_size):
        xb = dataset.images[lo : lo + batch_size]
        yb = dataset.labels[lo : lo + batch_size]
        _, taps = network.forward_taps(graph, params, xb)
        acc = regularizer.side_accuracy(taps[spec.attach_level], spec, phi, yb)
        total += acc * len(yb)
    return total / n


@dataclass
class TrainState:
    """Everything the loop mutates, so a run can be snapshotted and branched."""

    params: network.NetworkParams
    phi: object  # OrderedDict, list of OrderedDicts (multi-level), or None
    vel_net: dict
    vel_phi: object
    rows: list[MetricsRow] = field(default_factory=list)

    def clone(self) -> "TrainState":
        return TrainState(
            params=self.params.copy(),
            phi=copy.deepcopy(self.phi),
            vel_net={k: v.copy() for k, v in self.vel_net.items()},
            vel_phi=copy.deepcopy(self.vel_phi),
            rows=list(self.rows),
        )


@dataclass
class TrainResult:
    params: network.NetworkParams
    phi: object
    rows: list[MetricsRow]
    state: TrainState


def new_state(params: network.NetworkParams, phi) -> TrainState:
    return TrainState(
        params=params.copy(),
        phi=copy.deepcopy(phi),
        vel_net={k: np.zeros_like(v) for k, v in params.items()},
        vel_phi=None,
        rows=[],
    )


def _ensure_phi_velocity(state: TrainState):
    if state.phi is None or state.vel_phi is not None:
        return
    if isinstance(state.phi, list):
        state.vel_phi = [{k: np.zeros_like(v) for k, v in d.items()} for d in state.phi]
    else:
        state.vel_phi = {k: np.zeros_like(v) for k, v in state.phi.items()}


def _probe_grads(graph, state: TrainState, spec, multi: bool, xb, yb):
    """Patch-loss value and phi gradients with no backbone coupling.

    Unlike the adversarial phase the gradients carry no lambda (or level
    weight): the probe's own objective is just its cross entropy, lambda
    only scales how hard the reversal pushes the backbone.
    """
    _, taps = network.forward_taps(graph, state.params, xb)
    if not multi:
        side = regularizer.side_logits(taps[spec.attach_level], spec, state.phi)
        loss, d_side = regularizer.patch_loss_with_grad(side, yb)
        _, d_phi = regularizer.side_logits_vjp(taps[spec.attach_level], spec, state.phi, d_side)
        return loss, d_phi
    weights = spec.multi_level.weights()
    grads = []
    total = 0.0
    for lvl in range(1, spec.multi_level.num_levels + 1):
        phi = state.phi[lvl - 1]
        side = regularizer.side_logits(taps[lvl], spec, phi)
        loss_l, d_side = regularizer.patch_loss_with_grad(side, yb)
        _, d_phi = regularizer.side_logits_vjp(taps[lvl], spec, phi, d_side)
        grads.append(d_phi)
        total += weights[lvl - 1] * loss_l
    return float(total), grads


def run_epochs(state: TrainState, graph, spec, schedule: Schedule, data: LabeledDataset,
               eval_sets, seed: int, first_epoch: int, last_epoch: int, par_active: bool):
    """Advance the state through epochs [first_epoch, last_epoch], appending rows.

    This is the branch point for paired runs: two states advanced with the
    same arguments from identical snapshots stay bit-identical.
    """
    lr, mom = schedule.learning_rate, schedule.momentum
    side_on = spec is not None and state.phi is not None
    multi = side_on and spec.multi_level is not None
    if side_on:
        _ensure_phi_velocity(state)
    for epoch in range(first_epoch, last_epoch + 1):
        phase = "par" if par_active else "pretrain"
        loss_sum = side_sum = 0.0
        correct = seen = 0
        step = 0
        for xb, yb in batches(data, schedule.batch_size, seed, epoch):
            step += 1
            if par_active and side_on:
                if multi:
                    res = regularizer.multi_level_objective(graph, state.params, state.phi,
                                                            spec, xb, yb)
                    side_val = res.total_side_loss
                else:
                    res = regularizer.par_objective(graph, state.params, state.phi, spec, xb, yb)
                    side_val = res.side_loss
                main, net_grads, logits = res.main_loss, res.net_grads, res.logits
                side_grads = res.side_grads
            else:
                main, net_grads, logits = network.backward_with_logits(graph, state.params, xb, yb)
                side_val, side_grads = 0.0, None
                if side_on:
                    # probe step: the side branch minimizes its own patch
                    # loss at the same point as the backbone update, but
                    # nothing flows back into the backbone
                    side_val, side_grads = _probe_grads(graph, state, spec, multi, xb, yb)
            if not (np.isfinite(main) and np.isfinite(side_val)):
                raise NumericError(
                    f"non-finite loss (main {main}, side {side_val}) at epoch {epoch} "
                    f"step {step}; set the lambda (or learning rate) smaller"
                )
            sgd_step(state.params, net_grads, lr, mom, state.vel_net)
            if side_grads is not None:
                if multi:
                    for phi_d, g_d, vel_d in zip(state.phi, side_grads, state.vel_phi):
                        sgd_step(phi_d, g_d, lr, mom, vel_d)
                else:
                    sgd_step(state.phi, side_grads, lr, mom, state.vel_phi)
            b = len(yb)
            loss_sum += main * b
            side_sum += side_val * b
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += b
        accs = {name: evaluate(graph, state.params, ds) for name, ds in eval_sets.items()}
        if side_on:
            phi_l1 = state.phi[0] if multi else state.phi
            side_accs = {
                name: dataset_side_accuracy(graph, state.params, phi_l1, spec, ds)
                for name, ds in eval_sets.items()
            }
        else:
            side_accs = {name: 0.0 for name in eval_sets}
        state.rows.append(MetricsRow(epoch, phase, loss_sum / seen, side_sum / seen,
                                     correct / seen, accs, side_accs))
    return state


def train(graph, params, phi, spec, schedule: Schedule, data: LabeledDataset,
          eval_sets, seed: int, out_dir=None) -> TrainResult:
    """Run the full two-phase schedule from fresh optimizer state.

    During the pretraining epochs a side branch (when given) trains as a
    probe on its own patch loss without touching the backbone; the
    adversarial coupling starts at the phase boundary. eval_sets is a
    name -> dataset mapping evaluated every epoch. The caller's params/phi
    are not mutated; copies are trained and returned. When out_dir is
    given, metrics.csv, the parameter checkpoint, and a manifest are
    written there.
    """
    if spec is not None and phi is None:
        raise ConfigError("a side classifier spec was given without side parameters")
    if schedule.par_epochs > 0 and spec is not None:
        if spec.multi_level is None and spec.attach_level not in graph.levels:
            raise ConfigError(f"graph has no conv level {spec.attach_level} for the side branch")
    state = new_state(params, phi)
    run_epochs(state, graph, spec, schedule, data, eval_sets, seed,
               1, schedule.pretrain_epochs, par_active=False)
    if schedule.par_epochs > 0:
        run_epochs(state, graph, spec, schedule, data, eval_sets, seed,
                   schedule.pretrain_epochs + 1, schedule.total_epochs, par_active=True)
    if out_dir is not None:
        save_run_checkpoint(out_dir, graph, spec, state, list(eval_sets.keys()))
    return TrainResult(state.params, state.phi, state.rows, state)


def _fmt(v) -> str:
    return f"{v:.6g}"


def write_metrics_csv(path, rows: list[MetricsRow], eval_names) -> None:
    """CSV with 6-significant-digit floats; written atomically."""
    header = ["epoch", "phase", "train_loss", "side_loss", "train_acc"]
    header += [f"acc_{n}" for n in eval_names]
    header += [f"side_acc_{n}" for n in eval_names]
    lines = [",".join(header)]
    for r in rows:
        cells = [str(r.epoch), r.phase, _fmt(r.train_loss), _fmt(r.side_loss),
                 _fmt(r.train_accuracy)]
        cells += [_fmt(r.accuracies[n]) for n in eval_names]
        cells += [_fmt(r.side_accuracies[n]) for n in eval_names]
        lines.append(",".join(cells))
    checkpoint.atomic_write_text(path, "\n".join(lines) + "\n")


def read_metrics_csv(path):
    """Returns (eval_names, rows). Inverse of write_metrics_csv up to rounding."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    fixed = ["epoch", "phase", "train_loss", "side_loss", "train_acc"]
    if header[: len(fixed)] != fixed:
        raise InputError(f"unexpected metrics header in {path}: {header[:5]}")
    rest = header[len(fixed):]
    eval_names = [h[4:] for h in rest if h.startswith("acc_")]
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        k = len(fixed)
        accs = {n: float(cells[k + i]) for i, n in enumerate(eval_names)}
        side = {n: float(cells[k + len(eval_names) + i]) for i, n in enumerate(eval_names)}
        rows.append(MetricsRow(int(cells[0]), cells[1], float(cells[2]), float(cells[3]),
                               float(cells[4]), accs, side))
    return eval_names, rows


def _phi_tensor_list(spec, phi):
    """Flatten phi to (names, tensors) in checkpoint order."""
    names, tensors = [], []
    if phi is None:
        return names, tensors
    if isinstance(phi, list):
        for lvl, d in enumerate(phi, start=1):
            for k, v in d.items():
                names.append(f"side.level{lvl}.{k}")
                tensors.append(v)
    else:
        for k, v in phi.items():
            names.append(f"side.{k}")
            tensors.append(v)
    return names, tensors


def save_run_checkpoint(out_dir, graph, spec, state: TrainState, eval_names) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", state.rows, eval_names)
    checkpoint.save_tensors(out / "params.bin", list(state.params.values()))
    manifest = [network.graph_manifest(graph).rstrip("\n")]
    manifest.append("params " + " ".join(state.params.keys()))
    if spec is not None and state.phi is not None:
        manifest.append(
            f"side kind={spec.kind} attach_level={spec.attach_level} lambda={spec.lam:g} "
            f"num_classes={spec.num_classes} mlp_hidden={spec.mlp_hidden}"
            + (f" multi_levels={spec.multi_level.num_levels} multi_decay={spec.multi_level.decay:g}"
               if spec.multi_level else "")
        )
        names, tensors = _phi_tensor_list(spec, state.phi)
        checkpoint.save_tensors(out / "side.bin", tensors)
        manifest.append("side_params " + " ".join(names))
    checkpoint.atomic_write_text(out / "manifest.txt", "\n".join(manifest) + "\n")


def load_run_checkpoint(run_dir, graph, spec):
    """Rebuild (params, phi) from a run directory written by save_run_checkpoint."""
    run = Path(run_dir)
    params = network.NetworkParams.from_list(graph, checkpoint.load_tensors(run / "params.bin"))
    phi = None
    side_path = run / "side.bin"
    if spec is not None and side_path.exists():
        tensors = checkpoint.load_tensors(side_path)
        if spec.multi_level is not None:
            phi = []
            pos = 0
            for lvl in range(1, spec.multi_level.num_levels + 1):
                shapes = regularizer.side_param_shapes(spec, graph.level_shape(lvl)[0])
                d = OrderedDict()
                for k in shapes:
                    d[k] = tensors[pos]
                    pos += 1
                phi.append(d)
        else:
            shapes = regularizer.side_param_shapes(spec, graph.level_shape(spec.attach_level)[0])
            phi = OrderedDict(zip(shapes.keys(), tensors))
    return params, phi
