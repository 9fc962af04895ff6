"""Patch-wise adversarial side classifier and the combined training objective.

A side classifier h(.; phi) reads the feature map tapped from a conv level
and predicts the image label independently at every spatial location. Its
loss (the patch loss) is the location-mean softmax cross entropy. During
training the side branch plays an adversarial game against the lower
layers: phi descends on the patch loss while the tapped features ascend on
it, which is realized by routing the tap gradient through a reversal with
scale lambda.

The resulting gradient fields, per parameter partition:

    theta (head):   d(main CE)/d(theta)
    phi   (side):   +lambda * d(patch loss)/d(phi)
    delta (bottom): d(main CE)/d(delta) - lambda * d(patch loss)/d(delta)
"""

from __future__ import annotations

import re
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import network, ops
from .exceptions import ConfigError, InputError, ShapeError

__all__ = [
    "MultiLevelSpec",
    "SideClassifierSpec",
    "side_param_shapes",
    "init_side_params",
    "init_multi_side_params",
    "side_logits",
    "side_logits_vjp",
    "patch_loss",
    "patch_loss_with_grad",
    "side_accuracy",
    "ParResult",
    "par_objective",
    "MultiLevelResult",
    "multi_level_objective",
    "par_finite_diff_check",
]


@dataclass(frozen=True)
class MultiLevelSpec:
    """Side branches on several conv levels with geometrically decaying weights.

    Level l (1-based) carries weight decay**(l-1); the weights multiply the
    global lambda, they do not replace it.
    """

    num_levels: int
    decay: float

    def __post_init__(self):
        if self.num_levels < 1:
            raise ConfigError(f"multi_level num_levels must be >= 1, got {self.num_levels}")
        if not (self.decay >= 0):
            raise ConfigError(f"multi_level decay must be non-negative, got {self.decay!r}")

    def weights(self) -> tuple[float, ...]:
        return tuple(self.decay ** l for l in range(self.num_levels))


_KIND_RE = re.compile(r"^(linear|mlp3|conv(\d+))$")


@dataclass(frozen=True)
class SideClassifierSpec:
    """Configuration of the side classifier.

    kind: "linear" (a single c x k map applied at every location, i.e. a
    1x1 convolution), "convK" for odd K (a K x K convolution, padded so the
    location grid is preserved), or "mlp3" (three per-fiber affine stages,
    ReLU after the first two, as stacked 1x1 convolutions).

    lam is the adversarial weight lambda. There is exactly one parameter
    set phi regardless of the size of the location grid.
    """

    kind: str = "linear"
    attach_level: int = 1
    lam: float = 1.0
    num_classes: int = 10
    mlp_hidden: int = 64
    multi_level: MultiLevelSpec | None = None

    def __post_init__(self):
        m = _KIND_RE.match(self.kind)
        if not m:
            raise ConfigError(f"side classifier kind must be linear, convK, or mlp3, got {self.kind!r}")
        if m.group(2) is not None:
            k = int(m.group(2))
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"conv side classifier kernel must be odd and positive, got {k}")
        if not (self.lam >= 0):
            raise ConfigError(f"lambda must be non-negative, got {self.lam!r}")
        if self.attach_level < 1:
            raise ConfigError(f"attach_level must be >= 1, got {self.attach_level}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kind == "mlp3" and self.mlp_hidden < 1:
            raise ConfigError(f"mlp_hidden must be >= 1, got {self.mlp_hidden}")

    @property
    def conv_kernel(self) -> int:
        m = _KIND_RE.match(self.kind)
        return int(m.group(2)) if m.group(2) else 1


def _stage_convspecs(spec: SideClassifierSpec, in_channels: int) -> list[ops.ConvSpec]:
    k = spec.num_classes
    if spec.kind == "linear":
        return [ops.ConvSpec(in_channels, k, 1, 1)]
    if spec.kind == "mlp3":
        h = spec.mlp_hidden
        return [
            ops.ConvSpec(in_channels, h, 1, 1),
            ops.ConvSpec(h, h, 1, 1),
            ops.ConvSpec(h, k, 1, 1),
        ]
    kk = spec.conv_kernel
    return [ops.ConvSpec(in_channels, k, kk, kk, stride=1, padding=(kk - 1) // 2)]


def side_param_shapes(spec: SideClassifierSpec, in_channels: int) -> OrderedDict[str, tuple]:
    """Shapes of the phi tensors, in registry (checkpoint) order."""
    shapes = OrderedDict()
    for i, cs in enumerate(_stage_convspecs(spec, in_channels)):
        shapes[f"stage{i}.weight"] = (cs.out_channels, cs.in_channels, cs.kernel_h, cs.kernel_w)
        shapes[f"stage{i}.bias"] = (cs.out_channels,)
    return shapes


def init_side_params(spec: SideClassifierSpec, in_channels: int, seed: int) -> OrderedDict[str, np.ndarray]:
    """Seeded uniform init, same scheme as the backbone; biases zero."""
    rng = np.random.default_rng(seed)
    phi = OrderedDict()
    for i, cs in enumerate(_stage_convspecs(spec, in_channels)):
        fan_in = cs.in_channels * cs.kernel_h * cs.kernel_w
        fan_out = cs.out_channels * cs.kernel_h * cs.kernel_w
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        shape = (cs.out_channels, cs.in_channels, cs.kernel_h, cs.kernel_w)
        phi[f"stage{i}.weight"] = rng.uniform(-limit, limit, size=shape)
        phi[f"stage{i}.bias"] = np.zeros(cs.out_channels)
    return phi


def init_multi_side_params(graph: network.LayerGraph, spec: SideClassifierSpec, seed: int):
    """One phi per level 1..num_levels, seeded independently per level."""
    ml = spec.multi_level
    if ml is None:
        raise ConfigError("init_multi_side_params requires spec.multi_level")
    if ml.num_levels > graph.num_levels:
        raise ConfigError(
            f"multi_level wants {ml.num_levels} levels but the graph has {graph.num_levels}"
        )
    return [
        init_side_params(spec, graph.level_shape(lvl)[0], seed=np.random.SeedSequence([seed, lvl]).generate_state(1)[0])
        for lvl in range(1, ml.num_levels + 1)
    ]


def _check_tap(tap: np.ndarray, phi: OrderedDict) -> np.ndarray:
    tap = np.asarray(tap, dtype=np.float64)
    if tap.ndim != 4:
        raise ShapeError(f"tap must have 4 axes (batch, channel, rows, cols), got {tap.ndim}")
    w0 = phi[next(iter(phi))]
    if tap.shape[1] != w0.shape[1]:
        raise ShapeError(
            f"tap channel axis has size {tap.shape[1]}, side classifier expects {w0.shape[1]}"
        )
    return tap


def side_logits(tap, spec: SideClassifierSpec, phi: OrderedDict) -> np.ndarray:
    """Per-location class logits, shape (b, k, m, n) for a (b, c, m, n) tap."""
    tap = _check_tap(tap, phi)
    stages = _stage_convspecs(spec, tap.shape[1])
    x = tap
    for i, cs in enumerate(stages):
        x = ops.conv2d(x, cs, phi[f"stage{i}.weight"], phi[f"stage{i}.bias"])
        if spec.kind == "mlp3" and i < len(stages) - 1:
            x = ops.relu(x)
    return x


def side_logits_vjp(tap, spec: SideClassifierSpec, phi: OrderedDict, upstream):
    """Returns (d_tap, d_phi) for side_logits."""
    tap = _check_tap(tap, phi)
    stages = _stage_convspecs(spec, tap.shape[1])
    acts = [tap]
    x = tap
    for i, cs in enumerate(stages):
        x = ops.conv2d(x, cs, phi[f"stage{i}.weight"], phi[f"stage{i}.bias"])
        if spec.kind == "mlp3" and i < len(stages) - 1:
            acts.append(x)  # pre-activation, relu applied on the way back in
            x = ops.relu(x)
        acts.append(x)
    d = np.asarray(upstream, dtype=np.float64)
    d_phi = OrderedDict()
    for i in range(len(stages) - 1, -1, -1):
        cs = stages[i]
        if spec.kind == "mlp3" and i < len(stages) - 1:
            pre = acts[2 * i + 1]
            d = ops.relu_vjp(pre, d)
            inp = acts[2 * i]
        else:
            inp = acts[2 * i] if spec.kind == "mlp3" else acts[i]
        d, dw, db = ops.conv2d_vjp(inp, cs, phi[f"stage{i}.weight"], d)
        d_phi[f"stage{i}.weight"] = dw
        d_phi[f"stage{i}.bias"] = db
    ordered = OrderedDict((k, d_phi[k]) for k in phi.keys())
    return d, ordered


def patch_loss(side, labels) -> float:
    """Mean over batch and all locations of per-location CE against the image label."""
    loss, _ = patch_loss_with_grad(side, labels)
    return loss


def patch_loss_with_grad(side, labels):
    """(loss, d_side): the location grid is folded into the batch axis, so the
    normalization is 1/(batch * rows * cols)."""
    side = np.asarray(side, dtype=np.float64)
    if side.ndim != 4:
        raise ShapeError(f"side logits must have 4 axes (batch, class, rows, cols), got {side.ndim}")
    b, k, m, n = side.shape
    flat = side.transpose(0, 2, 3, 1).reshape(b * m * n, k)
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels axis has size {labels.shape}, expected ({b},)")
    rep = np.repeat(labels, m * n)
    loss, dflat = ops.softmax_cross_entropy(flat, rep)
    d_side = dflat.reshape(b, m, n, k).transpose(0, 3, 1, 2)
    return loss, d_side


def side_accuracy(tap, spec: SideClassifierSpec, phi: OrderedDict, labels) -> float:
    """Fraction of (sample, location) pairs whose argmax prediction is the label.

    Ties break to the lowest class index.
    """
    logits = side_logits(tap, spec, phi)
    preds = logits.argmax(axis=1)
    labels = np.asarray(labels)
    if labels.shape != (preds.shape[0],):
        raise ShapeError(f"labels axis has size {labels.shape}, expected ({preds.shape[0]},)")
    return float((preds == labels[:, None, None]).mean())


@dataclass
class ParResult:
    main_loss: float
    side_loss: float
    net_grads: OrderedDict
    side_grads: OrderedDict
    logits: np.ndarray = field(repr=False, default=None)


def par_objective(graph, params, phi, spec: SideClassifierSpec, batch, labels) -> ParResult:
    """One combined reverse pass for the adversarial objective.

    The tap at spec.attach_level feeds the side classifier; the patch-loss
    gradient re-enters the backbone through a reversal of scale lambda.
    Gradients returned: net_grads for every backbone tensor (delta receives
    main minus lambda times patch-loss pull, theta only main), side_grads
    equal to +lambda * d(patch loss)/d(phi).
    """
    logits, taps = network.forward_taps(graph, params, batch)
    if spec.attach_level not in taps:
        raise ConfigError(f"graph has no conv level {spec.attach_level} to attach the side classifier")
    tap = taps[spec.attach_level]
    side = side_logits(tap, spec, phi)
    side_loss, d_side = patch_loss_with_grad(side, labels)
    d_tap, d_phi = side_logits_vjp(tap, spec, phi, d_side)
    reversed_grad = network.grad_reverse_vjp(d_tap, spec.lam)
    main_loss, net_grads = network.backward(
        graph, params, batch, labels, tap_grads={spec.attach_level: reversed_grad}
    )
    side_grads = OrderedDict((k, spec.lam * v) for k, v in d_phi.items())
    return ParResult(main_loss, side_loss, net_grads, side_grads, logits=logits)


@dataclass
class MultiLevelResult:
    main_loss: float
    side_losses: list[float]
    total_side_loss: float
    net_grads: OrderedDict
    side_grads: list[OrderedDict]
    logits: np.ndarray = field(repr=False, default=None)


def multi_level_objective(graph, params, phi_list, spec: SideClassifierSpec, batch, labels) -> MultiLevelResult:
    """Side branches at levels 1..num_levels with weights 1, d, d**2, ...

    The total side loss is the weighted sum of per-level patch losses; each
    level's reversal scale is its weight times the global lambda.
    """
    ml = spec.multi_level
    if ml is None:
        raise ConfigError("multi_level_objective requires spec.multi_level")
    if ml.num_levels > graph.num_levels:
        raise ConfigError(
            f"multi_level wants {ml.num_levels} levels but the graph has {graph.num_levels}"
        )
    if len(phi_list) != ml.num_levels:
        raise ConfigError(f"need {ml.num_levels} phi sets, got {len(phi_list)}")
    logits, taps = network.forward_taps(graph, params, batch)
    weights = ml.weights()
    side_losses: list[float] = []
    side_grads: list[OrderedDict] = []
    tap_grads: dict[int, np.ndarray] = {}
    for lvl in range(1, ml.num_levels + 1):
        phi = phi_list[lvl - 1]
        w = weights[lvl - 1]
        side = side_logits(taps[lvl], spec, phi)
        loss_l, d_side = patch_loss_with_grad(side, labels)
        d_tap, d_phi = side_logits_vjp(taps[lvl], spec, phi, d_side)
        side_losses.append(loss_l)
        tap_grads[lvl] = network.grad_reverse_vjp(d_tap, spec.lam * w)
        side_grads.append(OrderedDict((k, spec.lam * w * v) for k, v in d_phi.items()))
    main_loss, net_grads = network.backward(graph, params, batch, labels, tap_grads=tap_grads)
    total = float(sum(w * l for w, l in zip(weights, side_losses)))
    return MultiLevelResult(main_loss, side_losses, total, net_grads, side_grads, logits=logits)


def par_finite_diff_check(graph, params, phi, spec: SideClassifierSpec, batch, labels,
                          eps: float = 1e-5, max_coords_per_tensor: int | None = None,
                          coord_seed: int = 0):
    """Finite-difference verification of the adversarial gradient fields.

    No single scalar has the PAR gradient as its gradient, so the check
    runs per partition: backbone tensors against main - lambda * side
    (correct for delta, and for theta because the side loss does not
    depend on theta), phi tensors against +lambda * side. Returns
    {tensor name: max relative error} with phi names prefixed "side.".
    """
    res = par_objective(graph, params, phi, spec, batch, labels)

    def side_total() -> float:
        _, taps = network.forward_taps(graph, params, batch)
        side = side_logits(taps[spec.attach_level], spec, phi)
        return patch_loss(side, labels)

    def net_loss() -> float:
        logits, _ = network.forward(graph, params, batch)
        main, _ = ops.softmax_cross_entropy(logits, labels)
        return main - spec.lam * side_total()

    def phi_loss() -> float:
        return spec.lam * side_total()

    report = network.fd_max_rel_errors(net_loss, params.as_dict(), res.net_grads, eps,
                                       max_coords_per_tensor, coord_seed)
    phi_report = network.fd_max_rel_errors(phi_loss, phi, res.side_grads, eps,
                                           max_coords_per_tensor, coord_seed)
    for k, v in phi_report.items():
        report[f"side.{k}"] = v
    return report
