"""Layer graphs: composition of the array ops into a trainable classifier.

A LayerGraph is an ordered list of layer descriptors plus an attach level.
Levels number the post-activation outputs of the convolutional stages,
starting at 1; the activation at the attach level is the "tap", the feature
map a side branch can read. Parameters below or at the attach level form
the delta partition, everything above is theta.

Backward here is plain reverse accumulation over the op-level vjps, with
one extra hook: an optional gradient can be injected at a tap, where it is
added to the upstream gradient flowing down from the classification head.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ops
from .exceptions import ConfigError, InputError, NumericError, ShapeError

__all__ = [
    "Conv",
    "Relu",
    "MaxPool",
    "Flatten",
    "Affine",
    "GradReverse",
    "LayerGraph",
    "NetworkParams",
    "init_params",
    "forward",
    "forward_taps",
    "backward",
    "backward_with_logits",
    "grad_reverse",
    "grad_reverse_vjp",
    "finite_diff_check",
    "fd_max_rel_errors",
    "build_backbone",
    "graph_manifest",
]


@dataclass(frozen=True)
class Conv:
    name: str
    spec: ops.ConvSpec


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Affine:
    name: str
    in_features: int
    out_features: int


@dataclass(frozen=True)
class GradReverse:
    """Identity in the forward pass; multiplies the upstream gradient by -scale."""

    scale: float

    def __post_init__(self):
        if not (self.scale >= 0):
            raise ConfigError(f"grad_reverse scale must be non-negative, got {self.scale!r}")


class LayerGraph:
    """Validated sequence of layers with named conv-level taps.

    input_shape is (channels, height, width) for a single sample.
    attach_level selects which conv level's post-activation output is the
    tap returned by forward; it must lie in [1, number of conv levels].
    """

    def __init__(self, layers, input_shape: tuple[int, int, int], attach_level: int = 1):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (channels, height, width), got {input_shape!r}")
        self.attach_level = int(attach_level)
        self._infer()
        if not self.levels:
            if self.attach_level != 0:
                raise ConfigError("graph has no conv levels, attach_level must be 0")
        elif not 1 <= self.attach_level <= len(self.levels):
            raise ConfigError(
                f"attach_level {self.attach_level} out of range 1..{len(self.levels)}"
            )

    def _infer(self):
        """Walk the layers once, recording output shapes and conv levels."""
        shape = self.input_shape
        self.out_shapes: list[tuple] = []
        self.levels: dict[int, int] = {}  # level number -> layer index of its tap
        names = set()
        prev_conv = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if layer.name in names:
                    raise ConfigError(f"duplicate layer name {layer.name!r}")
                names.add(layer.name)
                if len(shape) != 3:
                    raise ShapeError(f"layer {layer.name}: expects an image input, got shape {shape}")
                if shape[0] != layer.spec.in_channels:
                    raise ShapeError(
                        f"layer {layer.name}: input channel axis has size {shape[0]}, "
                        f"spec expects {layer.spec.in_channels}"
                    )
                oh, ow = layer.spec.out_hw(shape[1], shape[2])
                shape = (layer.spec.out_channels, oh, ow)
                prev_conv = i
            elif isinstance(layer, Relu):
                if prev_conv is not None and prev_conv == i - 1:
                    self.levels[len(self.levels) + 1] = i
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (maxpool): expects an image input, got shape {shape}")
                oh = (shape[1] - layer.window) // layer.stride + 1
                ow = (shape[2] - layer.window) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise ShapeError(f"layer {i} (maxpool): window {layer.window} exceeds input {shape}")
                shape = (shape[0], oh, ow)
            elif isinstance(layer, Flatten):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (flatten): expects an image input, got shape {shape}")
                shape = (shape[0] * shape[1] * shape[2],)
            elif isinstance(layer, Affine):
                if layer.name in names:
                    raise ConfigError(f"duplicate layer name {layer.name!r}")
                names.add(layer.name)
                if len(shape) != 1:
                    raise ShapeError(f"layer {layer.name}: expects a flat input, got shape {shape}")
                if shape[0] != layer.in_features:
                    raise ShapeError(
                        f"layer {layer.name}: feature axis has size {shape[0]}, "
                        f"layer expects {layer.in_features}"
                    )
                shape = (layer.out_features,)
            elif isinstance(layer, GradReverse):
                pass
            else:
                raise ConfigError(f"unknown layer descriptor {layer!r}")
            self.out_shapes.append(shape)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level_shape(self, level: int) -> tuple:
        """(channels, height, width) of the tap at a conv level."""
        if level not in self.levels:
            raise ConfigError(f"no conv level {level} in this graph")
        return self.out_shapes[self.levels[level]]

    def param_layers(self):
        """Layers that carry parameters, in graph order."""
        return [l for l in self.layers if isinstance(l, (Conv, Affine))]

    def param_keys(self):
        keys = []
        for l in self.param_layers():
            keys.append(f"{l.name}.weight")
            keys.append(f"{l.name}.bias")
        return keys

    def partition(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        """(delta_keys, theta_keys): parameters at or below the attach level vs above."""
        if not self.levels:
            return (), tuple(self.param_keys())
        cut = self.levels[self.attach_level]
        delta, theta = [], []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Conv, Affine)):
                dest = delta if i <= cut else theta
                dest.append(f"{layer.name}.weight")
                dest.append(f"{layer.name}.bias")
        return tuple(delta), tuple(theta)


class NetworkParams:
    """Ordered registry of named parameter tensors for a LayerGraph.

    Key order is fixed at construction and defines the checkpoint order.
    Array shapes are immutable; values may be updated through assign().
    """

    def __init__(self, tensors: OrderedDict[str, np.ndarray]):
        self._tensors = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in tensors.items())

    @classmethod
    def from_list(cls, graph: LayerGraph, tensors) -> "NetworkParams":
        keys = graph.param_keys()
        if len(tensors) != len(keys):
            raise InputError(f"expected {len(keys)} tensors for this graph, got {len(tensors)}")
        return cls(OrderedDict(zip(keys, tensors)))

    def keys(self):
        return self._tensors.keys()

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def __getitem__(self, key: str) -> np.ndarray:
        return self._tensors[key]

    def __contains__(self, key: str) -> bool:
        return key in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def assign(self, key: str, value: np.ndarray):
        old = self._tensors[key]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to {key!r} of shape {old.shape}")
        self._tensors[key] = value

    def copy(self) -> "NetworkParams":
        return NetworkParams(OrderedDict((k, v.copy()) for k, v in self._tensors.items()))

    def as_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict(self._tensors)


def init_params(graph: LayerGraph, seed: int) -> NetworkParams:
    """Seeded uniform initialization in +-sqrt(6/(fan_in+fan_out)); biases zero."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for layer in graph.param_layers():
        if isinstance(layer, Conv):
            s = layer.spec
            fan_in = s.in_channels * s.kernel_h * s.kernel_w
            fan_out = s.out_channels * s.kernel_h * s.kernel_w
            shape = (s.out_channels, s.in_channels, s.kernel_h, s.kernel_w)
            nbias = s.out_channels
        else:
            fan_in, fan_out = layer.in_features, layer.out_features
            shape = (layer.in_features, layer.out_features)
            nbias = layer.out_features
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"{layer.name}.weight"] = rng.uniform(-limit, limit, size=shape)
        tensors[f"{layer.name}.bias"] = np.zeros(nbias)
    return NetworkParams(tensors)


def _check_batch(graph: LayerGraph, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != graph.input_shape:
        raise ShapeError(
            f"batch shape {batch.shape} does not match graph input "
            f"(batch, {', '.join(map(str, graph.input_shape))})"
        )
    return batch


def _run_forward(graph: LayerGraph, params: NetworkParams, batch: np.ndarray):
    """Returns (per-layer input activations, output, taps by level)."""
    x = _check_batch(graph, batch)
    inputs = []
    taps = {}
    level_by_index = {idx: lvl for lvl, idx in graph.levels.items()}
    for i, layer in enumerate(graph.layers):
        inputs.append(x)
        if isinstance(layer, Conv):
            x = ops.conv2d(x, layer.spec, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        elif isinstance(layer, Relu):
            x = ops.relu(x)
        elif isinstance(layer, MaxPool):
            x = ops.maxpool2d(x, layer.window, layer.stride)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Affine):
            x = ops.affine(x, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        elif isinstance(layer, GradReverse):
            x = grad_reverse(x, layer.scale)
        if i in level_by_index:
            taps[level_by_index[i]] = x
    return inputs, x, taps


def forward(graph: LayerGraph, params: NetworkParams, batch):
    """Run the graph; returns (logits, tap) with the tap at graph.attach_level."""
    _, logits, taps = _run_forward(graph, params, batch)
    return logits, taps.get(graph.attach_level)


def forward_taps(graph: LayerGraph, params: NetworkParams, batch):
    """Like forward but returns every conv-level tap: (logits, {level: tap})."""
    _, logits, taps = _run_forward(graph, params, batch)
    return logits, taps


def backward(graph, params, batch, labels, side_grad_into_tap=None, *, tap_grads=None):
    """Reverse accumulation of the mean cross-entropy loss over the batch.

    Returns (loss, grads) with one gradient array per parameter tensor,
    keyed and ordered like params. side_grad_into_tap, if given, is added
    to the upstream gradient at the graph's attach-level tap, which is how
    a side branch's (already reversed) gradient enters the lower layers.
    tap_grads generalizes this to {level: gradient} for several levels at
    once. labels may be None to backpropagate only injected tap gradients;
    the loss is then None.
    """
    loss, grads, _ = backward_with_logits(graph, params, batch, labels,
                                          side_grad_into_tap, tap_grads=tap_grads)
    return loss, grads


def backward_with_logits(graph, params, batch, labels, side_grad_into_tap=None, *, tap_grads=None):
    """backward, but also returns the forward logits: (loss, grads, logits)."""
    inputs, logits, taps = _run_forward(graph, params, batch)
    injections: dict[int, np.ndarray] = {}
    if tap_grads:
        injections.update(tap_grads)
    if side_grad_into_tap is not None:
        lvl = graph.attach_level
        injections[lvl] = injections.get(lvl, 0) + np.asarray(side_grad_into_tap, dtype=np.float64)
    for lvl, g in injections.items():
        if lvl not in graph.levels:
            raise InputError(f"tap gradient for level {lvl}, but the graph has no such level")
        if np.shape(g) != taps[lvl].shape:
            raise ShapeError(
                f"tap gradient for level {lvl} has shape {np.shape(g)}, tap is {taps[lvl].shape}"
            )
    if labels is not None:
        loss, d = ops.softmax_cross_entropy(logits, labels)
    else:
        loss, d = None, np.zeros_like(logits)
    level_by_index = {idx: lvl for lvl, idx in graph.levels.items()}
    grads = OrderedDict()
    for i in range(len(graph.layers) - 1, -1, -1):
        layer = graph.layers[i]
        if i in level_by_index and level_by_index[i] in injections:
            d = d + injections[level_by_index[i]]
        inp = inputs[i]
        if isinstance(layer, Conv):
            d, dw, db = ops.conv2d_vjp(inp, layer.spec, params[f"{layer.name}.weight"], d,
                                       need_input_grad=(i > 0))
            grads[f"{layer.name}.weight"] = dw
            grads[f"{layer.name}.bias"] = db
        elif isinstance(layer, Relu):
            d = ops.relu_vjp(inp, d)
        elif isinstance(layer, MaxPool):
            d = ops.maxpool2d_vjp(inp, layer.window, layer.stride, d)
        elif isinstance(layer, Flatten):
            d = d.reshape(inp.shape)
        elif isinstance(layer, Affine):
            d, dw, db = ops.affine_vjp(inp, params[f"{layer.name}.weight"], d)
            grads[f"{layer.name}.weight"] = dw
            grads[f"{layer.name}.bias"] = db
        elif isinstance(layer, GradReverse):
            d = grad_reverse_vjp(d, layer.scale)
    ordered = OrderedDict((k, grads[k]) for k in params.keys())
    return loss, ordered, logits


def grad_reverse(x, scale: float) -> np.ndarray:
    """Identity map; exists for its vjp, which flips and scales the gradient."""
    if not (scale >= 0):
        raise InputError(f"grad_reverse scale must be non-negative, got {scale!r}")
    return np.array(x, dtype=np.float64, copy=True)


def grad_reverse_vjp(upstream, scale: float) -> np.ndarray:
    if not (scale >= 0):
        raise InputError(f"grad_reverse scale must be non-negative, got {scale!r}")
    return -scale * np.asarray(upstream, dtype=np.float64)


def fd_max_rel_errors(loss_fn, tensors, analytic, eps: float,
                      max_coords_per_tensor: int | None = None, coord_seed: int = 0):
    """Central-difference check of analytic gradients for named tensors.

    loss_fn is a zero-argument callable evaluating the scalar objective with
    the current (live) tensor values; entries of ``tensors`` are perturbed in
    place and restored. When a tensor has more coordinates than
    max_coords_per_tensor, a seeded subset is checked. Returns
    {name: max relative error}, relative to max(|analytic|, |numeric|, 1e-8).

    The loss surface of a relu/maxpool network is piecewise linear; a
    coordinate whose probe interval straddles a kink has no derivative for
    central differences to estimate. Such coordinates are detected by
    comparing the slope at width eps against width eps/2 (they agree to
    O(eps^2) on smooth stretches) and skipped. A tensor whose every checked
    coordinate is kinked is unverifiable and raises a numeric error.
    """
    base = loss_fn()
    if not np.isfinite(base):
        raise NumericError(f"objective is not finite ({base}) at the checked point")
    rng = np.random.default_rng(coord_seed)
    report = {}
    for name, t in tensors.items():
        flat = t.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = np.arange(n)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        worst = 0.0
        checked = 0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_fn()
            flat[c] = orig - eps
            down = loss_fn()
            flat[c] = orig + 0.5 * eps
            up_h = loss_fn()
            flat[c] = orig - 0.5 * eps
            down_h = loss_fn()
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            numeric_h = (up_h - down_h) / eps
            scale = max(1.0, abs(numeric), abs(numeric_h))
            # two complementary smoothness probes: slopes at widths eps and
            # eps/2 agree to O(eps^2) on smooth stretches, and the quadratic
            # term of a smooth function cancels exactly in curv - 4*curv_half
            # while a kink's contribution scales with the width instead
            curv = up + down - 2.0 * base
            curv_h = up_h + down_h - 2.0 * base
            if (abs(numeric - numeric_h) > 1e-6 * scale
                    or abs(curv - 4.0 * curv_h) > 1e-6 * eps * scale):
                continue  # kink inside the probe interval
            checked += 1
            a = a_flat[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
        if len(coords) and not checked:
            raise NumericError(
                f"every checked coordinate of {name!r} sits on a kink; "
                f"the gradient there cannot be verified by finite differences"
            )
        report[name] = worst
    return report


def finite_diff_check(graph, params, batch, labels, eps: float = 1e-5,
                      max_coords_per_tensor: int | None = None, coord_seed: int = 0):
    """Verify backward() against central differences of the mean CE loss.

    Returns {tensor name: max relative error}. Graphs without parameters
    produce an empty report.
    """
    batch = _check_batch(graph, batch)
    _, analytic = backward(graph, params, batch, labels)

    def loss_fn():
        logits, _ = forward(graph, params, batch)
        loss, _ = ops.softmax_cross_entropy(logits, labels)
        return loss

    return fd_max_rel_errors(loss_fn, params.as_dict(), analytic, eps,
                             max_coords_per_tensor, coord_seed)


def build_backbone(desc: str, num_classes: int = 10, input_shape=(1, 28, 28),
                   attach_level: int = 1) -> LayerGraph:
    """Build a conv backbone from a compact descriptor string.

    The descriptor is dash-separated tokens: ``c<channels>k<kernel>p<pad>``
    adds a conv + relu + maxpool(2,2) stage, ``f<width>`` adds a hidden
    affine + relu. A final affine to num_classes is appended automatically.
    Example: ``c32k5p2-c64k5p2-f1024`` is the default two-level backbone.
    """
    import re

    layers: list = []
    c, h, w = input_shape
    flat = None
    nconv = nfc = 0
    for token in desc.split("-"):
        m = re.fullmatch(r"c(\d+)k(\d+)p(\d+)", token)
        if m:
            if flat is not None:
                raise ConfigError(f"conv token {token!r} after a dense token in {desc!r}")
            och, k, p = int(m.group(1)), int(m.group(2)), int(m.group(3))
            nconv += 1
            spec = ops.ConvSpec(c, och, k, k, stride=1, padding=p)
            layers += [Conv(f"conv{nconv}", spec), Relu(), MaxPool(2, 2)]
            oh, ow = spec.out_hw(h, w)
            c, h, w = och, oh // 2, ow // 2
            continue
        m = re.fullmatch(r"f(\d+)", token)
        if m:
            width = int(m.group(1))
            if flat is None:
                layers.append(Flatten())
                flat = c * h * w
            nfc += 1
            layers += [Affine(f"fc{nfc}", flat, width), Relu()]
            flat = width
            continue
        raise ConfigError(f"bad backbone token {token!r} in {desc!r}")
    if flat is None:
        layers.append(Flatten())
        flat = c * h * w
    layers.append(Affine(f"fc{nfc + 1}", flat, num_classes))
    return LayerGraph(layers, input_shape, attach_level=attach_level)


def graph_manifest(graph: LayerGraph) -> str:
    """Plain-text description of a graph: layers, shapes, levels, partition."""
    lines = [f"input {'x'.join(map(str, graph.input_shape))}", f"attach_level {graph.attach_level}"]
    for i, layer in enumerate(graph.layers):
        shape = "x".join(map(str, graph.out_shapes[i]))
        if isinstance(layer, Conv):
            s = layer.spec
            lines.append(
                f"layer {i} conv name={layer.name} in={s.in_channels} out={s.out_channels} "
                f"kernel={s.kernel_h}x{s.kernel_w} stride={s.stride} pad={s.padding} -> {shape}"
            )
        elif isinstance(layer, Relu):
            lvl = [l for l, idx in graph.levels.items() if idx == i]
            tag = f" tap=level{lvl[0]}" if lvl else ""
            lines.append(f"layer {i} relu -> {shape}{tag}")
        elif isinstance(layer, MaxPool):
            lines.append(f"layer {i} maxpool window={layer.window} stride={layer.stride} -> {shape}")
        elif isinstance(layer, Flatten):
            lines.append(f"layer {i} flatten -> {shape}")
        elif isinstance(layer, Affine):
            lines.append(
                f"layer {i} affine name={layer.name} in={layer.in_features} "
                f"out={layer.out_features} -> {shape}"
            )
        elif isinstance(layer, GradReverse):
            lines.append(f"layer {i} grad_reverse scale={layer.scale} -> {shape}")
    delta, theta = graph.partition()
    lines.append("delta " + " ".join(delta))
    lines.append("theta " + " ".join(theta))
    return "\n".join(lines) + "\n"
