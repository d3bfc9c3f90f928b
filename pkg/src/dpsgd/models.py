"""Desk-scale model definitions with per-example forward/backward.

A ModelSpec is an ordered list of layer descriptors; build_model turns it
into a ParamSet whose parameters live in one flat vector so the privacy
engine can clip and noise gradients as plain vectors. Per-example
gradients share no state across calls: the gradient of example x never
depends on any other example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, PrivacyViolationError, ShapeError


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_features: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    groups: int = 32
    size: int = 2


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))


def mlp_spec(input_dim: int, hidden: list[int], num_classes: int) -> ModelSpec:
    """Fully connected net: hidden linear+relu blocks, then a linear head.

    An empty hidden list gives a plain softmax-regression model.
    """
    layers = []
    for width in hidden:
        layers.append(LayerSpec("linear", out_features=width))
        layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("linear", out_features=num_classes))
    return ModelSpec(tuple(layers), (input_dim,), num_classes)


def cnn_spec(
    input_shape: tuple,
    channels: tuple = (32, 32, 64, 64),
    groups: int = 32,
    num_classes: int = 10,
) -> ModelSpec:
    """Four conv -> group_norm -> relu blocks with two pooling stages."""
    layers = []
    for i, ch in enumerate(channels):
        layers.append(LayerSpec("conv2d", out_channels=ch, kernel=3, stride=1, padding=1))
        layers.append(LayerSpec("group_norm", groups=min(groups, ch)))
        layers.append(LayerSpec("relu"))
        if i in (1, len(channels) - 1):
            layers.append(LayerSpec("max_pool", size=2))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("linear", out_features=num_classes))
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes)


def _infer_shapes(spec: ModelSpec) -> list[tuple]:
    """Shape after each layer; raises if consecutive layers do not compose."""
    shapes = []
    shape = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        if layer.kind in ("batch_norm", "batchnorm"):
            raise PrivacyViolationError(
                f"layer {idx}: batch normalization mixes samples within a batch "
                "and is not allowed in a per-example-privacy model"
            )
        if layer.kind == "linear":
            if len(shape) != 1:
                raise ShapeError(f"layer {idx}: linear needs a flat input, got {shape}")
            shape = (layer.out_features,)
        elif layer.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"layer {idx}: conv2d needs (c, h, w) input, got {shape}")
            c, h, w = shape
            h2 = ops._conv_out_extent(h, layer.kernel, layer.stride, layer.padding, "h")
            w2 = ops._conv_out_extent(w, layer.kernel, layer.stride, layer.padding, "w")
            shape = (layer.out_channels, h2, w2)
        elif layer.kind == "group_norm":
            if len(shape) != 3:
                raise ShapeError(f"layer {idx}: group_norm needs (c, h, w) input, got {shape}")
            if shape[0] % layer.groups != 0:
                raise ConfigurationError(
                    f"layer {idx}: channels {shape[0]} not divisible by groups {layer.groups}"
                )
        elif layer.kind == "relu":
            pass
        elif layer.kind == "max_pool":
            if len(shape) != 3:
                raise ShapeError(f"layer {idx}: max_pool needs (c, h, w) input, got {shape}")
            c, h, w = shape
            if h % layer.size or w % layer.size:
                raise ConfigurationError(
                    f"layer {idx}: pool size {layer.size} does not divide {shape[1:]}"
                )
            shape = (c, h // layer.size, w // layer.size)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        else:
            raise ConfigurationError(f"layer {idx}: unknown layer kind {layer.kind!r}")
        shapes.append(shape)
    if shapes[-1] != (spec.num_classes,):
        raise ShapeError(
            f"model output shape {shapes[-1]} does not match num_classes {spec.num_classes}"
        )
    return shapes


@dataclass(frozen=True)
class ParamLayout:
    """Where one parameterized layer's tensors live inside the flat vector."""

    layer_index: int
    offset: int
    length: int
    params: tuple  # of (name, shape, offset-within-flat, size)


@dataclass
class ParamSet:
    """All model parameters as one flat vector plus its layout."""

    flat: np.ndarray
    layouts: tuple
    spec: ModelSpec

    def __post_init__(self):
        self._layout_by_layer = {lay.layer_index: lay for lay in self.layouts}

    @property
    def dim(self) -> int:
        return self.flat.size

    @property
    def layer_extents(self) -> tuple:
        return tuple((lay.offset, lay.length) for lay in self.layouts)

    def layout_for(self, layer_index: int) -> ParamLayout:
        return self._layout_by_layer[layer_index]

    def views(self, layout: ParamLayout) -> dict:
        flat = self.flat
        return {
            name: flat[offset : offset + size].reshape(shape)
            for name, shape, offset, size in layout.params
        }


def _param_shapes(layer: LayerSpec, in_shape: tuple) -> list:
    if layer.kind == "linear":
        return [("weight", (layer.out_features, in_shape[0])), ("bias", (layer.out_features,))]
    if layer.kind == "conv2d":
        return [
            ("weight", (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)),
            ("bias", (layer.out_channels,)),
        ]
    if layer.kind == "group_norm":
        return [("gamma", (in_shape[0],)), ("beta", (in_shape[0],))]
    return []


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> ParamSet:
    """Initialize parameters: He fan-in scaling for weights, zeros for
    biases, gamma=1 / beta=0 for norms. Deterministic given the seed."""
    shapes = _infer_shapes(spec)
    rng = np.random.default_rng([int(seed), 1])
    layouts = []
    chunks = []
    offset = 0
    in_shape = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        entries = []
        start = offset
        for name, shape in _param_shapes(layer, in_shape):
            size = int(np.prod(shape))
            if name == "weight":
                fan_in = int(np.prod(shape[1:]))
                values = rng.standard_normal(size) * np.sqrt(2.0 / fan_in)
            elif name == "gamma":
                values = np.ones(size)
            else:
                values = np.zeros(size)
            chunks.append(values.astype(dtype))
            entries.append((name, shape, offset, size))
            offset += size
        if entries:
            layouts.append(ParamLayout(idx, start, offset - start, tuple(entries)))
        in_shape = shapes[idx]
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=dtype)
    return ParamSet(flat=flat, layouts=tuple(layouts), spec=spec)


def _forward(spec: ModelSpec, params: ParamSet, example: np.ndarray, with_tapes: bool):
    if tuple(example.shape) != spec.input_shape:
        raise ShapeError(f"example shape {example.shape} does not match model input {spec.input_shape}")
    x = example.astype(params.flat.dtype, copy=False)
    tapes = []
    for idx, layer in enumerate(spec.layers):
        if layer.kind == "linear":
            p = params.views(params.layout_for(idx))
            x, tape = ops.linear_forward(x, p["weight"], p["bias"])
        elif layer.kind == "conv2d":
            p = params.views(params.layout_for(idx))
            x, tape = ops.conv2d_forward(x, p["weight"], p["bias"], layer.stride, layer.padding)
        elif layer.kind == "group_norm":
            p = params.views(params.layout_for(idx))
            y, tape = ops.group_norm_forward(x[None], p["gamma"], p["beta"], layer.groups)
            x = y[0]
        elif layer.kind == "relu":
            x, tape = ops.relu_forward(x)
        elif layer.kind == "max_pool":
            x, tape = ops.max_pool_forward(x, layer.size)
        elif layer.kind == "flatten":
            x, tape = ops.flatten_forward(x)
        else:
            raise ConfigurationError(f"unknown layer kind {layer.kind!r}")
        if with_tapes:
            tapes.append(tape)
    return x, tapes


def forward_logits(spec: ModelSpec, params: ParamSet, example: np.ndarray) -> np.ndarray:
    logits, _ = _forward(spec, params, example, with_tapes=False)
    return logits


def per_example_gradient(spec: ModelSpec, params: ParamSet, example: np.ndarray, label: int):
    """Loss and flattened gradient of the single-example loss.

    The flattening order is identical to the ParamSet layout; per-layer
    extents are recorded so the gradient can be clipped layer- or
    stage-wise later.
    """
    if not 0 <= int(label) < spec.num_classes:
        raise ValueError(f"label {label} out of range [0, {spec.num_classes})")
    logits, tapes = _forward(spec, params, example, with_tapes=True)
    loss, upstream = ops.softmax_cross_entropy(logits, int(label))
    grad = np.zeros(params.dim, dtype=params.flat.dtype)
    for idx in range(len(spec.layers) - 1, -1, -1):
        tape = tapes[idx]
        if tape.kind == "group_norm":
            d_x, param_grads = ops.backward_layer(tape, upstream[None])
            upstream = d_x[0]
        else:
            upstream, param_grads = ops.backward_layer(tape, upstream)
        layout = params._layout_by_layer.get(idx)
        if layout is not None:
            for (name, shape, offset, size), g in zip(layout.params, param_grads):
                grad[offset : offset + size] = g.reshape(-1)
    from .engine import FlatGradient

    return loss, FlatGradient(values=grad, layer_extents=params.layer_extents)


def evaluate_accuracy(spec: ModelSpec, params: ParamSet, examples: np.ndarray, labels: np.ndarray) -> float:
    correct = 0
    for x, y in zip(examples, labels):
        logits = forward_logits(spec, params, x)
        correct += int(np.argmax(logits)) == int(y)
    return correct / len(labels)
