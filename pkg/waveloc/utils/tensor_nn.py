"""Small layer engine for the localisation networks.

A model is an ordered list of :class:`LayerNode` objects.  Activations use the
layout ``(batch, channels, ears, time)`` for the convolutional part and
``(batch, features)`` after flattening.  Every layer kind has a forward and a
backward rule; :func:`forward` and :func:`backward` chain them.

The per-band stacks of the gammatone network are expressed as grouped
convolutions (one group per band) followed by ``flatten_concat``, which is the
same computation as running independent branches and concatenating them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from waveloc.errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Shape = Tuple[int, ...]

LAYER_KINDS = (
    "time_conv",
    "ear_conv2d",
    "conv1d",
    "max_pool",
    "peak_normalise",
    "flatten_concat",
    "dense",
    "dropout",
    "softmax",
)
CONV_KINDS = ("time_conv", "ear_conv2d", "conv1d")
ACTIVATIONS = ("linear", "relu", "sigmoid")
PEAK_FLOOR = 1e-12


@dataclass
class LayerNode:
    """One layer: its kind, parameter arrays, trainable flag and settings."""

    kind: str
    params: Dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True
    hyper: Dict[str, Any] = field(default_factory=dict)
    cache: Dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind: {self.kind}")
        if self.kind == "dropout" and not 0.0 <= self.hyper.get("rate", 0.0) < 1.0:
            raise ConfigurationError("dropout rate must lie in [0, 1)")
        activation = self.hyper.get("activation", "linear")
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation: {activation}")

    @property
    def has_params(self) -> bool:
        return bool(self.params)


@dataclass
class ModelGraph:
    nodes: List[LayerNode]
    input_shape: Shape
    num_classes: int = 37
    dtype: Any = np.float32
    seed: int = 0
    info: Dict[str, Any] = field(default_factory=dict)
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.seed)
        self.check_shapes()

    def check_shapes(self) -> List[Shape]:
        """Trace per-item shapes through every node.

        Raises:
            ConfigurationError: on the first inconsistent node, or if the graph
                does not end in a softmax over ``num_classes``.
        """
        shape = _item_shape(self.input_shape)
        trace = [shape]
        for index, node in enumerate(self.nodes):
            try:
                shape = _output_shape(node, shape)
            except ConfigurationError as exc:
                raise ConfigurationError(f"node {index} ({node.kind}): {exc}") from exc
            trace.append(shape)
        if not self.nodes or self.nodes[-1].kind != "softmax":
            raise ConfigurationError("model must end with a softmax layer")
        if shape != (self.num_classes,):
            raise ConfigurationError(
                f"model output {shape} does not match {self.num_classes} classes"
            )
        return trace

    def named_tensors(self) -> Iterator[Tuple[str, LayerNode, str]]:
        """Yield ``(name, node, role)`` for every stored tensor in fixed order."""
        for index, node in enumerate(self.nodes):
            for role in sorted(node.params):
                yield tensor_name(index, node.kind, role), node, role

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {
            name: node.params[role]
            for name, node, role in self.named_tensors()
            if node.trainable
        }

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)


def tensor_name(index: int, kind: str, role: str) -> str:
    """Stable tensor name ``NN.kind.role`` used by optimisers and checkpoints."""
    return f"{index:02d}.{kind}.{role}"


# -- initialisation and node constructors ------------------------------------


def glorot_uniform(
    rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int
) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def conv_node(
    kind: str,
    in_channels: int,
    out_channels: int,
    kernel_time: int,
    rng: np.random.Generator,
    *,
    groups: int = 1,
    activation: str = "linear",
    bias: bool = True,
    trainable: bool = True,
    weight: Optional[Tensor] = None,
    dtype: Any = np.float32,
) -> LayerNode:
    """Build a convolution node with Glorot-uniform weights and zero bias."""
    if kind not in CONV_KINDS:
        raise ConfigurationError(f"{kind} is not a convolution kind")
    if in_channels % groups or out_channels % groups:
        raise ConfigurationError(
            f"channels {in_channels}->{out_channels} not divisible by {groups} groups"
        )
    kernel_ears = 2 if kind == "ear_conv2d" else 1
    per_group_in = in_channels // groups
    shape = (out_channels, per_group_in, kernel_ears, kernel_time)
    if weight is None:
        receptive = kernel_ears * kernel_time
        weight = glorot_uniform(
            rng,
            shape,
            per_group_in * receptive,
            (out_channels // groups) * receptive,
        )
    elif weight.shape != shape:
        raise ConfigurationError(f"weight shape {weight.shape} != {shape}")
    params = {"weight": np.asarray(weight, dtype=dtype)}
    if bias:
        params["bias"] = np.zeros(out_channels, dtype=dtype)
    return LayerNode(
        kind,
        params=params,
        trainable=trainable,
        hyper={
            "in_channels": in_channels,
            "out_channels": out_channels,
            "kernel": (kernel_ears, kernel_time),
            "groups": groups,
            "activation": activation,
        },
    )


def dense_node(
    n_in: int,
    n_out: int,
    rng: np.random.Generator,
    *,
    activation: str = "linear",
    dtype: Any = np.float32,
) -> LayerNode:
    return LayerNode(
        "dense",
        params={
            "weight": glorot_uniform(rng, (n_in, n_out), n_in, n_out).astype(dtype),
            "bias": np.zeros(n_out, dtype=dtype),
        },
        hyper={"in_features": n_in, "out_features": n_out, "activation": activation},
    )


def pool_node(width: int) -> LayerNode:
    return LayerNode("max_pool", trainable=False, hyper={"width": width})


def dropout_node(rate: float) -> LayerNode:
    return LayerNode("dropout", trainable=False, hyper={"rate": rate})


def simple_node(kind: str) -> LayerNode:
    """Parameterless node: ``peak_normalise``, ``flatten_concat`` or ``softmax``."""
    return LayerNode(kind, trainable=False)


# -- shape rules --------------------------------------------------------------


def _item_shape(input_shape: Shape) -> Shape:
    if len(input_shape) == 2:
        return (1,) + tuple(input_shape)
    return tuple(input_shape)


def _output_shape(node: LayerNode, shape: Shape) -> Shape:
    kind = node.kind
    if kind in CONV_KINDS:
        if len(shape) != 3:
            raise ConfigurationError(
                f"convolution needs (C, ears, T) input, got {shape}"
            )
        channels, ears, length = shape
        kernel_ears, _ = node.hyper["kernel"]
        if channels != node.hyper["in_channels"]:
            raise ConfigurationError(
                f"expected {node.hyper['in_channels']} channels, got {channels}"
            )
        if kind == "conv1d" and ears != 1:
            raise ConfigurationError("conv1d expects the ear axis to be collapsed")
        if ears < kernel_ears:
            raise ConfigurationError(f"ear axis {ears} smaller than kernel")
        return (node.hyper["out_channels"], ears - kernel_ears + 1, length)
    if kind == "max_pool":
        if len(shape) != 3:
            raise ConfigurationError("max_pool needs (C, ears, T) input")
        width = node.hyper["width"]
        if shape[2] < width:
            raise ConfigurationError(f"time axis {shape[2]} shorter than pool {width}")
        return shape[:2] + (shape[2] // width,)
    if kind == "flatten_concat":
        return (int(np.prod(shape)),)
    if kind == "dense":
        if shape != (node.hyper["in_features"],):
            raise ConfigurationError(
                f"dense expects {node.hyper['in_features']} features, got {shape}"
            )
        return (node.hyper["out_features"],)
    if kind == "softmax" and len(shape) != 1:
        raise ConfigurationError("softmax expects a flat feature vector")
    return shape


# -- activations --------------------------------------------------------------


def _activate(name: str, z: Tensor) -> Tensor:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        return expit(z)
    return z


def _activation_grad(name: str, dy: Tensor, y: Tensor) -> Tensor:
    if name == "relu":
        return dy * (y > 0)
    if name == "sigmoid":
        return dy * y * (1 - y)
    return dy


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


# -- per-kind forward/backward -----------------------------------------------


def _conv_forward(node: LayerNode, x: Tensor, keep: bool) -> Tensor:
    weight = node.params["weight"]
    out_channels, per_group_in, kernel_ears, kernel_time = weight.shape
    groups = node.hyper["groups"]
    batch, in_channels, ears, length = x.shape
    left = (kernel_time - 1) // 2
    right = kernel_time - 1 - left
    padded = np.pad(x, ((0, 0), (0, 0), (0, 0), (left, right)))
    out_ears = ears - kernel_ears + 1
    windows = sliding_window_view(padded, (kernel_ears, kernel_time), axis=(2, 3))
    cols = (
        windows.reshape(
            batch, groups, per_group_in, out_ears, length, kernel_ears, kernel_time
        )
        .transpose(1, 0, 3, 4, 2, 5, 6)
        .reshape(groups, batch * out_ears * length, -1)
    )
    w = weight.reshape(groups, out_channels // groups, -1)
    z = np.matmul(cols, w.transpose(0, 2, 1))
    z = (
        z.reshape(groups, batch, out_ears, length, -1)
        .transpose(1, 0, 4, 2, 3)
        .reshape(batch, out_channels, out_ears, length)
    )
    if "bias" in node.params:
        z = z + node.params["bias"][None, :, None, None]
    y = _activate(node.hyper["activation"], z)
    if keep:
        node.cache = {"cols": cols, "x_shape": x.shape, "y": y}
    return y


def _conv_backward(
    node: LayerNode, dy: Tensor, need_dx: bool
) -> Tuple[Optional[Tensor], Dict[str, Tensor]]:
    weight = node.params["weight"]
    out_channels, per_group_in, kernel_ears, kernel_time = weight.shape
    groups = node.hyper["groups"]
    cols = node.cache["cols"]
    batch, in_channels, ears, length = node.cache["x_shape"]
    out_ears = ears - kernel_ears + 1
    dz = _activation_grad(node.hyper["activation"], dy, node.cache["y"])
    grads: Dict[str, Tensor] = {}
    if "bias" in node.params:
        grads["bias"] = dz.sum(axis=(0, 2, 3))
    dz_cols = (
        dz.reshape(batch, groups, out_channels // groups, out_ears, length)
        .transpose(1, 0, 3, 4, 2)
        .reshape(groups, batch * out_ears * length, -1)
    )
    grads["weight"] = np.matmul(dz_cols.transpose(0, 2, 1), cols).reshape(weight.shape)
    if not need_dx:
        return None, grads
    w = weight.reshape(groups, out_channels // groups, -1)
    dcols = (
        np.matmul(dz_cols, w)
        .reshape(
            groups, batch, out_ears, length, per_group_in, kernel_ears, kernel_time
        )
        .transpose(1, 0, 4, 2, 3, 5, 6)
        .reshape(batch, in_channels, out_ears, length, kernel_ears, kernel_time)
    )
    dpad = np.zeros(
        (batch, in_channels, ears, length + kernel_time - 1), dtype=dcols.dtype
    )
    for i in range(kernel_ears):
        for j in range(kernel_time):
            dpad[:, :, i : i + out_ears, j : j + length] += dcols[..., i, j]
    left = (kernel_time - 1) // 2
    return dpad[..., left : left + length], grads


def _pool_forward(node: LayerNode, x: Tensor, keep: bool) -> Tensor:
    width = node.hyper["width"]
    out_len = x.shape[-1] // width
    blocks = x[..., : out_len * width].reshape(x.shape[:-1] + (out_len, width))
    idx = np.argmax(blocks, axis=-1)[..., None]
    if keep:
        node.cache = {"idx": idx, "x_shape": x.shape}
    return np.take_along_axis(blocks, idx, axis=-1)[..., 0]


def _pool_backward(node: LayerNode, dy: Tensor) -> Tensor:
    width = node.hyper["width"]
    shape = node.cache["x_shape"]
    out_len = shape[-1] // width
    dblocks = np.zeros(shape[:-1] + (out_len, width), dtype=dy.dtype)
    np.put_along_axis(dblocks, node.cache["idx"], dy[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dy.dtype)
    dx[..., : out_len * width] = dblocks.reshape(shape[:-1] + (out_len * width,))
    return dx


def _peak_forward(node: LayerNode, x: Tensor, keep: bool) -> Tensor:
    flat = x.reshape(x.shape[0], -1)
    arg = np.argmax(np.abs(flat), axis=1)
    peak = np.abs(flat[np.arange(flat.shape[0]), arg])
    scale = np.maximum(peak, PEAK_FLOOR)
    if keep:
        node.cache = {"x": x, "arg": arg, "peak": peak, "scale": scale}
    return x / scale.reshape((-1,) + (1,) * (x.ndim - 1))


def _peak_backward(node: LayerNode, dy: Tensor) -> Tensor:
    x, arg, peak, scale = (node.cache[k] for k in ("x", "arg", "peak", "scale"))
    batch = x.shape[0]
    flat_x = x.reshape(batch, -1)
    flat_dy = dy.reshape(batch, -1)
    dx = flat_dy / scale[:, None]
    # the peak itself moves with x at its argmax unless the floor is active
    live = peak > PEAK_FLOOR
    rows = np.arange(batch)[live]
    coupling = (flat_dy * flat_x).sum(axis=1) / scale**2
    dx[rows, arg[live]] -= coupling[live] * np.sign(flat_x[rows, arg[live]])
    return dx.reshape(x.shape)


def _dense_forward(node: LayerNode, x: Tensor, keep: bool) -> Tensor:
    z = x @ node.params["weight"] + node.params["bias"]
    y = _activate(node.hyper["activation"], z)
    if keep:
        node.cache = {"x": x, "y": y}
    return y


def _dense_backward(
    node: LayerNode, dy: Tensor, need_dx: bool
) -> Tuple[Optional[Tensor], Dict[str, Tensor]]:
    dz = _activation_grad(node.hyper["activation"], dy, node.cache["y"])
    grads = {"weight": node.cache["x"].T @ dz, "bias": dz.sum(axis=0)}
    dx = dz @ node.params["weight"].T if need_dx else None
    return dx, grads


def _dropout_forward(
    node: LayerNode, x: Tensor, keep: bool, training: bool, rng: np.random.Generator
) -> Tensor:
    rate = node.hyper["rate"]
    if not training or rate == 0.0:
        if keep:
            node.cache = {"mask": None}
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    if keep:
        node.cache = {"mask": mask}
    return x * mask


def layer_forward(
    node: LayerNode,
    x: Tensor,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    keep: bool = True,
) -> Tensor:
    """Apply one node; ``keep`` stores what :func:`layer_backward` needs."""
    kind = node.kind
    if kind in CONV_KINDS:
        return _conv_forward(node, x, keep)
    if kind == "max_pool":
        return _pool_forward(node, x, keep)
    if kind == "peak_normalise":
        return _peak_forward(node, x, keep)
    if kind == "flatten_concat":
        if keep:
            node.cache = {"x_shape": x.shape}
        return x.reshape(x.shape[0], -1)
    if kind == "dense":
        return _dense_forward(node, x, keep)
    if kind == "dropout":
        return _dropout_forward(node, x, keep, training, rng or np.random.default_rng())
    y = softmax(x)
    if keep:
        node.cache = {"y": y}
    return y


def layer_backward(
    node: LayerNode, dy: Tensor, *, need_dx: bool = True
) -> Tuple[Optional[Tensor], Dict[str, Tensor]]:
    """Return ``(dL/dx, {role: dL/dparam})`` from the cached forward pass.

    Parameter gradients are returned for every parameterised node; callers
    discard them for frozen nodes.
    """
    kind = node.kind
    if not node.cache:
        raise InputError(f"{kind} layer has no cached forward pass")
    if kind in CONV_KINDS:
        return _conv_backward(node, dy, need_dx)
    if kind == "dense":
        return _dense_backward(node, dy, need_dx)
    if kind == "max_pool":
        return _pool_backward(node, dy), {}
    if kind == "peak_normalise":
        return _peak_backward(node, dy), {}
    if kind == "flatten_concat":
        return dy.reshape(node.cache["x_shape"]), {}
    if kind == "dropout":
        mask = node.cache["mask"]
        return (dy if mask is None else dy * mask), {}
    y = node.cache["y"]
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


# -- whole-model passes -------------------------------------------------------


def _prepare_batch(model: ModelGraph, batch: Tensor) -> Tensor:
    batch = np.asarray(batch)
    expected = tuple(model.input_shape)
    if batch.ndim != len(expected) + 1 or batch.shape[1:] != expected:
        raise ConfigurationError(
            f"batch shape {batch.shape} does not match model input {expected}"
        )
    if not np.all(np.isfinite(batch)):
        raise InputError("batch contains non-finite values")
    batch = batch.astype(model.dtype, copy=False)
    if len(expected) == 2:
        batch = batch[:, None, :, :]
    return batch


def _run(model: ModelGraph, batch: Tensor, mode: str, stop: int) -> Tensor:
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"unknown mode: {mode}")
    training = mode == "train"
    x = _prepare_batch(model, batch)
    for index, node in enumerate(model.nodes[:stop]):
        keep = training and (index > 0 or node.trainable)
        x = layer_forward(node, x, training=training, rng=model.rng, keep=keep)
    return x


def forward(model: ModelGraph, batch: Tensor, mode: str = "infer") -> Tensor:
    """Return the ``(B, num_classes)`` softmax posterior for ``batch``.

    Dropout is active only when ``mode == "train"``; in that mode the
    activations needed by :func:`backward` are cached on the nodes.
    """
    posterior = _run(model, batch, mode, len(model.nodes))
    if not np.all(np.isfinite(posterior)):
        raise InputError("forward pass produced non-finite values")
    return posterior


def cross_entropy(posterior: Tensor, labels: Tensor) -> float:
    picked = posterior[np.arange(len(labels)), labels].astype(np.float64)
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))


def _check_labels(model: ModelGraph, labels: Tensor, batch_size: int) -> Tensor:
    labels = np.asarray(labels)
    if labels.shape != (batch_size,) or not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"expected {batch_size} integer labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise InputError(f"labels must lie in [0, {model.num_classes - 1}]")
    return labels


def backward(
    model: ModelGraph, batch: Tensor, labels: Tensor, mode: str = "train"
) -> Tuple[Dict[str, Tensor], float]:
    """Forward ``batch`` then back-propagate the mean cross-entropy loss.

    Softmax and cross-entropy are fused: the gradient entering the last
    hidden layer is ``(p - onehot) / B``.  Frozen nodes get no gradient entry.

    Returns:
        ``(gradients keyed by tensor name, loss)``.
    """
    labels = _check_labels(model, labels, np.asarray(batch).shape[0])
    if mode == "infer":
        # cache activations without activating dropout
        x = _prepare_batch(model, batch)
        for node in model.nodes:
            x = layer_forward(node, x, training=False, keep=True)
        posterior = x
    else:
        posterior = _run(model, batch, "train", len(model.nodes))
    loss = cross_entropy(posterior, labels)
    if not np.isfinite(loss):
        raise InputError("cross-entropy is not finite")

    onehot = np.zeros_like(posterior)
    onehot[np.arange(len(labels)), labels] = 1
    dy = (posterior - onehot) / len(labels)
    grads: Dict[str, Tensor] = {}
    for index in range(len(model.nodes) - 2, -1, -1):
        node = model.nodes[index]
        need_dx = index > 0
        if not need_dx and not node.trainable:
            break
        dx, node_grads = layer_backward(node, dy, need_dx=need_dx)
        if node.trainable:
            for role, grad in node_grads.items():
                grads[tensor_name(index, node.kind, role)] = grad
        dy = dx
    return grads, loss
