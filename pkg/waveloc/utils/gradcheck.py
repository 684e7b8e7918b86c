"""Finite-difference verification of the layer engine's analytic gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from waveloc.errors import GradientError
from waveloc.utils import tensor_nn as nn

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
STEP = 1e-5
RETRY_STEPS = (1e-4, 1e-6)
ERROR_FLOOR = 1e-3
MAX_CHECKS_PER_TENSOR = 40

ModelFactory = Callable[[np.random.Generator], nn.ModelGraph]


@dataclass
class LayerCheck:
    index: int
    kind: str
    status: str
    max_error: float = 0.0
    checked: int = 0


@dataclass
class GradcheckReport:
    tolerance: float
    layers: List[LayerCheck] = field(default_factory=list)
    model_error: float = 0.0

    @property
    def passed(self) -> bool:
        return self.model_error < self.tolerance and all(
            check.status != "fail" for check in self.layers
        )

    def per_kind(self) -> Dict[str, float]:
        """Largest relative error seen for each checked layer kind."""
        result: Dict[str, float] = {}
        for check in self.layers:
            if check.status == "skipped":
                continue
            result[check.kind] = max(result.get(check.kind, 0.0), check.max_error)
        return result

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "layer": f"{c.index:02d}.{c.kind}",
                "max_rel_error": c.max_error,
                "checked": c.checked,
                "status": c.status.upper(),
            }
            for c in self.layers
        ]
        rows.append(
            {
                "layer": "model.cross_entropy",
                "max_rel_error": self.model_error,
                "checked": 0,
                "status": "PASS" if self.model_error < self.tolerance else "FAIL",
            }
        )
        return pd.DataFrame(rows)

    def render(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            self.to_frame().to_string(index=False, float_format=lambda v: f"{v:.3e}")
            + f"\n{verdict} (tolerance {self.tolerance:g})"
        )


def relative_error(analytic: float, numeric: float) -> float:
    """``|a - n| / max(|a|, |n|, ERROR_FLOOR)``.

    Elements smaller than ``ERROR_FLOOR`` are judged on absolute error, so a
    zero analytic gradient passes against finite-difference round-off.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def tie_free_input(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Random array whose magnitudes are pairwise separated by ``1/size``.

    Max pooling and peak normalisation pick a unique winner that a finite
    difference step cannot swap.
    """
    size = int(np.prod(shape))
    magnitudes = (rng.permutation(size) + 1.0) / size
    signs = rng.choice([-1.0, 1.0], size=size)
    return (signs * magnitudes).reshape(shape)


def _sample_indices(
    rng: np.random.Generator, shape: Tuple[int, ...]
) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape))
    flat = np.arange(size)
    if size > MAX_CHECKS_PER_TENSOR:
        flat = rng.choice(size, MAX_CHECKS_PER_TENSOR, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _numeric(fn: Callable[[], float], array: np.ndarray, idx, step: float) -> float:
    original = array[idx]
    array[idx] = original + step
    plus = fn()
    array[idx] = original - step
    minus = fn()
    array[idx] = original
    return (plus - minus) / (2 * step)


def _compare(
    fn: Callable[[], float],
    array: np.ndarray,
    analytic: np.ndarray,
    rng: np.random.Generator,
    tolerance: float,
) -> Tuple[float, int]:
    worst = 0.0
    indices = _sample_indices(rng, array.shape)
    for idx in indices:
        error = relative_error(analytic[idx], _numeric(fn, array, idx, STEP))
        if error >= tolerance:
            # a kink (ReLU at zero) inside the step; retry with other steps
            for step in RETRY_STEPS:
                error = min(
                    error, relative_error(analytic[idx], _numeric(fn, array, idx, step))
                )
        worst = max(worst, error)
    return worst, len(indices)


def _check_finite(grads: Dict[str, np.ndarray], where: str) -> None:
    for role, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise GradientError(f"non-finite gradient for {role} in {where}")


def check_layer(
    node: nn.LayerNode,
    index: int,
    in_shape: Tuple[int, ...],
    rng: np.random.Generator,
    tolerance: float = DEFAULT_TOLERANCE,
    batch: int = 2,
) -> LayerCheck:
    """Check one node against ``sum(r * layer(x))`` for a random projection r."""
    if node.has_params and not node.trainable:
        logger.debug("layer %02d.%s is frozen, skipped", index, node.kind)
        return LayerCheck(index, node.kind, "skipped")
    if node.kind == "softmax":
        # the fused cross-entropy path is covered by the whole-model check
        x = rng.standard_normal((batch,) + in_shape)
    else:
        x = tie_free_input(rng, (batch,) + in_shape)
    mask_seed = int(rng.integers(2**31))

    def run() -> np.ndarray:
        return nn.layer_forward(
            node,
            x,
            training=True,
            rng=np.random.default_rng(mask_seed),
            keep=True,
        )

    projection = rng.standard_normal(run().shape)

    def loss() -> float:
        return float(np.sum(projection * run()))

    run()
    dx, grads = nn.layer_backward(node, projection, need_dx=True)
    where = f"layer {index:02d}.{node.kind}"
    _check_finite(dict(grads, input=dx), where)

    worst, checked = _compare(loss, x, dx, rng, tolerance)
    for role, grad in grads.items():
        error, count = _compare(loss, node.params[role], grad, rng, tolerance)
        worst, checked = max(worst, error), checked + count
    status = "pass" if worst < tolerance else "fail"
    logger.debug("%s max relative error %.3e (%s)", where, worst, status)
    return LayerCheck(index, node.kind, status, worst, checked)


def check_model(
    model: nn.ModelGraph,
    rng: np.random.Generator,
    tolerance: float = DEFAULT_TOLERANCE,
    batch: int = 3,
) -> float:
    """Largest relative error of :func:`tensor_nn.backward` on the full loss."""
    x = tie_free_input(rng, (batch,) + tuple(model.input_shape))
    labels = rng.integers(0, model.num_classes, size=batch)
    seed = int(rng.integers(2**31))

    model.reseed(seed)
    grads, _ = nn.backward(model, x, labels, mode="train")
    _check_finite(grads, "model")

    def loss() -> float:
        model.reseed(seed)
        return nn.cross_entropy(nn.forward(model, x, mode="train"), labels)

    params = model.trainable_parameters()
    worst = 0.0
    for name, grad in grads.items():
        error, _ = _compare(loss, params[name], grad, rng, tolerance)
        worst = max(worst, error)
    return worst


def gradcheck(
    model_factory: Optional[ModelFactory] = None,
    trials: int = 2,
    tolerance: float = DEFAULT_TOLERANCE,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients layer by layer.

    Each trial builds a fresh model from ``model_factory`` (double precision)
    and checks every node plus the whole-model cross-entropy.

    Raises:
        GradientError: if any analytic gradient is not finite.
    """
    factory = model_factory or tiny_model
    rng = np.random.default_rng(seed)
    merged: Dict[int, LayerCheck] = {}
    model_error = 0.0
    for trial in range(trials):
        model = factory(rng)
        trace = model.check_shapes()
        for index, node in enumerate(model.nodes):
            check = check_layer(node, index, trace[index], rng, tolerance)
            previous = merged.get(index)
            if previous is not None and check.status != "skipped":
                check.max_error = max(check.max_error, previous.max_error)
                check.checked += previous.checked
                if previous.status == "fail":
                    check.status = "fail"
            merged[index] = check
        model_error = max(model_error, check_model(model, rng, tolerance))
        logger.info("gradcheck trial %d/%d done", trial + 1, trials)
    return GradcheckReport(
        tolerance, [merged[i] for i in sorted(merged)], model_error
    )


def tiny_model(rng: np.random.Generator) -> nn.ModelGraph:
    """Double-precision model using every layer kind on a 2x16 input."""
    dtype = np.float64
    nodes = [
        nn.conv_node(
            "time_conv", 1, 2, 5, rng, bias=False, trainable=False, dtype=dtype
        ),
        nn.simple_node("peak_normalise"),
        nn.pool_node(2),
        nn.conv_node("time_conv", 2, 4, 4, rng, groups=2, dtype=dtype),
        nn.conv_node(
            "ear_conv2d", 4, 4, 3, rng, groups=2, activation="relu", dtype=dtype
        ),
        nn.pool_node(2),
        nn.conv_node("conv1d", 4, 3, 3, rng, activation="relu", dtype=dtype),
        nn.simple_node("flatten_concat"),
        nn.dense_node(12, 5, rng, activation="sigmoid", dtype=dtype),
        nn.dropout_node(0.5),
        nn.dense_node(5, 6, rng, activation="relu", dtype=dtype),
        nn.dense_node(6, 5, rng, dtype=dtype),
        nn.simple_node("softmax"),
    ]
    for node in nodes:
        # non-zero biases so the bias paths are exercised
        if node.trainable and "bias" in node.params:
            node.params["bias"] = rng.normal(0, 0.1, node.params["bias"].shape)
    return nn.ModelGraph(
        nodes,
        input_shape=(2, 16),
        num_classes=5,
        dtype=dtype,
        seed=int(rng.integers(2**31)),
    )
