import math

import numpy as np
import pytest

from waveloc.errors import ConfigurationError, InputError
from waveloc.utils import tensor_nn as nn


def _small_model(classes=37, dropout=0.0, frozen_first=False, seed=0):
    rng = np.random.default_rng(seed)
    dtype = np.float64
    nodes = [
        nn.conv_node(
            "time_conv", 1, 4, 5, rng, activation="relu", trainable=not frozen_first,
            dtype=dtype,
        ),
        nn.pool_node(2),
        nn.simple_node("flatten_concat"),
        nn.dropout_node(dropout),
        nn.dense_node(64, classes, rng, dtype=dtype),
        nn.simple_node("softmax"),
    ]
    return nn.ModelGraph(nodes, input_shape=(2, 16), num_classes=classes, dtype=dtype)


def test_softmax_rows_sum_to_one_and_ignore_shifts():
    logits = np.random.default_rng(0).normal(size=(4, 37)) * 20
    p = nn.softmax(logits)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)
    assert np.allclose(nn.softmax(logits + 123.0), p)


def test_zero_head_gives_uniform_posterior_and_log37_loss():
    model = _small_model()
    model.nodes[4].params["weight"][:] = 0.0
    batch = np.random.default_rng(1).normal(size=(3, 2, 16))
    posterior = nn.forward(model, batch)
    assert np.allclose(posterior, 1.0 / 37)
    _, loss = nn.backward(model, batch, np.array([0, 5, 36]))
    assert math.isclose(loss, math.log(37), rel_tol=1e-9)


def test_infer_is_deterministic_and_dropout_only_trains():
    model = _small_model(dropout=0.5)
    batch = np.random.default_rng(2).normal(size=(4, 2, 16))
    first = nn.forward(model, batch, mode="infer")
    assert np.array_equal(first, nn.forward(model, batch, mode="infer"))
    assert not np.allclose(first, nn.forward(model, batch, mode="train"))


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(3)
    node = nn.conv_node("ear_conv2d", 2, 3, 5, rng, dtype=np.float64)
    node.params["bias"] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 2, 7))
    y = nn.layer_forward(node, x)
    w, b = node.params["weight"], node.params["bias"]
    padded = np.pad(x, ((0, 0), (0, 0), (0, 0), (2, 2)))
    expected = np.zeros((2, 3, 1, 7))
    for n in range(2):
        for f in range(3):
            for t in range(7):
                expected[n, f, 0, t] = b[f] + np.sum(w[f] * padded[n, :, :, t : t + 5])
    assert np.allclose(y, expected)


def test_grouped_conv_keeps_groups_apart():
    rng = np.random.default_rng(4)
    node = nn.conv_node("time_conv", 4, 4, 3, rng, groups=2, dtype=np.float64)
    x = rng.normal(size=(1, 4, 2, 6))
    base = nn.layer_forward(node, x)
    x2 = x.copy()
    x2[:, 2:] += 1.0
    changed = nn.layer_forward(node, x2)
    assert np.allclose(base[:, :2], changed[:, :2])
    assert not np.allclose(base[:, 2:], changed[:, 2:])


def test_max_pool_floors_length_and_routes_ties_to_first():
    node = nn.pool_node(2)
    x = np.array([1.0, 1.0, 0.0, 2.0, 9.0]).reshape(1, 1, 1, 5)
    y = nn.layer_forward(node, x)
    assert y.ravel().tolist() == [1.0, 2.0]
    dx, grads = nn.layer_backward(node, np.ones((1, 1, 1, 2)))
    assert grads == {}
    assert dx.ravel().tolist() == [1.0, 0.0, 0.0, 1.0, 0.0]


def test_peak_normalise_bounds_and_scale_invariance():
    node = nn.simple_node("peak_normalise")
    x = np.random.default_rng(5).normal(size=(3, 2, 2, 8)) * 1000
    y = nn.layer_forward(node, x)
    assert np.all(np.abs(y) <= 1.0)
    assert np.allclose(np.abs(y).reshape(3, -1).max(axis=1), 1.0)
    assert np.allclose(nn.layer_forward(node, 3.5 * x), y)


def test_peak_normalise_passes_silence():
    node = nn.simple_node("peak_normalise")
    assert np.all(nn.layer_forward(node, np.zeros((1, 1, 2, 4))) == 0.0)


def test_labels_out_of_range():
    model = _small_model(classes=5)
    batch = np.zeros((2, 2, 16))
    with pytest.raises(InputError):
        nn.backward(model, batch, np.array([0, 5]))
    with pytest.raises(InputError):
        nn.backward(model, batch, np.array([0.0, 1.0]))


def test_shape_mismatch_is_a_configuration_error():
    rng = np.random.default_rng(6)
    nodes = [
        nn.simple_node("flatten_concat"),
        nn.dense_node(30, 5, rng),
        nn.simple_node("softmax"),
    ]
    with pytest.raises(ConfigurationError):
        nn.ModelGraph(nodes, input_shape=(2, 16), num_classes=5)


def test_graph_must_end_in_softmax():
    rng = np.random.default_rng(7)
    nodes = [nn.simple_node("flatten_concat"), nn.dense_node(32, 5, rng)]
    with pytest.raises(ConfigurationError):
        nn.ModelGraph(nodes, input_shape=(2, 16), num_classes=5)


def test_batch_checks():
    model = _small_model(classes=5)
    with pytest.raises(ConfigurationError):
        nn.forward(model, np.zeros((2, 2, 15)))
    bad = np.zeros((1, 2, 16))
    bad[0, 0, 0] = np.inf
    with pytest.raises(InputError):
        nn.forward(model, bad)


def test_frozen_layers_get_no_gradient():
    model = _small_model(classes=5, frozen_first=True)
    batch = np.random.default_rng(8).normal(size=(2, 2, 16))
    grads, _ = nn.backward(model, batch, np.array([1, 2]))
    assert "00.time_conv.weight" not in grads
    assert set(grads) == {"04.dense.bias", "04.dense.weight"}
    assert set(model.trainable_parameters()) == set(grads)


def test_tensor_names_follow_node_order():
    model = _small_model(classes=5)
    names = [name for name, _, _ in model.named_tensors()]
    assert names == [
        "00.time_conv.bias",
        "00.time_conv.weight",
        "04.dense.bias",
        "04.dense.weight",
    ]


def test_unknown_layer_kind():
    with pytest.raises(ConfigurationError):
        nn.LayerNode("lstm")
