import csv
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weednet import ops
from weednet.exceptions import ConfigError, InputError, ShapeError, StateError
from weednet.graph import (Concatenate, Dense, Flatten, Graph, InputLayer, cross_entropy, cross_entropy_grad_probs,
                           softmax_backward)
from weednet.model import ArchitectureConfig, build
from weednet.optim import Adam, AdamHyper, AdamState, adam_step

PUBLISHED = Path(__file__).parent / "data" / "published_layers.tsv"


def published_rows():
    with open(PUBLISHED, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


def shape_from_text(text):
    inner = text.strip("[]").strip("()")
    return tuple(int(v) for v in inner.split(", ")[1:])


def node_outputs(graph, batch):
    values = {}
    for node in graph.nodes:
        args = [batch] if isinstance(node, InputLayer) else [values[i] for i in node.inputs]
        values[node.name] = node.forward(args)
    return values


@pytest.fixture(scope="module")
def paper_graph():
    return build(init_seed=0)


def test_paper_forward_intermediate_shapes(paper_graph):
    batch = np.random.default_rng(0).random((1, 227, 227, 3), dtype=np.float32)
    values = node_outputs(paper_graph, batch)
    for row in published_rows():
        got = values[row["name"]].shape[1:]
        expected = shape_from_text(row["output_shape"])
        if row["name"] == "flatten_2":
            assert got == (960,) and expected == (600,)
        else:
            assert got == expected, row["name"]


def test_forward_rows_are_probabilities(paper_graph):
    batch = np.random.default_rng(1).random((2, 227, 227, 3))
    probs = paper_graph.forward(batch)
    assert probs.shape == (2, 4)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-6)
    assert np.all((probs >= 0) & (probs <= 1))


def test_forward_shape_mismatch(paper_graph):
    with pytest.raises(ShapeError):
        paper_graph.forward(np.zeros((1, 128, 128, 3)))
    with pytest.raises(ShapeError):
        paper_graph.forward(np.zeros((227, 227, 3)))


def test_zero_init_gives_uniform_output():
    g = build(ArchitectureConfig.from_profile("tiny"), init="zeros")
    probs = g.forward(np.random.default_rng(0).random((3, 128, 128, 3)))
    np.testing.assert_array_equal(probs, np.full((3, 4), 0.25, dtype=np.float32))


def test_both_branches_see_the_same_input():
    g = build(ArchitectureConfig.from_profile("tiny"))
    batch = np.random.default_rng(0).random((1, 128, 128, 3), dtype=np.float32)
    values = node_outputs(g, batch)
    a, b = g.input_nodes
    assert values[a.name] is values[b.name] is batch


def test_cross_entropy_cases():
    onehot = np.eye(4)[[0, 2]]
    assert cross_entropy(onehot.copy(), onehot) == 0.0
    assert cross_entropy(np.full((2, 4), 0.25), onehot) == pytest.approx(math.log(4), abs=1e-12)
    probs = np.array([[0.5, 0.5, 0, 0], [0.25, 0.25, 0.25, 0.25]])
    expected = (-math.log(0.5) - math.log(0.25)) / 2
    assert cross_entropy(probs, onehot) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.039721, abs=1e-6)


def test_cross_entropy_clamps_zero_probability():
    loss = cross_entropy(np.array([[0.0, 1.0, 0, 0]]), np.eye(4)[[0]])
    assert loss == pytest.approx(-math.log(1e-12))


@pytest.mark.parametrize("bad", [[[1, 1, 0, 0]], [[0, 0, 0, 0]], [[0.5, 0.5, 0, 0]], [1, 0, 0, 0]])
def test_cross_entropy_rejects_invalid_onehot(bad):
    with pytest.raises(InputError):
        cross_entropy(np.full((1, 4), 0.25), np.array(bad, dtype=float))


def test_backward_before_forward():
    g = build(ArchitectureConfig.from_profile("tiny"))
    with pytest.raises(StateError):
        g.backward(np.eye(4)[[0]])


def _head_graph(weights, bias):
    """(1, 1, F) input -> flatten -> softmax Dense with fixed parameters."""
    fin, fout = weights.shape
    head = Dense("out", ops.DenseSpec(fin, fout), ["flat"], activation="softmax")
    g = Graph([InputLayer("x", (1, 1, fin)), Flatten("flat", ["x"]), head], dtype=np.float64)
    head.params = {"kernel": weights, "bias": bias}
    return g, head


def test_logit_gradient_uniform_case():
    # zero weights give uniform probabilities, and the bias gradient is the logit gradient
    g, head = _head_graph(np.zeros((3, 4)), np.zeros(4))
    probs = g.forward(np.ones((1, 1, 1, 3)))
    np.testing.assert_array_equal(probs, [[0.25] * 4])
    g.backward(np.eye(4)[[0]])
    np.testing.assert_allclose(head.grads["bias"], [-0.75, 0.25, 0.25, 0.25], rtol=0, atol=1e-15)


def test_perfect_prediction_gives_zero_head_gradient():
    # large logits saturate the softmax so probs equal the one-hot rows exactly
    w = np.zeros((2, 4))
    w[0, 1] = w[1, 3] = 1000.0
    g, head = _head_graph(w, np.zeros(4))
    onehot = np.eye(4)[[1, 3]]
    probs = g.forward(np.eye(2).reshape(2, 1, 1, 2))
    np.testing.assert_array_equal(probs, onehot)
    d_input = g.backward(onehot, input_grad=True)
    assert not head.grads["kernel"].any() and not head.grads["bias"].any()
    assert not d_input.any()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), batch=st.integers(1, 8))
def test_fused_gradient_equals_unfused_chain(seed, batch):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((batch, 4)) * 3
    onehot = np.eye(4)[r.integers(0, 4, batch)]
    probs = ops.softmax(logits)
    unfused = softmax_backward(probs, cross_entropy_grad_probs(probs, onehot))
    # below the 1e-12 clamp the loss is flat and the two gradients legitimately differ
    live = (probs * onehot).sum(axis=1) > 1e-10
    assert np.max(np.abs(unfused - (probs - onehot) / batch)[live], initial=0.0) <= 1e-8


def test_softmax_cross_entropy_finite_differences(rng):
    from weednet.gradcheck import check_softmax_cross_entropy

    assert check_softmax_cross_entropy(rng).max_rel_error <= 1e-5


def test_backward_populates_every_parameter():
    g = build(ArchitectureConfig.from_profile("tiny"), dtype=np.float64)
    g.forward(np.random.default_rng(0).random((2, 128, 128, 3)))
    assert g.backward(np.eye(4)[[0, 3]]) is None
    for (n, k, p), (_, _, gr) in zip(g.parameters(), g.gradients()):
        assert gr.shape == p.shape and gr.dtype == p.dtype


def test_backward_label_count_mismatch():
    g = build(ArchitectureConfig.from_profile("tiny"))
    g.forward(np.zeros((2, 128, 128, 3)))
    with pytest.raises(ShapeError):
        g.backward(np.eye(4)[[0]])


def test_adam_zero_gradient_is_identity():
    p = [np.array([1.0, -2.0]), np.ones((2, 2))]
    before = [a.copy() for a in p]
    state = AdamState.zeros_like(p)
    for _ in range(3):
        adam_step(p, [np.zeros(2), np.zeros((2, 2))], state, AdamHyper())
    for a, b in zip(p, before):
        np.testing.assert_array_equal(a, b)
    assert state.t == 3


def test_adam_first_step():
    p = [np.array([0.5])]
    adam_step(p, [np.array([1.0])], AdamState.zeros_like(p), AdamHyper())
    step = p[0][0] - 0.5
    assert step == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-9)
    assert step == pytest.approx(-9.9999e-5, abs=1e-9)


def hand_rolled_adam_trace(p, steps, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = 2 * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(p)
    return trace


def test_adam_quadratic_matches_hand_rolled_trace():
    p = [np.array([1.0])]
    state = AdamState.zeros_like(p)
    got = []
    for _ in range(10):
        adam_step(p, [2 * p[0]], state, AdamHyper())
        got.append(float(p[0][0]))
    np.testing.assert_allclose(got, hand_rolled_adam_trace(1.0, 10), rtol=0, atol=1e-10)


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(ShapeError):
        adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), AdamHyper())
    with pytest.raises(ShapeError):
        adam_step(p, [], AdamState.zeros_like(p), AdamHyper())


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"beta1": 1.0}, {"beta2": -0.1}, {"epsilon": 0}])
def test_adam_hyper_validation(kwargs):
    with pytest.raises(ConfigError):
        AdamHyper(**kwargs)


def test_adam_wrapper_steps_graph():
    g = build(ArchitectureConfig.from_profile("tiny"), dtype=np.float64)
    opt = Adam(g)
    before = [p.copy() for _, _, p in g.parameters()]
    g.forward(np.random.default_rng(0).random((2, 128, 128, 3)))
    g.backward(np.eye(4)[[1, 2]])
    opt.step()
    assert opt.state.t == 1
    changed = [not np.array_equal(a, p) for a, (_, _, p) in zip(before, g.parameters())]
    assert any(changed)


def test_parameter_counts(paper_graph):
    assert paper_graph.parameter_count() == 441324
    conv_only = Graph([n for n in paper_graph.nodes if not isinstance(n, (Flatten, Concatenate, Dense))])
    assert conv_only.parameter_count() == 441324 - 315008 - 516 == 125800
    assert Graph([]).parameter_count() == 0


def test_graph_has_28_nodes_and_fixed_order(paper_graph):
    assert len(paper_graph) == 28
    assert [n.name for n in paper_graph] == [r["name"] for r in published_rows()]
    kinds = [n.layer_type for n in paper_graph]
    assert kinds.count("InputLayer") == 2 and kinds.count("Conv2D") == 10
    assert kinds.count("MaxPooling2D") == 10 and kinds.count("Flatten") == 3
    assert kinds.count("Concatenate") == 1 and kinds.count("Dense") == 2


def test_build_deterministic():
    cfg = ArchitectureConfig.from_profile("tiny")
    a, b, c = build(cfg, init_seed=7), build(cfg, init_seed=7), build(cfg, init_seed=8)
    for (_, _, x), (_, _, y) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x, y)
    assert not np.array_equal(a.parameters()[0][2], c.parameters()[0][2])


def test_biases_start_at_zero_and_kernels_bounded():
    g = build(ArchitectureConfig.from_profile("tiny"), init_seed=3)
    for name, key, p in g.parameters():
        if key == "bias":
            assert not p.any()
        else:
            fan_in = int(np.prod(p.shape[:-1]))
            fan_out = p.shape[-1] * (int(np.prod(p.shape[:2])) if p.ndim == 4 else 1)
            assert np.abs(p).max() <= math.sqrt(6 / (fan_in + fan_out)) + 1e-7


def test_graph_rejects_bad_wiring():
    with pytest.raises(ValueError):
        Graph([InputLayer("x", (3,)), Flatten("f", ["missing"])])
    with pytest.raises(ValueError):
        Graph([InputLayer("x", (3,)), InputLayer("x", (3,))])


def test_astype_copies_parameters():
    g = build(ArchitectureConfig.from_profile("tiny"))
    d = g.astype(np.float64)
    assert all(p.dtype == np.float64 for _, _, p in d.parameters())
    assert all(p.dtype == np.float32 for _, _, p in g.parameters())
