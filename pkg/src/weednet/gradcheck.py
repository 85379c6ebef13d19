"""Central finite-difference checks of every analytic gradient.

All checks run in float64. A layer is checked through the scalar objective
``sum(layer(x) * R)`` for a fixed random ``R``, so the analytic side is the
layer's backward pass fed ``R`` as upstream gradient. Whole-network checks
use the mean cross-entropy loss and skip any probe whose +/- perturbation
changes a ReLU mask or a pooling winner (a kink of the loss surface).
"""
from typing import NamedTuple

import numpy as np

from . import ops
from .graph import cross_entropy
from .model import ArchitectureConfig, build

REL_STEP = 1e-6
ABS_STEP = 1e-6
# denominator floor for relative error; below this both gradients are treated as zero-scale
ERROR_FLOOR = 1e-8


class CheckResult(NamedTuple):
    name: str
    max_rel_error: float
    probes: int
    skipped: int = 0


def step_size(value):
    return max(REL_STEP * abs(value), ABS_STEP)


def rel_error(analytic, numeric, floor=ERROR_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f, x, indices=None):
    """Central-difference gradient of scalar ``f()`` with respect to array ``x`` (perturbed in place).

    ``indices`` restricts the probe to those flat positions; other entries are NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        h = step_size(orig)
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2 * h)
    return grad.reshape(x.shape)


def _away_from_zero(rng, shape, margin=1e-4):
    x = rng.standard_normal(shape)
    close = np.abs(x) < 10 * margin
    x[close] = np.sign(x[close] + 1e-300) * (10 * margin + np.abs(x[close]))
    return x


def _distinct_values(rng, shape, spacing=1e-2):
    """Values with pairwise gaps of at least ``spacing``, so pooling windows have no near ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def check_conv(rng, batch=2, extent=None, cin=None, cout=None, kernel=None, dilation=None):
    kernel = kernel or int(rng.integers(1, 4))
    dilation = dilation or int(rng.integers(1, 4))
    keff = (kernel - 1) * dilation + 1
    extent = extent or int(rng.integers(keff, max(keff, 12) + 1))
    cin = cin or int(rng.integers(1, 5))
    cout = cout or int(rng.integers(1, 5))
    x = rng.standard_normal((batch, extent, extent, cin))
    w = rng.standard_normal((kernel, kernel, cin, cout))
    b = rng.standard_normal(cout)
    out_shape = ops.conv2d_forward(x, w, b, dilation).shape
    r = rng.standard_normal(out_shape)

    def objective():
        return float(np.sum(ops.conv2d_forward(x, w, b, dilation) * r))

    g = ops.conv2d_backward(x, w, r, dilation)
    err = max(
        rel_error(g.d_input, numerical_gradient(objective, x)).max(),
        rel_error(g.d_weights, numerical_gradient(objective, w)).max(),
        rel_error(g.d_bias, numerical_gradient(objective, b)).max(),
    )
    return CheckResult(f"conv k={kernel} d={dilation} {extent}x{extent}x{cin}->{cout}", float(err), x.size + w.size + b.size)


def check_dense(rng, batch=3, fin=None, fout=None):
    fin = fin or int(rng.integers(1, 9))
    fout = fout or int(rng.integers(1, 9))
    x = rng.standard_normal((batch, fin))
    w = rng.standard_normal((fin, fout))
    b = rng.standard_normal(fout)
    r = rng.standard_normal((batch, fout))

    def objective():
        return float(np.sum(ops.dense_forward(x, w, b) * r))

    g = ops.dense_backward(x, w, r)
    err = max(
        rel_error(g.d_input, numerical_gradient(objective, x)).max(),
        rel_error(g.d_weights, numerical_gradient(objective, w)).max(),
        rel_error(g.d_bias, numerical_gradient(objective, b)).max(),
    )
    return CheckResult(f"dense {fin}->{fout}", float(err), x.size + w.size + b.size)


def check_relu(rng, shape=(2, 5, 5, 3)):
    x = _away_from_zero(rng, shape)
    r = rng.standard_normal(shape)

    def objective():
        return float(np.sum(ops.relu(x) * r))

    err = rel_error(ops.relu_backward(x, r), numerical_gradient(objective, x)).max()
    return CheckResult(f"relu {shape}", float(err), x.size)


def check_maxpool(rng, batch=2, extent=None, channels=None):
    extent = extent or int(rng.integers(2, 13))
    channels = channels or int(rng.integers(1, 5))
    x = _distinct_values(rng, (batch, extent, extent, channels))
    out, idx = ops.maxpool_forward(x)
    r = rng.standard_normal(out.shape)

    def objective():
        return float(np.sum(ops.maxpool_forward(x)[0] * r))

    err = rel_error(ops.maxpool_backward(idx, r), numerical_gradient(objective, x)).max()
    return CheckResult(f"maxpool {extent}x{extent}x{channels}", float(err), x.size)


def check_softmax_cross_entropy(rng, batch=3, classes=4):
    logits = rng.standard_normal((batch, classes)) * 2
    onehot = np.eye(classes)[rng.integers(0, classes, batch)]

    def objective():
        return cross_entropy(ops.softmax(logits), onehot)

    fused = (ops.softmax(logits) - onehot) / batch
    err = rel_error(fused, numerical_gradient(objective, logits)).max()
    return CheckResult(f"softmax+cross-entropy B={batch}", float(err), logits.size)


def layer_suite(seed=0, repeats=3):
    """Randomised finite-difference checks of every layer kind."""
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(repeats):
        results += [check_conv(rng), check_dense(rng), check_relu(rng), check_maxpool(rng),
                    check_softmax_cross_entropy(rng)]
    for d in (1, 2, 3):
        results.append(check_conv(rng, kernel=3, dilation=d))
    return results


def check_graph(graph, batch, onehot, rng, probes_per_tensor=4, input_probes=8):
    """Compare backprop with central differences on sampled coordinates of every parameter.

    ``graph`` should be float64. Returns one :class:`CheckResult` per tensor.
    """
    graph.forward(batch)
    d_input = graph.backward(onehot, input_grad=True)
    analytic = {(n, k): g.copy() for n, k, g in graph.gradients()}
    base_pattern = graph.activation_pattern()

    def loss():
        return cross_entropy(graph.forward(batch), onehot)

    def same_pattern():
        return all(np.array_equal(a, b) for a, b in zip(base_pattern, graph.activation_pattern()))

    def probe(array, flat_index):
        flat = array.reshape(-1)
        orig = flat[flat_index]
        h = step_size(orig)
        flat[flat_index] = orig + h
        f_plus = loss()
        ok = same_pattern()
        flat[flat_index] = orig - h
        f_minus = loss()
        ok = ok and same_pattern()
        flat[flat_index] = orig
        return (f_plus - f_minus) / (2 * h), ok

    results = []
    targets = [(f"{n}.{k}", p, analytic[(n, k)]) for n, k, p in graph.parameters()]
    targets.append(("input", batch, d_input))
    for name, array, grad in targets:
        count = input_probes if name == "input" else probes_per_tensor
        # half the probes on the largest-magnitude gradients, half uniform
        order = np.argsort(-np.abs(grad).ravel(), kind="stable")
        chosen = list(dict.fromkeys(list(order[: count // 2]) + list(rng.integers(0, array.size, count - count // 2))))
        errs, skipped = [], 0
        for idx in chosen:
            numeric, ok = probe(array, int(idx))
            if not ok:
                skipped += 1
                continue
            errs.append(rel_error(grad.reshape(-1)[idx], numeric))
        results.append(CheckResult(name, float(max(errs)) if errs else 0.0, len(errs), skipped))
    graph.clear_cache()
    return results


def graph_suite(profile="tiny", seed=0, batch_size=2, probes_per_tensor=4):
    """End-to-end check on a freshly built float64 network with random inputs."""
    config = ArchitectureConfig.from_profile(profile)
    graph = build(config, init_seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    extent = config.input_extent
    batch = rng.random((batch_size, extent, extent, config.in_channels))
    onehot = np.eye(config.head[1])[rng.integers(0, config.head[1], batch_size)]
    return check_graph(graph, batch, onehot, rng, probes_per_tensor)
