"""Fixed-topology differentiable graph and the categorical cross-entropy loss.

A :class:`Graph` is an ordered list of layer nodes. Each node names the nodes
it reads from, so the two convolution branches, the concatenation and the
dense head are wired explicitly. ``forward`` caches what ``backward`` needs;
a graph with live caches is single-writer.
"""
import numpy as np

from . import ops
from .exceptions import InputError, ShapeError, StateError
from .tensor import check_finite, concat_last_axis, reshape, split_last_axis


class Layer:
    """Base node. Subclasses set ``layer_type`` (the label shown in summaries)."""

    layer_type = "Layer"

    def __init__(self, name, inputs=()):
        self.name = name
        self.inputs = list(inputs)
        self.params = {}
        self.grads = {}
        self.output_shape = None

    @property
    def param_count(self):
        return sum(p.size for p in self.params.values())

    def infer_shape(self, input_shapes):
        raise NotImplementedError

    def forward(self, inputs):
        raise NotImplementedError

    def backward(self, upstream):
        """Return one gradient per input and fill ``self.grads``."""
        raise NotImplementedError

    def clear_cache(self):
        for attr in ("_x", "_pre", "_idx", "_cols"):
            if hasattr(self, attr):
                delattr(self, attr)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, output_shape={self.output_shape})"


class InputLayer(Layer):
    layer_type = "InputLayer"

    def __init__(self, name, shape):
        super().__init__(name)
        self.output_shape = tuple(shape)

    def infer_shape(self, input_shapes):
        return self.output_shape

    def forward(self, inputs):
        (x,) = inputs
        if x.shape[1:] != self.output_shape:
            raise ShapeError(f"{self.name}: expected input (B, {', '.join(map(str, self.output_shape))}), got {x.shape}")
        return x

    def backward(self, upstream):
        return [upstream]


class Conv2D(Layer):
    layer_type = "Conv2D"

    def __init__(self, name, spec, inputs, activation="relu", method="im2col"):
        super().__init__(name, inputs)
        self.spec = spec
        self.activation = activation
        self.method = method
        # set by Graph.backward; False when nothing upstream needs d_input
        self.input_grad = True

    def infer_shape(self, input_shapes):
        (shape,) = input_shapes
        h, w, c = shape
        if c != self.spec.in_channels:
            raise ShapeError(f"{self.name}: expects {self.spec.in_channels} channels, got {c}")
        try:
            ho = ops.conv_output_extent(h, self.spec.kernel, self.spec.dilation)
            wo = ops.conv_output_extent(w, self.spec.kernel, self.spec.dilation)
        except ShapeError as exc:
            raise ShapeError(f"{self.name}: {exc}") from None
        return (ho, wo, self.spec.out_channels)

    def forward(self, inputs):
        (x,) = inputs
        self._x = x
        if self.method == "im2col":
            pre, self._cols = ops.conv2d_forward_cols(x, self.params["kernel"], self.params["bias"], self.spec.dilation)
        else:
            pre = ops.conv2d_forward(x, self.params["kernel"], self.params["bias"], self.spec.dilation, self.method)
            self._cols = None
        if self.activation == "relu":
            self._pre = pre
            return ops.relu(pre)
        return pre

    def backward(self, upstream):
        if self.activation == "relu":
            upstream = ops.relu_backward(self._pre, upstream)
        g = ops.conv2d_backward(self._x, self.params["kernel"], upstream, self.spec.dilation,
                                cols=self._cols, input_grad=self.input_grad)
        self.grads = {"kernel": g.d_weights, "bias": g.d_bias}
        return [g.d_input]


class MaxPool2D(Layer):
    layer_type = "MaxPooling2D"

    def infer_shape(self, input_shapes):
        (shape,) = input_shapes
        h, w, c = shape
        try:
            return (ops.pool_output_extent(h), ops.pool_output_extent(w), c)
        except ShapeError as exc:
            raise ShapeError(f"{self.name}: {exc}") from None

    def forward(self, inputs):
        out, self._idx = ops.maxpool_forward(inputs[0])
        return out

    def backward(self, upstream):
        return [ops.maxpool_backward(self._idx, upstream)]


class Flatten(Layer):
    layer_type = "Flatten"

    def infer_shape(self, input_shapes):
        (shape,) = input_shapes
        return (int(np.prod(shape)),)

    def forward(self, inputs):
        (x,) = inputs
        self._in_shape = x.shape
        return reshape(x, (x.shape[0],) + self.output_shape)

    def backward(self, upstream):
        return [reshape(upstream, self._in_shape)]


class Concatenate(Layer):
    layer_type = "Concatenate"

    def infer_shape(self, input_shapes):
        if any(len(s) != 1 for s in input_shapes):
            raise ShapeError(f"{self.name}: can only concatenate flat features, got {input_shapes}")
        self._widths = [s[0] for s in input_shapes]
        return (sum(self._widths),)

    def forward(self, inputs):
        return concat_last_axis(inputs)

    def backward(self, upstream):
        return split_last_axis(upstream, self._widths)


class Dense(Layer):
    """Fully connected layer with an optional ``relu`` or ``softmax`` activation.

    For ``softmax`` the forward pass returns probabilities, but ``backward``
    expects the gradient with respect to the *logits*: the graph fuses softmax
    with cross-entropy (``(probs - onehot) / B``) instead of differentiating
    through the softmax Jacobian.
    """

    layer_type = "Dense"

    def __init__(self, name, spec, inputs, activation=None):
        super().__init__(name, inputs)
        self.spec = spec
        self.activation = activation

    def infer_shape(self, input_shapes):
        (shape,) = input_shapes
        if shape != (self.spec.in_features,):
            raise ShapeError(f"{self.name}: expects {self.spec.in_features} features, got {shape}")
        return (self.spec.out_features,)

    def forward(self, inputs):
        (x,) = inputs
        self._x = x
        pre = ops.dense_forward(x, self.params["kernel"], self.params["bias"])
        self._pre = pre
        if self.activation == "relu":
            return ops.relu(pre)
        if self.activation == "softmax":
            return ops.softmax(pre)
        return pre

    def backward(self, upstream):
        if self.activation == "relu":
            upstream = ops.relu_backward(self._pre, upstream)
        g = ops.dense_backward(self._x, self.params["kernel"], upstream)
        self.grads = {"kernel": g.d_weights, "bias": g.d_bias}
        return [g.d_input]


def _check_onehot(onehot, n_classes=None):
    onehot = np.asarray(onehot)
    if onehot.ndim != 2 or (n_classes is not None and onehot.shape[1] != n_classes):
        raise InputError(f"one-hot labels must be (B, K), got {onehot.shape}")
    binary = np.all((onehot == 0) | (onehot == 1), axis=1)
    single = onehot.sum(axis=1) == 1
    bad = np.flatnonzero(~(binary & single))
    if bad.size:
        raise InputError(f"rows {bad.tolist()} are not valid one-hot vectors")
    return onehot


def cross_entropy(probs, onehot):
    """Mean over the batch of ``-log p[true class]``, with ``p`` clamped to >= 1e-12."""
    onehot = _check_onehot(onehot)
    if probs.shape != onehot.shape:
        raise ShapeError(f"probs {probs.shape} and labels {onehot.shape} differ")
    true_p = (np.asarray(probs, dtype=np.float64) * onehot).sum(axis=1)
    return float(np.mean(-np.log(np.maximum(true_p, 1e-12))))


def cross_entropy_grad_probs(probs, onehot):
    """Gradient of :func:`cross_entropy` with respect to the probabilities (unfused path)."""
    onehot = _check_onehot(onehot)
    b = probs.shape[0]
    return -onehot / (np.maximum(probs, 1e-12) * b)


def softmax_backward(probs, upstream):
    """Vector-Jacobian product of softmax: ``p * (g - <g, p>)`` row-wise."""
    return probs * (upstream - np.sum(upstream * probs, axis=1, keepdims=True))


class Graph:
    """Ordered DAG of layer nodes with a single external input.

    Every :class:`InputLayer` receives the same batch. The last node must be a
    :class:`Dense` layer with softmax activation for ``backward`` to apply.
    """

    def __init__(self, nodes, dtype=np.float32, config=None):
        self.nodes = list(nodes)
        self.dtype = np.dtype(dtype).type
        self.config = config
        self._by_name = {}
        for node in self.nodes:
            if node.name in self._by_name:
                raise ValueError(f"duplicate node name {node.name!r}")
            missing = [i for i in node.inputs if i not in self._by_name]
            if missing:
                raise ValueError(f"{node.name} reads {missing}, which are not defined earlier")
            if not isinstance(node, InputLayer):
                node.output_shape = node.infer_shape([self._by_name[i].output_shape for i in node.inputs])
            self._by_name[node.name] = node
        self._probs = None

    def __getitem__(self, name):
        return self._by_name[name]

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)

    @property
    def input_nodes(self):
        return [n for n in self.nodes if isinstance(n, InputLayer)]

    @property
    def input_shape(self):
        return self.input_nodes[0].output_shape

    def parameters(self):
        """``(node_name, param_name, array)`` in topological order, kernel before bias."""
        return [(n.name, key, n.params[key]) for n in self.nodes for key in ("kernel", "bias") if key in n.params]

    def gradients(self):
        return [(n.name, key, n.grads[key]) for n in self.nodes for key in ("kernel", "bias") if key in n.params]

    def parameter_count(self):
        return sum(p.size for _, _, p in self.parameters())

    def forward(self, batch):
        """Run the network on ``batch`` of shape ``(B, H, W, C)`` and return class probabilities."""
        batch = np.asarray(batch)
        if batch.ndim != 4:
            raise ShapeError(f"batch must be (B, H, W, C), got {batch.shape}")
        batch = batch.astype(self.dtype, copy=False)
        values = {}
        for node in self.nodes:
            if isinstance(node, InputLayer):
                values[node.name] = node.forward([batch])
            else:
                values[node.name] = node.forward([values[i] for i in node.inputs])
        out = values[self.nodes[-1].name]
        self._probs = check_finite(out, "network output")
        self._batch_shape = batch.shape
        return out

    def backward(self, onehot, input_grad=False):
        """Backpropagate mean cross-entropy into every node's ``grads``.

        With ``input_grad=True`` the gradient with respect to the input batch is
        also computed and returned; otherwise returns ``None``.
        """
        if self._probs is None:
            raise StateError("backward called before forward")
        onehot = _check_onehot(onehot, self._probs.shape[1])
        if onehot.shape[0] != self._probs.shape[0]:
            raise ShapeError(f"labels for {onehot.shape[0]} samples, forward saw {self._probs.shape[0]}")
        head = self.nodes[-1]
        if not (isinstance(head, Dense) and head.activation == "softmax"):
            raise StateError("backward needs a softmax Dense output node")
        upstream = {head.name: ((self._probs - onehot) / onehot.shape[0]).astype(self.dtype)}
        inputs = {n.name for n in self.input_nodes}
        d_input = np.zeros(self._batch_shape, dtype=self.dtype) if input_grad else None
        for node in reversed(self.nodes):
            grad = upstream.pop(node.name, None)
            if grad is None:
                grad = np.zeros((self._batch_shape[0],) + node.output_shape, dtype=self.dtype)
            if isinstance(node, InputLayer):
                if input_grad:
                    d_input += grad
                continue
            if isinstance(node, Conv2D):
                node.input_grad = input_grad or not set(node.inputs) <= inputs
            for src, g in zip(node.inputs, node.backward(grad)):
                if g is None:
                    continue
                upstream[src] = upstream[src] + g if src in upstream else g
        return d_input

    def clear_cache(self):
        self._probs = None
        for node in self.nodes:
            node.clear_cache()

    def activation_pattern(self):
        """Snapshot of every ReLU mask and pooling argmax from the last forward pass.

        Two forward passes with equal patterns lie on the same linear piece of
        the network, which is what finite-difference checks need.
        """
        pattern = []
        for node in self.nodes:
            if getattr(node, "activation", None) == "relu" and hasattr(node, "_pre"):
                pattern.append(node._pre > 0)
            if isinstance(node, MaxPool2D) and hasattr(node, "_idx"):
                pattern.append(node._idx.argmax)
        return pattern

    def astype(self, dtype):
        """Return a copy of this graph whose parameters are stored as ``dtype``."""
        import copy

        clone = copy.deepcopy(self)
        clone.clear_cache()
        clone.dtype = np.dtype(dtype).type
        for node in clone.nodes:
            node.params = {k: v.astype(clone.dtype) for k, v in node.params.items()}
            node.grads = {}
        return clone
