"""Two-branch weed/crop classifier: configuration, construction and summary table."""
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigError, ShapeError
from .graph import Concatenate, Conv2D, Dense, Flatten, Graph, InputLayer, MaxPool2D
from .ops import ConvSpec, DenseSpec, conv_output_extent, pool_output_extent

CLASS_NAMES = ("broadleaf", "grass", "soil", "soybean")

PROFILES = {"paper": 227, "tiny": 128}


@dataclass(frozen=True)
class ArchitectureConfig:
    input_extent: int = 227
    in_channels: int = 3
    filters: tuple = (20, 30, 40, 50, 60)
    kernels_a: tuple = (5, 3, 3, 3, 3)
    dilations_a: tuple = (1, 1, 1, 1, 1)
    kernels_b: tuple = (5, 3, 3, 3, 3)
    dilations_b: tuple = (3, 2, 2, 1, 1)
    head: tuple = (128, 4)
    profile: str = "paper"

    def __post_init__(self):
        for name in ("filters", "kernels_a", "dilations_a", "kernels_b", "dilations_b", "head"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        n = len(self.filters)
        if not (len(self.kernels_a) == len(self.dilations_a) == len(self.kernels_b) == len(self.dilations_b) == n):
            raise ConfigError("filters, kernels and dilations must all have the same length")
        if len(self.head) != 2:
            raise ConfigError(f"head must list exactly two widths (hidden, classes), got {self.head}")
        if min(self.filters + self.kernels_a + self.kernels_b + self.dilations_a + self.dilations_b + self.head) < 1:
            raise ConfigError("all filter counts, kernels, dilations and head widths must be >= 1")
        branch_output_extents(self)

    @classmethod
    def from_profile(cls, profile="paper", **overrides):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return cls(input_extent=PROFILES[profile], profile=profile, **overrides)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def branch_output_extents(config):
    """Spatial extent after every conv and pool of both branches.

    Raises :class:`ConfigError` naming the first layer whose input is too small.
    """
    names = _layer_names(len(config.filters))
    result = {}
    for branch, kernels, dilations in (("a", config.kernels_a, config.dilations_a),
                                      ("b", config.kernels_b, config.dilations_b)):
        extent = config.input_extent
        for i, (k, d) in enumerate(zip(kernels, dilations)):
            conv_name, pool_name = names[branch][i]
            try:
                extent = conv_output_extent(extent, k, d)
                result[conv_name] = extent
            except ShapeError as exc:
                raise ConfigError(f"input extent {config.input_extent} underflows at {conv_name}: {exc}") from None
            try:
                extent = pool_output_extent(extent)
                result[pool_name] = extent
            except ShapeError as exc:
                raise ConfigError(f"input extent {config.input_extent} underflows at {pool_name}: {exc}") from None
    return result


def minimal_input_extent(kernels, dilations):
    """Smallest square input admitting every conv/pool pair of one branch."""
    extent = 1  # the last pool must emit at least one cell
    for k, d in reversed(list(zip(kernels, dilations))):
        extent = 2 * extent  # smallest pool input with floor(x / 2) >= extent
        extent = extent + d * (k - 1)
    return extent


def _layer_names(n_levels):
    """Keras-style node names: branch A uses suffixes 0..n-1, branch B n..2n-1."""

    def suffixed(base, i):
        return base if i == 0 else f"{base}_{i}"

    return {
        "a": [(suffixed("conv2d", i), suffixed("max_pooling2d", i)) for i in range(n_levels)],
        "b": [(suffixed("conv2d", n_levels + i), suffixed("max_pooling2d", n_levels + i)) for i in range(n_levels)],
    }


def _glorot_limit(fan_in, fan_out):
    return np.sqrt(6.0 / (fan_in + fan_out))


def build(config=None, init_seed=0, dtype=np.float32, init="glorot", conv_method="im2col"):
    """Construct the two-branch network described by ``config``.

    Both input nodes are fed the same image batch. Every convolution is followed
    by ReLU and a 2x2 max pool; each branch is flattened, the two are
    concatenated and passed through a ReLU hidden layer and a softmax output.

    Weights are drawn uniform in ``+-sqrt(6 / (fan_in + fan_out))`` from a
    generator seeded with ``init_seed``, in node order; biases start at zero.
    ``init="zeros"`` gives an all-zero network (uniform output probabilities).
    """
    config = config or ArchitectureConfig()
    if init not in ("glorot", "zeros"):
        raise ConfigError(f"unknown init scheme {init!r}")
    n = len(config.filters)
    names = _layer_names(n)
    shape = (config.input_extent, config.input_extent, config.in_channels)
    input_a = InputLayer(f"{names['a'][0][0]}_input", shape)
    input_b = InputLayer(f"{names['b'][0][0]}_input", shape)
    nodes = [input_a, input_b]

    prev = {"a": input_a.name, "b": input_b.name}
    channels = config.in_channels
    for i in range(n):
        level_convs, level_pools = [], []
        for branch, kernels, dilations in (("a", config.kernels_a, config.dilations_a),
                                          ("b", config.kernels_b, config.dilations_b)):
            conv_name, pool_name = names[branch][i]
            spec = ConvSpec(kernels[i], channels, config.filters[i], dilations[i])
            level_convs.append(Conv2D(conv_name, spec, [prev[branch]], activation="relu", method=conv_method))
            level_pools.append(MaxPool2D(pool_name, [conv_name]))
            prev[branch] = pool_name
        nodes += level_convs + level_pools
        channels = config.filters[i]

    nodes.append(Flatten("flatten_1", [prev["a"]]))
    nodes.append(Flatten("flatten_2", [prev["b"]]))
    nodes.append(Concatenate("concatenate", ["flatten_1", "flatten_2"]))
    nodes.append(Flatten("flatten_3", ["concatenate"]))

    try:
        graph = Graph(nodes, dtype=dtype, config=config)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from None
    width = graph["flatten_3"].output_shape[0]
    hidden, classes = config.head
    graph = Graph(
        nodes + [
            Dense("dense_1", DenseSpec(width, hidden), ["flatten_3"], activation="relu"),
            Dense("dense_2", DenseSpec(hidden, classes), ["dense_1"], activation="softmax"),
        ],
        dtype=dtype,
        config=config,
    )

    rng = np.random.default_rng(init_seed)
    for node in graph.nodes:
        spec = getattr(node, "spec", None)
        if spec is None:
            continue
        if isinstance(spec, ConvSpec):
            fan_in = spec.kernel * spec.kernel * spec.in_channels
            fan_out = spec.kernel * spec.kernel * spec.out_channels
        else:
            fan_in, fan_out = spec.in_features, spec.out_features
        if init == "zeros":
            kernel = np.zeros(spec.weight_shape)
        else:
            limit = _glorot_limit(fan_in, fan_out)
            kernel = rng.uniform(-limit, limit, size=spec.weight_shape)
        node.params = {"kernel": kernel.astype(dtype), "bias": np.zeros(spec.bias_shape, dtype=dtype)}
    return graph


# Output shapes and parameter counts as printed in the published layer table.
# Used only to annotate the cells where the summary disagrees with print.
REFERENCE_TABLE = {
    "conv2d_input": ("[(None, 227, 227, 3)]", 0),
    "conv2d_5_input": ("[(None, 227, 227, 3)]", 0),
    "conv2d": ("(None, 223, 223, 20)", 1520),
    "conv2d_5": ("(None, 215, 215, 20)", 1520),
    "max_pooling2d": ("(None, 111, 111, 20)", 0),
    "max_pooling2d_5": ("(None, 107, 107, 20)", 0),
    "conv2d_1": ("(None, 109, 109, 30)", 5430),
    "conv2d_6": ("(None, 103, 103, 30)", 5430),
    "max_pooling2d_1": ("(None, 54, 54, 30)", 0),
    "max_pooling2d_6": ("(None, 51, 51, 30)", 0),
    "conv2d_2": ("(None, 52, 52, 40)", 10840),
    "conv2d_7": ("(None, 47, 47, 40)", 10840),
    "max_pooling2d_2": ("(None, 26, 26, 40)", 0),
    "max_pooling2d_7": ("(None, 23, 23, 40)", 0),
    "conv2d_3": ("(None, 24, 24, 50)", 10050),
    "conv2d_8": ("(None, 21, 21, 50)", 10050),
    "max_pooling2d_3": ("(None, 12, 12, 50)", 0),
    "max_pooling2d_8": ("(None, 10, 10, 50)", 0),
    "conv2d_4": ("(None, 10, 10, 60)", 27000),
    "conv2d_9": ("(None, 8, 8, 60)", 27000),
    "max_pooling2d_4": ("(None, 5, 5, 60)", 0),
    "max_pooling2d_9": ("(None, 4, 4, 60)", 0),
    "flatten_1": ("(None, 1500)", 0),
    "flatten_2": ("(None, 600)", 0),
    "concatenate": ("(None, 2460)", 0),
    "flatten_3": ("(None, 2460)", 0),
    "dense_1": ("(None, 128)", 315008),
    "dense_2": ("(None, 4)", 510),
}
REFERENCE_TOTAL = 441324

SUMMARY_COLUMNS = ("Layer (Type)", "Output Shape", "Params", "Connected to")


class SummaryRow(NamedTuple):
    name: str
    layer_type: str
    output_shape: tuple
    params: int
    connected_to: tuple
    note: str = ""

    @property
    def shape_text(self):
        text = "(None, " + ", ".join(str(d) for d in self.output_shape) + ")"
        return f"[{text}]" if self.layer_type == "InputLayer" else text


def summarize(graph, annotate=None):
    """One :class:`SummaryRow` per node in topological order.

    When ``annotate`` is true (default: only for the ``paper`` profile), rows
    whose shape or parameter count differ from :data:`REFERENCE_TABLE` carry a
    note giving the printed value.
    """
    if annotate is None:
        annotate = graph.config is not None and graph.config == ArchitectureConfig.from_profile("paper")
    rows = []
    for node in graph.nodes:
        row = SummaryRow(node.name, node.layer_type, node.output_shape, node.param_count, tuple(node.inputs))
        if annotate and node.name in REFERENCE_TABLE:
            printed_shape, printed_params = REFERENCE_TABLE[node.name]
            notes = []
            if row.shape_text != printed_shape:
                notes.append(f"published shape {printed_shape}")
            if row.params != printed_params:
                notes.append(f"published params {printed_params}")
            row = row._replace(note="; ".join(notes))
        rows.append(row)
    return rows


def format_summary(graph, annotate=None):
    """Tab-separated summary table followed by the parameter totals."""
    rows = summarize(graph, annotate)
    lines = ["\t".join(SUMMARY_COLUMNS + ("Note",))]
    for row in rows:
        connected = "[" + ", ".join(f"'{src}[0][0]'" for src in row.connected_to) + "]"
        lines.append("\t".join([f"{row.name} ({row.layer_type})", row.shape_text, str(row.params), connected, row.note]).rstrip("\t"))
    total = graph.parameter_count()
    lines += ["", f"Total params: {total}", f"Trainable params: {total}", "Non-trainable params: 0"]
    return "\n".join(lines)


def summary_json(graph, annotate=None):
    rows = summarize(graph, annotate)
    return json.dumps(
        {
            "layers": [
                {
                    "name": r.name,
                    "type": r.layer_type,
                    "output_shape": [None, *r.output_shape],
                    "params": r.params,
                    "connected_to": list(r.connected_to),
                    **({"note": r.note} if r.note else {}),
                }
                for r in rows
            ],
            "total_params": graph.parameter_count(),
        },
        indent=2,
    )
