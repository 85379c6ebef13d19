import json
import struct

import numpy as np
import pytest

from weednet.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from weednet.exceptions import ConfigError, CorruptionError, FormatError
from weednet.graph import Flatten
from weednet.model import (ArchitectureConfig, branch_output_extents, build, format_summary, minimal_input_extent,
                           summarize, summary_json)
from weednet.optim import Adam


@pytest.fixture(scope="module")
def paper_rows():
    return {r.name: r for r in summarize(build(init="zeros"))}


def test_first_conv_rows(paper_rows):
    a, b = paper_rows["conv2d"], paper_rows["conv2d_5"]
    assert (a.layer_type, a.output_shape, a.params) == ("Conv2D", (223, 223, 20), 1520)
    assert (b.layer_type, b.output_shape, b.params) == ("Conv2D", (215, 215, 20), 1520)


def test_corrected_cells_are_annotated(paper_rows):
    annotated = {name: row.note for name, row in paper_rows.items() if row.note}
    assert annotated == {
        "conv2d_3": "published params 10050",
        "conv2d_8": "published params 10050",
        "conv2d_4": "published params 27000",
        "conv2d_9": "published params 27000",
        "flatten_2": "published shape (None, 600)",
        "dense_2": "published params 510",
    }
    assert paper_rows["flatten_2"].output_shape == (960,)
    assert paper_rows["concatenate"].output_shape == (2460,)


def test_format_summary_layout():
    text = format_summary(build(init="zeros"))
    lines = text.splitlines()
    assert lines[0] == "Layer (Type)\tOutput Shape\tParams\tConnected to\tNote"
    assert lines[1] == "conv2d_input (InputLayer)\t[(None, 227, 227, 3)]\t0\t[]"
    assert "conv2d (Conv2D)\t(None, 223, 223, 20)\t1520\t['conv2d_input[0][0]']" in lines
    assert "concatenate (Concatenate)\t(None, 2460)\t0\t['flatten_1[0][0]', 'flatten_2[0][0]']" in lines
    assert lines[-3:] == ["Total params: 441324", "Trainable params: 441324", "Non-trainable params: 0"]


def test_summary_json_document():
    doc = json.loads(summary_json(build(init="zeros")))
    assert doc["total_params"] == 441324
    assert len(doc["layers"]) == 28
    assert doc["layers"][2]["output_shape"] == [None, 223, 223, 20]
    assert doc["layers"][23]["note"] == "published shape (None, 600)"


def test_tiny_profile_is_not_annotated():
    g = build(ArchitectureConfig.from_profile("tiny"), init="zeros")
    assert all(r.note == "" for r in summarize(g))


def test_tiny_profile_widths():
    g = build(ArchitectureConfig.from_profile("tiny"), init="zeros")
    assert g["flatten_1"].output_shape == (240,)
    assert g["flatten_2"].output_shape == (60,)
    assert g["concatenate"].output_shape == (300,)
    assert g.parameter_count() == 125800 + 300 * 128 + 128 + 516 == 164844


def test_branch_extents_paper():
    ext = branch_output_extents(ArchitectureConfig())
    assert ext["max_pooling2d_4"] == 5 and ext["max_pooling2d_9"] == 4
    assert ext["conv2d_7"] == 47


def test_minimal_extents():
    assert minimal_input_extent((5, 3, 3, 3, 3), (3, 2, 2, 1, 1)) == 116
    assert minimal_input_extent((5, 3, 3, 3, 3), (1, 1, 1, 1, 1)) == 96


@pytest.mark.parametrize("extent", [1, 10, 50, 95, 99, 100, 115])
def test_small_extents_rejected(extent):
    with pytest.raises(ConfigError):
        ArchitectureConfig(input_extent=extent)


def test_underflow_names_the_layer():
    # 110 survives every conv but leaves a single cell before the last dilated-branch pool
    with pytest.raises(ConfigError, match="max_pooling2d_9"):
        ArchitectureConfig(input_extent=110)
    # 60 runs out in the plain branch first
    with pytest.raises(ConfigError, match="conv2d_4"):
        ArchitectureConfig(input_extent=60)


@pytest.mark.parametrize("extent", [116, 128, 227, 300])
def test_extents_accepted(extent):
    ArchitectureConfig(input_extent=extent)


def test_config_validation():
    with pytest.raises(ConfigError):
        ArchitectureConfig(filters=(20, 30))
    with pytest.raises(ConfigError):
        ArchitectureConfig(head=(128,))
    with pytest.raises(ConfigError):
        ArchitectureConfig.from_profile("huge")
    with pytest.raises(ConfigError):
        build(init="ones")


def test_config_dict_round_trip():
    cfg = ArchitectureConfig.from_profile("tiny")
    assert ArchitectureConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def _trained_tiny(dtype=np.float32, steps=2):
    g = build(ArchitectureConfig.from_profile("tiny"), init_seed=1, dtype=dtype)
    opt = Adam(g)
    rng = np.random.default_rng(0)
    for _ in range(steps):
        g.forward(rng.random((2, 128, 128, 3)))
        g.backward(np.eye(4)[rng.integers(0, 4, 2)])
        opt.step()
    g.clear_cache()
    return g, opt


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip_bitwise(tmp_path, dtype):
    g, opt = _trained_tiny(dtype)
    path = tmp_path / "m.wdnt"
    save_checkpoint(g, path, opt.state, opt.hyper)
    loaded = read_checkpoint(path)
    assert loaded.step == 2 and loaded.adam_hyper == opt.hyper
    assert loaded.graph.config == g.config and loaded.graph.dtype is dtype
    for (_, _, a), (_, _, b) in zip(g.parameters(), loaded.graph.parameters()):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    for a, b in zip(opt.state.m + opt.state.v, loaded.adam_state.m + loaded.adam_state.v):
        assert a.tobytes() == b.tobytes()
    batch = np.random.default_rng(5).random((3, 128, 128, 3))
    assert g.forward(batch).tobytes() == loaded.graph.forward(batch).tobytes()
    assert loaded.graph.parameter_count() == build(ArchitectureConfig.from_profile("tiny")).parameter_count()


def test_checkpoint_byte_layout(tmp_path):
    g, _ = _trained_tiny(steps=0)
    path = tmp_path / "m.wdnt"
    save_checkpoint(g, path)
    blob = path.read_bytes()
    magic, version, width, flags, header_len = struct.unpack_from("<4sIBBI", blob)
    assert (magic, version, width, flags) == (b"WDNT", 1, 4, 0)
    header = json.loads(blob[14:14 + header_len])
    assert header["architecture"]["input_extent"] == 128 and header["optimizer"] is None
    step, count = struct.unpack_from("<QQ", blob, 14 + header_len)
    assert (step, count) == (0, 164844)
    assert len(blob) == 30 + header_len + 4 * count
    first = np.frombuffer(blob, "<f4", count=5, offset=30 + header_len)
    np.testing.assert_array_equal(first, g["conv2d"].params["kernel"].ravel()[:5])
    assert load_checkpoint(path).parameter_count() == 164844


def test_checkpoint_without_optimizer(tmp_path):
    g, _ = _trained_tiny(steps=0)
    save_checkpoint(g, tmp_path / "m.wdnt")
    loaded = read_checkpoint(tmp_path / "m.wdnt")
    assert loaded.adam_state is None and loaded.adam_hyper is None and loaded.step == 0


@pytest.mark.parametrize("cut", [3, 20, 100, -1, -4000])
def test_truncated_checkpoint_rejected(tmp_path, cut):
    g, opt = _trained_tiny(steps=1)
    path = tmp_path / "m.wdnt"
    save_checkpoint(g, path, opt.state, opt.hyper)
    blob = path.read_bytes()
    path.write_bytes(blob[:cut])
    with pytest.raises(CorruptionError):
        read_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    g, _ = _trained_tiny(steps=0)
    path = tmp_path / "m.wdnt"
    save_checkpoint(g, path)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(CorruptionError):
        read_checkpoint(path)


def test_bad_magic_and_version(tmp_path):
    g, _ = _trained_tiny(steps=0)
    path = tmp_path / "m.wdnt"
    save_checkpoint(g, path)
    blob = bytearray(path.read_bytes())
    bad = tmp_path / "bad.wdnt"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        read_checkpoint(bad)
    blob[4:8] = struct.pack("<I", 99)
    bad.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(bad)
    assert MAGIC == b"WDNT"


def test_save_is_atomic_on_failure(tmp_path):
    g, _ = _trained_tiny(steps=0)
    path = tmp_path / "m.wdnt"
    save_checkpoint(g, path)
    before = path.read_bytes()
    g["dense_2"].params["kernel"] = object()  # cannot be serialised
    with pytest.raises(Exception):
        save_checkpoint(g, path)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["m.wdnt"]


def test_graph_without_config_cannot_be_saved(tmp_path):
    g = build(ArchitectureConfig.from_profile("tiny"))
    from weednet.graph import Graph

    with pytest.raises(ValueError):
        save_checkpoint(Graph(g.nodes), tmp_path / "x.wdnt")
    assert isinstance(g["flatten_3"], Flatten)
