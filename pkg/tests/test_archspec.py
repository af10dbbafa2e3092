import json
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfscope.archspec import (
    ConfigError,
    GraphBuilder,
    UNetConfig,
    build_unet,
    catalog,
    count_parameters,
    parameter_breakdown,
    parse_config,
)


def _doc(**kw):
    base = {"kernel_size": 3, "depth": 3, "channels": [145, 256, 512, 1024], "attention": False, "input_size": [576, 576]}
    base.update(kw)
    return json.dumps(base)


def test_parse_reference_config():
    cfg = parse_config(_doc())
    assert cfg == UNetConfig(3, 3, (145, 256, 512, 1024), False, 576, 576)


def test_parse_minimal_depth():
    cfg = parse_config(_doc(depth=1, channels=[8, 16], input_size=[64, 64]))
    assert cfg.depth == 1 and cfg.channels == (8, 16)


def test_attention_key_is_optional():
    doc = json.loads(_doc())
    del doc["attention"]
    assert parse_config(json.dumps(doc)).attention is False


@pytest.mark.parametrize(
    "kw, field",
    [
        ({"channels": [145, 256, 512]}, "channels"),
        ({"kernel_size": 1}, "kernel_size"),
        ({"depth": 0, "channels": [4]}, "depth"),
        ({"input_size": [570, 576]}, "input_size"),
        ({"channels": [4, 0, 8, 16]}, "channels"),
        ({"kernel_size": 3.0}, "kernel_size"),
        ({"attention": "yes"}, "attention"),
        ({"extra": 1}, "extra"),
    ],
)
def test_parse_rejects(kw, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(_doc(**kw))
    assert exc.value.field == field


def test_parse_rejects_missing_key_and_bad_json():
    doc = json.loads(_doc())
    del doc["depth"]
    with pytest.raises(ConfigError, match="depth"):
        parse_config(json.dumps(doc))
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("{not json")


def test_depth_one_structure():
    g = build_unet(UNetConfig(3, 1, (8, 16), False, 64, 64))
    ops = [n.op for n in g.nodes]
    assert ops.count("maxpool") == 1
    assert ops.count("upconv") == 1
    assert ops.count("concat") == 1
    assert ops.count("conv") == 7
    assert ops[-1] == "sigmoid"


def test_concat_order_is_skip_then_up():
    g = build_unet(UNetConfig(3, 1, (8, 16), False, 64, 64))
    cat = next(n for n in g.nodes if n.op == "concat")
    assert g.node(cat.inputs[1]).op == "upconv"


@pytest.mark.parametrize(
    "cfg, expected",
    [
        (UNetConfig(3, 3, (145, 256, 512, 1024)), 31_012_268),
        (UNetConfig(4, 4, (25, 44, 110, 451, 756)), 31_043_816),
    ],
)
def test_reference_parameter_counts(cfg, expected):
    t0 = time.perf_counter()
    assert count_parameters(build_unet(cfg)) == expected
    assert time.perf_counter() - t0 < 1.0


def test_single_conv_params():
    b = GraphBuilder(8, 8, 1)
    b.conv(0, 1, 3)
    assert count_parameters(b.build()) == 10


def test_breakdown_sums_to_total():
    g = build_unet(UNetConfig(3, 2, (4, 8, 16), True, 32, 32))
    rows = parameter_breakdown(g)
    assert sum(r[2] for r in rows) == count_parameters(g)
    assert {r[1] for r in rows} == {"conv", "bn", "upconv", "attention"}


def test_attention_adds_gate_params():
    plain = count_parameters(build_unet(UNetConfig(3, 3, (145, 256, 512, 1024))))
    gated = count_parameters(build_unet(UNetConfig(3, 3, (145, 256, 512, 1024), True)))
    assert gated - plain == 349_931


def test_catalog_rows():
    rows = catalog()
    assert len(rows) == 10
    r1, r4 = rows[0], rows[3]
    assert (r1.kernel_size, r1.depth, r1.channels, r1.published_trf, r1.published_params) == (
        3, 2, (230, 456, 765, 1245), 54, 31_013_720
    )
    assert (r4.kernel_size, r4.depth, r4.channels, r4.published_trf, r4.published_params) == (
        4, 3, (64, 128, 256, 512, 1024), 204, 31_042_369
    )
    assert [r.published_trf for r in rows] == sorted(r.published_trf for r in rows)


def test_catalog_buildable_rows_reproduce_published_counts():
    built = [r for r in catalog() if r.buildable]
    assert [(r.kernel_size, r.depth) for r in built] == [(3, 3), (4, 4)]
    for r in built:
        assert count_parameters(build_unet(r.config())) == r.published_params
    with pytest.raises(ConfigError):
        catalog()[0].config()


def test_graph_validation_errors():
    b = GraphBuilder(5, 5, 1)
    b.maxpool(0, 2)
    with pytest.raises(ConfigError, match="divisible"):
        b.build()


@settings(max_examples=40, deadline=None)
@given(
    k=st.integers(2, 5),
    d=st.integers(1, 4),
    base=st.integers(1, 8),
    attention=st.booleans(),
)
def test_params_monotone_in_channels(k, d, base, attention):
    size = 2**d * 2
    small = UNetConfig(k, d, tuple(base * 2**i for i in range(d + 1)), attention, size, size)
    big = UNetConfig(k, d, tuple((base + 1) * 2**i for i in range(d + 1)), attention, size, size)
    assert count_parameters(build_unet(big)) > count_parameters(build_unet(small))


@pytest.mark.parametrize("d", [1, 2, 4])
def test_attention_gate_per_skip(d):
    size = 2**d * 2
    g = build_unet(UNetConfig(3, d, (2,) * (d + 1), True, size, size))
    gates = [n for n in g.nodes if n.op == "attention"]
    assert len(gates) == d
    assert all(g.node(n.inputs[1]).op == "upconv" for n in gates)
