"""Network configurations, explicit layer graphs and parameter counting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

OPS = (
    "input",
    "conv",
    "bn",
    "relu",
    "sigmoid",
    "maxpool",
    "upconv",
    "concat",
    "attention",
    "add",
    "mul",
)

# Ops that leave spatial geometry and channel count untouched.
POINTWISE_OPS = ("bn", "relu", "sigmoid")


class ConfigError(ValueError):
    """Invalid configuration or graph; ``field`` names the offending key."""

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


@dataclass(frozen=True)
class UNetConfig:
    kernel_size: int
    depth: int
    channels: tuple[int, ...]
    attention: bool = False
    input_height: int = 576
    input_width: int = 576

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.kernel_size, int) or self.kernel_size < 2:
            raise ConfigError("kernel_size", f"must be an integer >= 2, got {self.kernel_size!r}")
        if not isinstance(self.depth, int) or self.depth < 1:
            raise ConfigError("depth", f"must be an integer >= 1, got {self.depth!r}")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channels", "all channel counts must be positive")
        if len(self.channels) != self.depth + 1:
            raise ConfigError(
                "channels",
                f"list length {len(self.channels)} != depth + 1 = {self.depth + 1}",
            )
        step = 2**self.depth
        for name, size in (("input_size", self.input_height), ("input_size", self.input_width)):
            if size < 1:
                raise ConfigError(name, f"sizes must be positive, got {size}")
            if size % step:
                raise ConfigError(name, f"{size} is not divisible by 2**depth = {step}")

    def to_dict(self) -> dict:
        return {
            "kernel_size": self.kernel_size,
            "depth": self.depth,
            "channels": list(self.channels),
            "attention": self.attention,
            "input_size": [self.input_height, self.input_width],
        }


@dataclass(frozen=True)
class LayerNode:
    """One layer. Fields that do not apply to ``op`` keep their defaults.

    For ``concat`` the inputs are (left, right); for ``attention`` they are
    (skip, gating signal).
    """

    id: int
    op: str
    inputs: tuple[int, ...] = ()
    kernel: int = 1
    stride: int = 1
    in_ch: int = 0
    out_ch: int = 0
    bias: bool = True
    inter_ch: int = 0

    def n_params(self) -> int:
        if self.op in ("conv", "upconv"):
            return self.out_ch * (self.in_ch * self.kernel**2 + int(self.bias))
        if self.op == "bn":
            return 2 * self.out_ch
        if self.op == "attention":
            # W_x and W_g 1x1 convs with bias, then psi: inter -> 1 with bias
            return self.inter_ch * (self.in_ch + 1) * 2 + self.inter_ch + 1
        return 0


@dataclass(frozen=True)
class NetworkGraph:
    nodes: tuple[LayerNode, ...]
    input_shape: tuple[int, int, int]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "_index", {n.id: i for i, n in enumerate(self.nodes)})
        self.validate()

    def node(self, node_id: int) -> LayerNode:
        return self.nodes[self._index[node_id]]

    @property
    def terminal(self) -> LayerNode:
        return self.nodes[-1]

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out[i].append(n.id)
        return out

    def validate(self) -> None:
        if len(self._index) != len(self.nodes):
            raise ConfigError("nodes", "duplicate node ids")
        inputs = [n for n in self.nodes if n.op == "input"]
        if len(inputs) != 1 or self.nodes[0].op != "input":
            raise ConfigError("nodes", "graph needs exactly one input node, placed first")
        seen: set[int] = set()
        for n in self.nodes:
            if n.op not in OPS:
                raise ConfigError("nodes", f"unknown op {n.op!r} at node {n.id}")
            for i in n.inputs:
                if i not in seen:
                    raise ConfigError("nodes", f"node {n.id} reads {i} before it is defined")
            seen.add(n.id)
        cons = self.consumers()
        sinks = [i for i, c in cons.items() if not c]
        if sinks != [self.terminal.id]:
            raise ConfigError("nodes", f"graph must have exactly one terminal node, got {sinks}")
        self.shapes()

    def shapes(self) -> dict[int, tuple[int, int, int]]:
        """(channels, height, width) for every node; raises on inconsistency."""
        h, w, c = self.input_shape
        shp: dict[int, tuple[int, int, int]] = {}
        for n in self.nodes:
            arity = {"input": 0, "concat": 2, "attention": 2, "add": 2, "mul": 2}.get(n.op, 1)
            if len(n.inputs) != arity:
                raise ConfigError("nodes", f"node {n.id} ({n.op}) expects {arity} inputs")
            prev = [shp[i] for i in n.inputs]
            if n.op == "input":
                shp[n.id] = (c, h, w)
                continue
            pc, ph, pw = prev[0]
            if n.op in ("conv", "upconv"):
                if n.in_ch != pc:
                    raise ConfigError("nodes", f"node {n.id}: in_ch {n.in_ch} != incoming {pc}")
                if n.kernel < 1 or n.stride < 1 or n.out_ch < 1:
                    raise ConfigError("nodes", f"node {n.id}: bad conv hyper-parameters")
                if n.op == "conv":
                    shp[n.id] = (n.out_ch, ph, pw)
                else:
                    shp[n.id] = (n.out_ch, ph * n.stride, pw * n.stride)
            elif n.op == "maxpool":
                k = n.kernel
                if ph % k or pw % k:
                    raise ConfigError("nodes", f"node {n.id}: {ph}x{pw} not divisible by pool {k}")
                shp[n.id] = (pc, ph // k, pw // k)
            elif n.op in POINTWISE_OPS:
                if n.op == "bn" and n.out_ch != pc:
                    raise ConfigError("nodes", f"node {n.id}: bn width {n.out_ch} != {pc}")
                shp[n.id] = prev[0]
            else:
                qc, qh, qw = prev[1]
                if (ph, pw) != (qh, qw):
                    raise ConfigError("nodes", f"node {n.id}: spatial mismatch {ph}x{pw} vs {qh}x{qw}")
                if n.op == "concat":
                    shp[n.id] = (pc + qc, ph, pw)
                elif n.op == "attention":
                    if n.in_ch != pc or n.inter_ch < 1:
                        raise ConfigError("nodes", f"node {n.id}: bad attention gate widths")
                    if qc != pc:
                        raise ConfigError("nodes", f"node {n.id}: gating width {qc} != skip {pc}")
                    shp[n.id] = prev[0]
                else:
                    if pc != qc:
                        raise ConfigError("nodes", f"node {n.id}: channel mismatch {pc} vs {qc}")
                    shp[n.id] = prev[0]
        return shp


class GraphBuilder:
    """Incrementally assembles a NetworkGraph, tracking channel widths."""

    def __init__(self, height: int, width: int, channels: int = 1):
        self.input_shape = (height, width, channels)
        self._nodes: list[LayerNode] = [LayerNode(0, "input", out_ch=channels)]
        self._width = {0: channels}

    def _add(self, op: str, inputs: Iterable[int], out_ch: int, **kw) -> int:
        nid = len(self._nodes)
        self._nodes.append(LayerNode(nid, op, tuple(inputs), out_ch=out_ch, **kw))
        self._width[nid] = out_ch
        return nid

    def width(self, nid: int) -> int:
        return self._width[nid]

    def conv(self, x: int, out_ch: int, k: int, stride: int = 1, bias: bool = True) -> int:
        return self._add("conv", [x], out_ch, kernel=k, stride=stride, in_ch=self._width[x], bias=bias)

    def upconv(self, x: int, out_ch: int, k: int = 2, stride: int = 2, bias: bool = True) -> int:
        return self._add("upconv", [x], out_ch, kernel=k, stride=stride, in_ch=self._width[x], bias=bias)

    def bn(self, x: int) -> int:
        return self._add("bn", [x], self._width[x])

    def relu(self, x: int) -> int:
        return self._add("relu", [x], self._width[x])

    def sigmoid(self, x: int) -> int:
        return self._add("sigmoid", [x], self._width[x])

    def maxpool(self, x: int, k: int = 2) -> int:
        return self._add("maxpool", [x], self._width[x], kernel=k, stride=k)

    def concat(self, a: int, b: int) -> int:
        return self._add("concat", [a, b], self._width[a] + self._width[b])

    def attention(self, skip: int, gate: int, inter_ch: int | None = None) -> int:
        c = self._width[skip]
        inter = inter_ch if inter_ch is not None else max(c // 2, 1)
        return self._add("attention", [skip, gate], c, in_ch=c, inter_ch=inter)

    def add(self, a: int, b: int) -> int:
        return self._add("add", [a, b], self._width[a])

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", [a, b], self._width[a])

    def build(self) -> NetworkGraph:
        return NetworkGraph(tuple(self._nodes), self.input_shape)


_CONFIG_KEYS = {"kernel_size", "depth", "channels", "attention", "input_size"}


def parse_config(text: str) -> UNetConfig:
    """Parse a JSON configuration document into a validated UNetConfig."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("document", f"malformed JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError("document", "top level must be a JSON object")
    unknown = sorted(set(doc) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    missing = sorted(_CONFIG_KEYS - set(doc) - {"attention"})
    if missing:
        raise ConfigError(missing[0], "missing required key")

    def _int(name, value):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value

    k = _int("kernel_size", doc["kernel_size"])
    d = _int("depth", doc["depth"])
    chans = doc["channels"]
    if not isinstance(chans, list) or not chans:
        raise ConfigError("channels", "expected a non-empty array of integers")
    chans = [_int("channels", c) for c in chans]
    att = doc.get("attention", False)
    if not isinstance(att, bool):
        raise ConfigError("attention", f"expected a boolean, got {att!r}")
    size = doc["input_size"]
    if not isinstance(size, list) or len(size) != 2:
        raise ConfigError("input_size", "expected an array [height, width]")
    h, w = (_int("input_size", s) for s in size)
    return UNetConfig(k, d, tuple(chans), att, h, w)


def load_config(path) -> UNetConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _double_conv(b: GraphBuilder, x: int, out_ch: int, k: int) -> int:
    for _ in range(2):
        x = b.relu(b.bn(b.conv(x, out_ch, k)))
    return x


def build_unet(config: UNetConfig) -> NetworkGraph:
    """Expand a configuration into the explicit (attention) U-Net layer graph.

    Encoder levels use two same-padded k x k convs, each followed by an affine
    batch norm and ReLU, with 2x2 max pooling in between. Decoder levels
    upsample with a 2x2 stride-2 transposed conv to the level's width,
    concatenate with the (optionally gated) skip and apply two more convs.
    A 1x1 conv to one channel and a sigmoid close the network.
    """
    config.validate()
    k, d, ch = config.kernel_size, config.depth, config.channels
    b = GraphBuilder(config.input_height, config.input_width, 1)
    x = 0
    skips = []
    for level in range(d):
        x = _double_conv(b, x, ch[level], k)
        skips.append(x)
        x = b.maxpool(x, 2)
    x = _double_conv(b, x, ch[d], k)
    for level in reversed(range(d)):
        up = b.upconv(x, ch[level], k=2, stride=2)
        skip = skips[level]
        if config.attention:
            skip = b.attention(skip, up)
        x = b.concat(skip, up)
        x = _double_conv(b, x, ch[level], k)
    x = b.conv(x, 1, 1)
    b.sigmoid(x)
    return b.build()


def count_parameters(graph: NetworkGraph) -> int:
    return sum(n.n_params() for n in graph.nodes)


def parameter_breakdown(graph: NetworkGraph) -> list[tuple[int, str, int]]:
    return [(n.id, n.op, n.n_params()) for n in graph.nodes if n.n_params()]


@dataclass(frozen=True)
class CatalogRow:
    published_trf: int
    kernel_size: int
    depth: int
    channels: tuple[int, ...]
    published_params: int

    @property
    def buildable(self) -> bool:
        return len(self.channels) == self.depth + 1

    def config(self, attention: bool = False, input_size: int = 576) -> UNetConfig:
        if not self.buildable:
            raise ConfigError(
                "channels",
                f"row (k={self.kernel_size}, d={self.depth}) lists {len(self.channels)} "
                f"widths; no mapping onto {self.depth + 1} levels is defined",
            )
        return UNetConfig(self.kernel_size, self.depth, self.channels, attention, input_size, input_size)


_TABLE = (
    (54, 3, 2, (230, 456, 765, 1245), 31_013_720),
    (100, 3, 3, (145, 256, 512, 1024), 31_012_268),
    (146, 3, 4, (133, 244, 355, 791), 31_032_960),
    (204, 4, 3, (64, 128, 256, 512, 1024), 31_042_369),
    (230, 3, 6, (63, 170, 256, 512), 31_031_345),
    (298, 4, 4, (25, 44, 110, 451, 756), 31_043_816),
    (360, 3, 8, (47, 83, 180, 360), 31_062_482),
    (412, 5, 3, (63, 64, 115, 255, 512, 1024), 31_043_945),
    (486, 4, 6, (28, 58, 146, 270, 510), 31_027_119),
    (570, 4, 7, (24, 55, 101, 223, 481), 31_041_124),
)


def catalog() -> list[CatalogRow]:
    """The ten published equal-budget configurations, as reference data."""
    return [CatalogRow(*row) for row in _TABLE]
