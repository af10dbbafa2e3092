"""Theoretical receptive field (TRF) propagation through a layer graph.

Every pixel of every layer carries the box (top, left, bottom, right) of input
pixels that can influence it. Boxes are stored as an ``(h, w, 4)`` integer
array and pushed through the graph in topological order.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from rfscope.archspec import (
    POINTWISE_OPS,
    ConfigError,
    NetworkGraph,
    UNetConfig,
    build_unet,
    catalog,
)

TOP, LEFT, BOTTOM, RIGHT = range(4)


class RFBox(NamedTuple):
    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    def size(self) -> float:
        """Geometric-mean extent, (b - t) * (r - l) under the square root."""
        return math.sqrt((self.bottom - self.top) * (self.right - self.left))

    def pixel_size(self) -> float:
        return math.sqrt(self.height * self.width)

    def contains(self, i: int, j: int) -> bool:
        return self.top <= i <= self.bottom and self.left <= j <= self.right

    def pixels(self) -> set[tuple[int, int]]:
        return {
            (i, j)
            for i in range(self.top, self.bottom + 1)
            for j in range(self.left, self.right + 1)
        }


@dataclass(frozen=True)
class RFTensor:
    boxes: np.ndarray  # (h, w, 4) int64

    @property
    def height(self) -> int:
        return self.boxes.shape[0]

    @property
    def width(self) -> int:
        return self.boxes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.boxes.shape[:2]

    def box(self, i: int, j: int) -> RFBox:
        return RFBox(*(int(v) for v in self.boxes[i, j]))

    def center(self) -> tuple[int, int]:
        return self.height // 2, self.width // 2

    def sizes(self) -> np.ndarray:
        """Per-pixel TRF size (extent convention)."""
        b = self.boxes
        return np.sqrt((b[..., BOTTOM] - b[..., TOP]) * (b[..., RIGHT] - b[..., LEFT]).astype(float))

    def __eq__(self, other):
        return isinstance(other, RFTensor) and np.array_equal(self.boxes, other.boxes)


def trf_input(h: int, w: int) -> RFTensor:
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return RFTensor(np.stack([ii, jj, ii, jj], axis=-1).astype(np.int64))


def same_padding(size: int, k: int, s: int) -> tuple[int, int]:
    """Leading/trailing padding that keeps ``size`` output positions.

    The leading side gets the floored half; any odd remainder goes to the
    trailing side so the last window ends inside the padded tensor.
    """
    total = (size - 1) * s + k - size
    lead = total // 2
    return lead, total - lead


def trf_conv(prev: RFTensor, k: int, s: int = 1) -> RFTensor:
    h, w = prev.shape
    pt, pb = same_padding(h, k, s)
    pl, pr = same_padding(w, k, s)
    # edge replication is the same as clamping to the image
    P = np.pad(prev.boxes, ((pt, pb), (pl, pr), (0, 0)), mode="edge")
    rows = np.arange(h) * s
    cols = np.arange(w) * s
    out = np.empty_like(prev.boxes)
    out[..., :2] = P[rows[:, None], cols[None, :], :2]
    out[..., 2:] = P[rows[:, None] + k - 1, cols[None, :] + k - 1, 2:]
    return RFTensor(out)


def trf_maxpool(prev: RFTensor, k: int) -> RFTensor:
    h, w = prev.shape
    if h % k or w % k:
        raise ValueError(f"max pooling {h}x{w} by {k}: dimensions not divisible")
    b = prev.boxes
    out = np.empty((h // k, w // k, 4), dtype=b.dtype)
    out[..., :2] = b[::k, ::k, :2]
    out[..., 2:] = b[k - 1 :: k, k - 1 :: k, 2:]
    return RFTensor(out)


def trf_upsample(prev: RFTensor, k: int, s: int, inclusive: bool = False) -> RFTensor:
    """Transposed-convolution rule: scatter each input box over its output footprint.

    Each input pixel (i, j) writes to outputs [i*s, i*s + k) along both axes
    (``inclusive=True`` widens that to i*s + k), merging overlaps by taking
    the min of top/left and max of bottom/right. Footprints are cropped to the
    ``(h*s, w*s)`` output. Outputs never written (only when s > k) take the box
    of the nearest written pixel, preferring up/left on ties.
    """
    h, w = prev.shape
    H, W = h * s, w * s
    span = k + 1 if inclusive else k
    big = np.iinfo(np.int64).max
    out = np.empty((H, W, 4), dtype=np.int64)
    out[..., :2] = big
    out[..., 2:] = -1
    b = prev.boxes
    for a in range(span):
        for c in range(span):
            ri = np.arange(h) * s + a
            cj = np.arange(w) * s + c
            rmask, cmask = ri < H, cj < W
            if not rmask.any() or not cmask.any():
                continue
            src = b[: rmask.sum(), : cmask.sum()]
            view = out[ri[rmask][:, None], cj[cmask][None, :]]
            view[..., :2] = np.minimum(view[..., :2], src[..., :2])
            view[..., 2:] = np.maximum(view[..., 2:], src[..., 2:])
            out[ri[rmask][:, None], cj[cmask][None, :]] = view
    unset = out[..., 2] < 0
    if unset.any():
        out = _fill_nearest(out, ~unset)
    return RFTensor(out)


def _fill_nearest(out: np.ndarray, written: np.ndarray) -> np.ndarray:
    H, W = written.shape
    wi, wj = np.nonzero(written)
    res = out.copy()
    for i, j in zip(*np.nonzero(~written)):
        d = np.abs(wi - i) + np.abs(wj - j)
        # lexsort keys: distance, then row, then column (up/left first)
        best = np.lexsort((wj, wi, d))[0]
        res[i, j] = out[wi[best], wj[best]]
    return res


def trf_concat(a: RFTensor, b: RFTensor) -> RFTensor:
    if a.shape != b.shape:
        raise ValueError(f"cannot merge receptive fields of shapes {a.shape} and {b.shape}")
    out = np.empty_like(a.boxes)
    out[..., :2] = np.minimum(a.boxes[..., :2], b.boxes[..., :2])
    out[..., 2:] = np.maximum(a.boxes[..., 2:], b.boxes[..., 2:])
    return RFTensor(out)


def trf_attention(x_skip: RFTensor, g: RFTensor) -> RFTensor:
    return trf_concat(x_skip, g)


def trf_activation(prev: RFTensor) -> RFTensor:
    return prev


def propagate(graph: NetworkGraph, inclusive_upsample: bool = False) -> dict[int, RFTensor]:
    """RFTensor for every node of ``graph``."""
    h, w, _ = graph.input_shape
    out: dict[int, RFTensor] = {}
    for n in graph.nodes:
        ins = [out[i] for i in n.inputs]
        if n.op == "input":
            out[n.id] = trf_input(h, w)
        elif n.op == "conv":
            out[n.id] = trf_conv(ins[0], n.kernel, n.stride)
        elif n.op == "maxpool":
            out[n.id] = trf_maxpool(ins[0], n.kernel)
        elif n.op == "upconv":
            out[n.id] = trf_upsample(ins[0], n.kernel, n.stride, inclusive_upsample)
        elif n.op in POINTWISE_OPS:
            out[n.id] = trf_activation(ins[0])
        elif n.op == "attention":
            out[n.id] = trf_attention(ins[0], ins[1])
        else:  # concat, add, mul
            out[n.id] = trf_concat(ins[0], ins[1])
    return out


@dataclass(frozen=True)
class TRFReport:
    network_trf_size: float
    center_box: RFBox
    per_layer_sizes: tuple[tuple[int, float], ...]
    pixel_trf_size: float
    border_map: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "trf_size": self.network_trf_size,
            "center_box": list(self.center_box),
            "per_layer": [[nid, size] for nid, size in self.per_layer_sizes],
            "pixel_trf_size": self.pixel_trf_size,
        }


def analyze(graph: NetworkGraph, border_map: bool = False, inclusive_upsample: bool = False) -> TRFReport:
    """Propagate boxes through ``graph`` and size the centre pixel's TRF."""
    tensors = propagate(graph, inclusive_upsample)
    per_layer = []
    for n in graph.nodes:
        t = tensors[n.id]
        per_layer.append((n.id, t.box(*t.center()).size()))
    final = tensors[graph.terminal.id]
    box = final.box(*final.center())
    return TRFReport(
        network_trf_size=box.size(),
        center_box=box,
        per_layer_sizes=tuple(per_layer),
        pixel_trf_size=box.pixel_size(),
        border_map=final.sizes() if border_map else None,
    )


def template_graph(k: int, d: int, height: int, attention: bool = False) -> NetworkGraph:
    """Single-channel U-Net of the given geometry on a ``height x 2**d`` input.

    Box rows never depend on the column axis, so a narrow input gives the same
    row extents as a square one while keeping memory linear in ``height``.
    """
    cfg = UNetConfig(k, d, (1,) * (d + 1), attention, height, 2**d)
    return build_unet(cfg)


def _extent_bound(k: int, d: int, up_span: int = 3) -> int:
    jump, ext = 1, 0
    for _ in range(d):
        ext += 2 * (k - 1) * jump + jump
        jump *= 2
    ext += 2 * (k - 1) * jump
    for _ in range(d):
        ext += (up_span - 1) * jump
        jump //= 2
        ext += 2 * (k - 1) * jump
    return ext


@functools.lru_cache(maxsize=None)
def structural_trf(k: int, d: int, inclusive_upsample: bool = False) -> RFBox:
    """Unclamped centre-row TRF extent of the (k, d) U-Net geometry.

    Returns a square box whose side is the row extent. The image is sized so
    that the centre pixel's box never touches the border, and so that the
    centre sits on a multiple of 2**d, as it does for a 576-pixel input.
    """
    step = 2 ** (d + 1)
    need = 2 * _extent_bound(k, d) + 8
    height = step * -(-need // step)
    graph = template_graph(k, d, height)
    tensors = propagate(graph, inclusive_upsample)
    final = tensors[graph.terminal.id]
    ci, cj = final.center()
    t, _, b, _ = (int(v) for v in final.boxes[ci, cj])
    if t <= 0 or b >= height - 1:
        raise RuntimeError(f"template for k={k}, d={d} is clamped; enlarge the input")
    return RFBox(t, t, b, b)


def calibration_report(input_size: int = 576) -> list[dict]:
    """Computed TRF sizes for every catalogue row next to the published values.

    ``structural_*`` columns use unclamped template graphs; the ``config_*``
    columns are filled only for rows whose channel list can be built, using
    the real ``input_size x input_size`` graph. Each size is reported under
    three conventions: extent (default), pixel count, and inclusive upsampling
    footprints.
    """
    rows = []
    for row in catalog():
        tmpl = structural_trf(row.kernel_size, row.depth)
        incl = structural_trf(row.kernel_size, row.depth, inclusive_upsample=True)
        entry = {
            "kernel_size": row.kernel_size,
            "depth": row.depth,
            "buildable": row.buildable,
            "published_trf": row.published_trf,
            "structural_trf": tmpl.size(),
            "structural_trf_pixels": tmpl.pixel_size(),
            "structural_trf_inclusive": incl.size(),
            "delta": tmpl.size() - row.published_trf,
            "relative_delta": (tmpl.size() - row.published_trf) / row.published_trf,
            "delta_pixels": tmpl.pixel_size() - row.published_trf,
            "delta_inclusive": incl.size() - row.published_trf,
        }
        if row.buildable:
            try:
                rep = analyze(build_unet(row.config(input_size=input_size)))
            except ConfigError:
                rep = None
            if rep is not None:
                entry["config_trf"] = rep.network_trf_size
                entry["config_center_box"] = list(rep.center_box)
                entry["config_relative_delta"] = (
                    rep.network_trf_size - row.published_trf
                ) / row.published_trf
        rows.append(entry)
    return rows
