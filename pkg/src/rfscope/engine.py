"""Small double-precision forward/backward engine over a NetworkGraph.

It exists to differentiate one output pixel with respect to the input image
(the effective receptive field) and to provide two independent checks of the
box propagation: NaN poisoning and central finite differences.

Activations are laid out as ``(channels, batch, height, width)`` so every
kernel tap is a single matrix product over the channel axis.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from rfscope.archspec import NetworkGraph
from rfscope.rfprop import RFBox, propagate, same_padding

SCHEMES = ("uniform_kaiming", "all_ones")


def worker_count() -> int:
    """Worker cap from RFSCOPE_THREADS (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("RFSCOPE_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class WeightSet:
    params: dict  # node id -> {name: ndarray}
    seed: int
    scheme: str

    def save(self, path) -> None:
        flat = {f"{nid}/{name}": arr for nid, block in self.params.items() for name, arr in block.items()}
        np.savez(path, __seed__=np.int64(self.seed), __scheme__=np.str_(self.scheme), **flat)

    @classmethod
    def load(cls, path, graph: NetworkGraph | None = None) -> "WeightSet":
        params: dict = {}
        with np.load(path) as data:
            seed = int(data["__seed__"])
            scheme = str(data["__scheme__"])
            for key in data.files:
                if key.startswith("__"):
                    continue
                nid, name = key.split("/", 1)
                params.setdefault(int(nid), {})[name] = np.asarray(data[key], dtype=np.float64)
        ws = cls(params, seed, scheme)
        if graph is not None:
            ws.check(graph)
        return ws

    def check(self, graph: NetworkGraph) -> None:
        expected = _param_shapes(graph)
        for nid, shapes in expected.items():
            block = self.params.get(nid)
            if block is None or set(block) != set(shapes):
                raise ValueError(f"weights for node {nid} missing or incomplete")
            for name, shape in shapes.items():
                if block[name].shape != shape:
                    raise ValueError(f"node {nid} {name}: shape {block[name].shape} != {shape}")


def _param_shapes(graph: NetworkGraph) -> dict[int, dict[str, tuple]]:
    out = {}
    for n in graph.nodes:
        if n.op == "conv":
            out[n.id] = {"weight": (n.out_ch, n.in_ch, n.kernel, n.kernel)}
        elif n.op == "upconv":
            out[n.id] = {"weight": (n.in_ch, n.out_ch, n.kernel, n.kernel)}
        elif n.op == "bn":
            out[n.id] = {"scale": (n.out_ch,), "shift": (n.out_ch,)}
        elif n.op == "attention":
            out[n.id] = {
                "wx": (n.inter_ch, n.in_ch),
                "bx": (n.inter_ch,),
                "wg": (n.inter_ch, n.in_ch),
                "bg": (n.inter_ch,),
                "wpsi": (1, n.inter_ch),
                "bpsi": (1,),
            }
        else:
            continue
        if n.op in ("conv", "upconv") and n.bias:
            out[n.id]["bias"] = (n.out_ch,)
    return out


def init_weights(graph: NetworkGraph, seed: int = 0, scheme: str = "uniform_kaiming") -> WeightSet:
    """Deterministic weights for ``graph``.

    ``uniform_kaiming`` draws kernels from U(-b, b), b = sqrt(6 / fan_in), and
    biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in)). ``all_ones`` sets every
    kernel entry to 1 / fan_in and biases to zero. Batch norm is always the
    identity affine map.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown weight scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    all_shapes = _param_shapes(graph)
    params: dict = {}
    for n in graph.nodes:
        shapes = all_shapes.get(n.id)
        if not shapes:
            continue
        if n.op == "bn":
            params[n.id] = {"scale": np.ones(n.out_ch), "shift": np.zeros(n.out_ch)}
            continue
        if n.op in ("conv", "upconv"):
            fan = {"weight": n.in_ch * n.kernel**2}
        else:
            fan = {"wx": n.in_ch, "wg": n.in_ch, "wpsi": n.inter_ch}
        bias_fan = {"bias": fan.get("weight"), "bx": n.in_ch, "bg": n.in_ch, "bpsi": n.inter_ch}
        block = {}
        for name, shape in shapes.items():
            if name in fan:
                f = fan[name]
                if scheme == "all_ones":
                    block[name] = np.full(shape, 1.0 / f)
                else:
                    b = np.sqrt(6.0 / f)
                    block[name] = rng.uniform(-b, b, size=shape)
            else:
                if scheme == "all_ones":
                    block[name] = np.zeros(shape)
                else:
                    b = 1.0 / np.sqrt(bias_fan[name])
                    block[name] = rng.uniform(-b, b, size=shape)
        params[n.id] = block
    return WeightSet(params, seed, scheme)


# --- layer kernels -----------------------------------------------------------


def _conv_fwd(x, weight, bias, k, s):
    C, N, H, W = x.shape
    pt, pb = same_padding(H, k, s)
    pl, pr = same_padding(W, k, s)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((weight.shape[0], N, H, W))
    for a in range(k):
        for b in range(k):
            tap = xp[:, :, a : a + (H - 1) * s + 1 : s, b : b + (W - 1) * s + 1 : s]
            out += np.tensordot(weight[:, :, a, b], tap, axes=(1, 0))
    if bias is not None:
        out += bias[:, None, None, None]
    return out


def _conv_bwd(dout, weight, k, s, in_shape):
    C, N, H, W = in_shape
    pt, pb = same_padding(H, k, s)
    pl, pr = same_padding(W, k, s)
    dxp = np.zeros((C, N, H + pt + pb, W + pl + pr))
    for a in range(k):
        for b in range(k):
            dxp[:, :, a : a + (H - 1) * s + 1 : s, b : b + (W - 1) * s + 1 : s] += np.tensordot(
                weight[:, :, a, b], dout, axes=(0, 0)
            )
    return dxp[:, :, pt : pt + H, pl : pl + W]


def _upconv_fwd(x, weight, bias, k, s):
    C, N, H, W = x.shape
    Ho, Wo = H * s, W * s
    full = np.zeros((weight.shape[1], N, max(Ho, (H - 1) * s + k), max(Wo, (W - 1) * s + k)))
    for a in range(k):
        for b in range(k):
            full[:, :, a : a + (H - 1) * s + 1 : s, b : b + (W - 1) * s + 1 : s] += np.tensordot(
                weight[:, :, a, b], x, axes=(0, 0)
            )
    out = full[:, :, :Ho, :Wo]
    if bias is not None:
        out = out + bias[:, None, None, None]
    return out


def _upconv_bwd(dout, weight, k, s, in_shape):
    C, N, H, W = in_shape
    Co, _, Ho, Wo = dout.shape
    full = np.zeros((Co, N, max(Ho, (H - 1) * s + k), max(Wo, (W - 1) * s + k)))
    full[:, :, :Ho, :Wo] = dout
    dx = np.zeros(in_shape)
    for a in range(k):
        for b in range(k):
            tap = full[:, :, a : a + (H - 1) * s + 1 : s, b : b + (W - 1) * s + 1 : s]
            dx += np.tensordot(weight[:, :, a, b], tap, axes=(1, 0))
    return dx


def _pool_windows(x, k):
    C, N, H, W = x.shape
    return (
        x.reshape(C, N, H // k, k, W // k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(C, N, H // k, W // k, k * k)
    )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_batch(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image[None, None]
    if image.ndim == 3:  # (N, H, W)
        return image[None]
    raise ValueError(f"expected an (h, w) or (n, h, w) image, got shape {image.shape}")


@dataclass
class ForwardResult:
    outputs: dict  # node id -> activation (C, N, H, W)
    caches: dict

    def terminal(self, graph: NetworkGraph) -> np.ndarray:
        return self.outputs[graph.terminal.id]


def forward(graph: NetworkGraph, weights: WeightSet, image: np.ndarray, keep: bool = True, retain=()) -> ForwardResult:
    """Run ``graph`` on an ``(h, w)`` image or an ``(n, h, w)`` batch.

    With ``keep=False`` intermediates other than ``retain`` are dropped as
    soon as no later node reads them (backward is then impossible).
    """
    x = _as_batch(image)
    h, w, _ = graph.input_shape
    if x.shape[2:] != (h, w):
        raise ValueError(f"input is {x.shape[2]}x{x.shape[3]}, graph expects {h}x{w}")
    remaining = {nid: len(c) for nid, c in graph.consumers().items()}
    outs: dict = {}
    caches: dict = {}
    for n in graph.nodes:
        p = weights.params.get(n.id, {})
        ins = [outs[i] for i in n.inputs]
        if n.op == "input":
            y = x
        elif n.op == "conv":
            y = _conv_fwd(ins[0], p["weight"], p.get("bias"), n.kernel, n.stride)
        elif n.op == "upconv":
            y = _upconv_fwd(ins[0], p["weight"], p.get("bias"), n.kernel, n.stride)
        elif n.op == "bn":
            y = ins[0] * p["scale"][:, None, None, None] + p["shift"][:, None, None, None]
        elif n.op == "relu":
            y = np.maximum(ins[0], 0.0)
        elif n.op == "sigmoid":
            y = _sigmoid(ins[0])
        elif n.op == "maxpool":
            win = _pool_windows(ins[0], n.kernel)
            y = win.max(axis=-1)
            if keep:
                caches[n.id] = win.argmax(axis=-1)
        elif n.op == "concat":
            y = np.concatenate(ins, axis=0)
        elif n.op == "add":
            y = ins[0] + ins[1]
        elif n.op == "mul":
            y = ins[0] * ins[1]
        elif n.op == "attention":
            skip, gate = ins
            u = (
                np.tensordot(p["wx"], skip, axes=(1, 0))
                + np.tensordot(p["wg"], gate, axes=(1, 0))
                + (p["bx"] + p["bg"])[:, None, None, None]
            )
            a = np.maximum(u, 0.0)
            psi = _sigmoid(np.tensordot(p["wpsi"], a, axes=(1, 0)) + p["bpsi"][:, None, None, None])
            y = skip * psi
            if keep:
                caches[n.id] = (u, a, psi)
        else:
            raise ValueError(f"unsupported op {n.op!r}")
        outs[n.id] = y
        if not keep:
            for i in n.inputs:
                remaining[i] -= 1
                if remaining[i] == 0 and i not in retain:
                    del outs[i]
    return ForwardResult(outs, caches)


def backward(graph: NetworkGraph, weights: WeightSet, fwd: ForwardResult, seed_node: int, seed_grad: np.ndarray) -> np.ndarray:
    """Reverse-mode pass from ``seed_grad`` at ``seed_node`` back to the input.

    Returns the input gradient with shape ``(N, H, W)``.
    """
    grads: dict = {seed_node: seed_grad}
    for n in reversed(graph.nodes):
        if n.op == "input" or n.id not in grads:
            continue
        g = grads.pop(n.id)
        p = weights.params.get(n.id, {})
        ins = [fwd.outputs[i] for i in n.inputs]
        if n.op == "conv":
            dins = [_conv_bwd(g, p["weight"], n.kernel, n.stride, ins[0].shape)]
        elif n.op == "upconv":
            dins = [_upconv_bwd(g, p["weight"], n.kernel, n.stride, ins[0].shape)]
        elif n.op == "bn":
            dins = [g * p["scale"][:, None, None, None]]
        elif n.op == "relu":
            dins = [g * (ins[0] > 0)]
        elif n.op == "sigmoid":
            y = fwd.outputs[n.id]
            dins = [g * y * (1.0 - y)]
        elif n.op == "maxpool":
            k = n.kernel
            idx = fwd.caches[n.id]
            C, N, h, w = g.shape
            dwin = np.zeros((C, N, h, w, k * k))
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dins = [
                dwin.reshape(C, N, h, w, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(C, N, h * k, w * k)
            ]
        elif n.op == "concat":
            ca = ins[0].shape[0]
            dins = [g[:ca], g[ca:]]
        elif n.op == "add":
            dins = [g, g]
        elif n.op == "mul":
            dins = [g * ins[1], g * ins[0]]
        elif n.op == "attention":
            skip, gate = ins
            u, a, psi = fwd.caches[n.id]
            dskip = g * psi
            dpsi = (g * skip).sum(axis=0, keepdims=True)
            dz = dpsi * psi * (1.0 - psi)
            du = np.tensordot(p["wpsi"], dz, axes=(0, 0)) * (u > 0)
            dskip = dskip + np.tensordot(p["wx"], du, axes=(0, 0))
            dgate = np.tensordot(p["wg"], du, axes=(0, 0))
            dins = [dskip, dgate]
        else:
            raise ValueError(f"unsupported op {n.op!r}")
        for i, d in zip(n.inputs, dins):
            grads[i] = grads[i] + d if i in grads else d
    src = graph.nodes[0].id
    if src not in grads:
        return np.zeros(fwd.outputs[src].shape[1:])
    return grads[src][0]


# --- effective receptive field ----------------------------------------------


@dataclass(frozen=True)
class ERFGrid:
    box: RFBox
    values: np.ndarray
    target: tuple[int, int]

    def __post_init__(self):
        if self.values.shape != (self.box.height, self.box.width):
            raise ValueError("ERF values do not match the box extents")


def _logit_node(graph: NetworkGraph, post_sigmoid: bool) -> int:
    term = graph.terminal
    if term.op == "sigmoid" and not post_sigmoid:
        return term.inputs[0]
    return term.id


def resolve_target(graph: NetworkGraph, target) -> tuple[int, int]:
    """Map ``"center"`` or an (i, j) pair onto output coordinates."""
    shp = graph.shapes()[graph.terminal.id]
    H, W = shp[1], shp[2]
    if target is None or target == "center":
        return H // 2, W // 2
    i, j = target
    if not (0 <= i < H and 0 <= j < W):
        raise ValueError(f"target {target} outside the {H}x{W} output")
    return int(i), int(j)


def input_gradient(graph, weights, image, target="center", post_sigmoid=False) -> np.ndarray:
    """Exact derivative of one output pixel with respect to every input pixel."""
    ti, tj = resolve_target(graph, target)
    node = _logit_node(graph, post_sigmoid)
    fwd = forward(graph, weights, image)
    out = fwd.outputs[node]
    seed = np.zeros_like(out)
    seed[0, 0, ti, tj] = 1.0
    return backward(graph, weights, fwd, node, seed)[0]


def compute_erf(graph, weights, image, target="center", post_sigmoid=False) -> ERFGrid:
    """Gradient of the target output pixel, cropped to that pixel's TRF box.

    By default the derivative is taken at the logit feeding a terminal
    sigmoid; ``post_sigmoid=True`` differentiates the probability instead.
    """
    ti, tj = resolve_target(graph, target)
    grad = input_gradient(graph, weights, image, (ti, tj), post_sigmoid)
    boxes = propagate(graph)[graph.terminal.id]
    box = boxes.box(ti, tj)
    vals = grad[box.top : box.bottom + 1, box.left : box.right + 1].copy()
    return ERFGrid(box, vals, (ti, tj))


def default_input(graph: NetworkGraph, seed: int) -> np.ndarray:
    """U(0, 1) noise image used when no dataset image is supplied."""
    h, w, _ = graph.input_shape
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(h, w))


# --- oracles -----------------------------------------------------------------


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def nan_poison_map(graph, weights, image, chunk: int = 64, post_sigmoid: bool = False) -> np.ndarray:
    """Boolean ``(h, w, H, W)`` map: input pixel p poisons output pixel q.

    Each input pixel is set to NaN in its own batch element; NaN survives
    every layer (including max pooling), so an output turns NaN exactly when
    it structurally depends on that pixel.
    """
    base = np.asarray(image, dtype=np.float64)
    h, w = base.shape
    node = _logit_node(graph, post_sigmoid)
    flat = np.arange(h * w)

    def run(bounds):
        lo, hi = bounds
        batch = np.repeat(base[None], hi - lo, axis=0)
        batch[np.arange(hi - lo), flat[lo:hi] // w, flat[lo:hi] % w] = np.nan
        out = forward(graph, weights, batch, keep=False, retain=(node,)).outputs[node]
        return lo, np.isnan(out).any(axis=0)

    pieces = list(_chunks(h * w, chunk))
    workers = min(worker_count(), len(pieces))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, pieces))
    else:
        results = [run(b) for b in pieces]
    first = results[0][1]
    dep = np.zeros((h * w,) + first.shape[1:], dtype=bool)
    for lo, flags in sorted(results, key=lambda r: r[0]):
        dep[lo : lo + flags.shape[0]] = flags
    return dep.reshape(h, w, *first.shape[1:])


def nan_poison_dependency(graph, weights, image, target="center", post_sigmoid=False) -> set[tuple[int, int]]:
    """Input pixels whose NaN poisoning reaches the target output pixel."""
    ti, tj = resolve_target(graph, target)
    dep = nan_poison_map(graph, weights, image, post_sigmoid=post_sigmoid)
    ii, jj = np.nonzero(dep[:, :, ti, tj])
    return set(zip(ii.tolist(), jj.tolist()))


def finite_difference_gradient(graph, weights, image, target="center", step=1e-5, post_sigmoid=False, chunk=128):
    """Central differences of the target output with respect to each input pixel."""
    ti, tj = resolve_target(graph, target)
    base = np.asarray(image, dtype=np.float64)
    h, w = base.shape
    node = _logit_node(graph, post_sigmoid)
    grad = np.empty(h * w)
    flat = np.arange(h * w)
    for lo, hi in _chunks(h * w, chunk):
        m = hi - lo
        batch = np.repeat(base[None], 2 * m, axis=0)
        rows, cols = flat[lo:hi] // w, flat[lo:hi] % w
        batch[np.arange(m), rows, cols] += step
        batch[m + np.arange(m), rows, cols] -= step
        out = forward(graph, weights, batch, keep=False, retain=(node,)).outputs[node][0, :, ti, tj]
        grad[lo:hi] = (out[:m] - out[m:]) / (2 * step)
    return grad.reshape(h, w)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def kink_margin(graph, weights, image) -> float:
    """Distance of ``image`` from the nearest non-differentiable point.

    The smallest |pre-activation| over ReLU units (attention gates included)
    and the smallest gap between the two largest values of any max-pool
    window. Exact zeros are skipped: they come from units that are already
    dead upstream and stay put under small perturbations. Finite differences
    are only meaningful when the margin exceeds the step.
    """
    fwd = forward(graph, weights, image)
    gaps = []
    for n in graph.nodes:
        if n.op == "relu":
            gaps.append(np.abs(fwd.outputs[n.inputs[0]]).ravel())
        elif n.op == "attention":
            gaps.append(np.abs(fwd.caches[n.id][0]).ravel())
        elif n.op == "maxpool":
            win = np.sort(_pool_windows(fwd.outputs[n.inputs[0]], n.kernel), axis=-1)
            gaps.append((win[..., -1] - win[..., -2]).ravel())
    vals = np.concatenate(gaps) if gaps else np.empty(0)
    vals = vals[vals > 0]
    return float(vals.min()) if vals.size else np.inf
