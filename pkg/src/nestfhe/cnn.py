"""Layer composition and encrypted inference for small CNNs.

A network is a list of ``LayerSpec``.  Every linear layer (conv, dwconv,
downsample_conv) runs fused with StoC2 on nested ciphertexts and is followed
by a bootstrap; activation, bias, masking and any change of layout happen on
the split slot form between ModEval and StoC1.  avgpool is only supported
directly before the final fc, where it is folded into the fc weights.
"""

from __future__ import annotations

import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bootstrap import (BootstrapPlan, OracleModEval, PolyModEval, bootstrap_to_slots, conv_fused_blocked,
                        fuse_conv_blocks, fuse_dw_kernel, make_split, normalize_scale, stoc1)
from .ckks import Ciphertext, CkksContext, Evaluator, LevelError, ScaleError, TagError
from .conv import (FeatureMapLayout, KernelTensor, LayoutError, RelayoutMap, avgpool_reference,
                   build_relayout, conv2d_reference, decompose_image, decompose_kernel, dump_kernel,
                   dwconv2d_reference, pack_dw_kernel, pack_image, read_kernel_file, relayout,
                   slot_of_real)
from .encoding import SLOT
from .linalg import PlanError, matvec_bsgs, plan_for, rect_diagonals, rotate_sum, rotate_sum_keys, rotation_keys
from .ring import RingParams

KINDS = ("conv", "dwconv", "downsample_conv", "avgpool", "square_activation", "fc", "residual_add")
LINEAR = ("conv", "dwconv", "downsample_conv")
_ALIASES = {"square": "square_activation", "relu2": "square_activation", "residual": "residual_add"}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    c_in: int
    c_out: int
    f: int = 1
    s: int = 1
    w: int = 0
    name: str = ""
    weights: str | None = None
    bias: str | None = None
    skip: str | None = None

    @property
    def out_width(self) -> int:
        if self.kind in ("downsample_conv", "avgpool"):
            return self.w // self.s
        if self.kind == "fc":
            return 1
        return self.w


@dataclass
class Network:
    in_channels: int
    in_width: int
    layers: list[LayerSpec]
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> "Network":
        _fill_widths(self)
        c, w = self.in_channels, self.in_width
        inputs: dict[str, tuple[int, int]] = {}
        names = set()
        for i, L in enumerate(self.layers):
            if L.kind not in KINDS:
                raise PlanError(f"layer {i}: unknown kind {L.kind!r}")
            if L.name:
                if L.name in names:
                    raise PlanError(f"duplicate layer name {L.name!r}")
                names.add(L.name)
                inputs[L.name] = (c, w)
            if L.kind == "fc":
                if L.c_in != c * w * w:
                    raise PlanError(f"layer {i}: fc expects {c * w * w} inputs, got {L.c_in}")
            elif L.c_in != c or (L.w and L.w != w):
                raise PlanError(f"layer {i} ({L.kind}) expects {L.c_in}x{L.w}, previous gives {c}x{w}")
            if L.kind in ("dwconv", "square_activation", "avgpool", "residual_add") and L.c_out != L.c_in:
                raise PlanError(f"layer {i}: {L.kind} keeps the channel count")
            if L.kind in ("downsample_conv", "avgpool") and w % L.s:
                raise PlanError(f"layer {i}: stride {L.s} does not divide width {w}")
            if L.kind == "residual_add":
                if L.skip not in inputs:
                    raise PlanError(f"layer {i}: unknown skip source {L.skip!r}")
                if inputs[L.skip] != (c, w):
                    raise PlanError(f"layer {i}: skip shape {inputs[L.skip]} != {(c, w)}")
            if L.kind in LINEAR or L.kind == "fc":
                key = L.name or str(i)
                if key not in self.weights:
                    raise PlanError(f"layer {i}: no weights for {key!r}")
                want = {"conv": (L.c_out, L.c_in, L.f, L.f), "downsample_conv": (L.c_out, L.c_in, L.f, L.f),
                        "dwconv": (L.c_in, L.f, L.f), "fc": (L.c_out, L.c_in)}[L.kind]
                if self.weights[key].shape != want:
                    raise PlanError(f"layer {i}: weights {self.weights[key].shape}, expected {want}")
            c = L.c_out
            w = L.out_width
        return self

    def key(self, i: int) -> str:
        return self.layers[i].name or str(i)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].c_out if self.layers else self.in_channels


def _with_w(L: LayerSpec, w: int) -> LayerSpec:
    return LayerSpec(L.kind, L.c_in, L.c_out, L.f, L.s, w, L.name, L.weights, L.bias, L.skip)


def _fill_widths(net: Network) -> Network:
    w = net.in_width
    out = []
    for L in net.layers:
        L2 = L if L.w else _with_w(L, w)
        out.append(L2)
        w = L2.out_width if L2.kind != "fc" else 1
    net.layers = out
    return net


# config ------------------------------------------------------------------------------------------


def _load_array(path: Path, kind: str) -> np.ndarray:
    k = read_kernel_file(path).weights
    if kind == "dwconv":
        return k[:, 0]
    if kind in ("fc", "bias"):
        return k[:, :, 0, 0] if kind == "fc" else k.reshape(-1)
    return k


def parse_network(text: str, base_dir: str | Path | None = None) -> Network:
    """One layer per line: ``kind key=value ...``; the first entry is ``input channels=.. width=..``.

    Weight and bias paths are kernel files (see ``conv.dump_kernel``), relative
    to ``base_dir``.  dwconv weights are stored as [C][1][f][f], fc weights as
    [out][in][1][1] and biases as [out][1][1][1].
    """
    base = Path(base_dir) if base_dir is not None else Path(".")
    net = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = shlex.split(line)
        kind = _ALIASES.get(toks[0].lower(), toks[0].lower())
        kv = {}
        for t in toks[1:]:
            if "=" not in t:
                raise PlanError(f"line {lineno}: expected key=value, got {t!r}")
            k, v = t.split("=", 1)
            kv[k.strip().lower()] = v.strip()
        if kind == "input":
            net = Network(int(kv["channels"]), int(kv["width"]), [])
            continue
        if net is None:
            raise PlanError("the first entry must be 'input'")
        if kind not in KINDS:
            raise PlanError(f"line {lineno}: unknown layer kind {toks[0]!r}")
        prev_c = net.layers[-1].c_out if net.layers else net.in_channels
        c_in = int(kv.get("c_in", prev_c))
        c_out = int(kv.get("c_out", c_in))
        s = int(kv.get("s", kv.get("window", 2 if kind == "avgpool" else 1)))
        f = int(kv.get("f", s if kind == "avgpool" else 1))
        L = LayerSpec(kind, c_in, c_out, f, s, int(kv.get("w", 0)), kv.get("name", ""),
                      kv.get("weights"), kv.get("bias"), kv.get("from", kv.get("skip")))
        key = L.name or str(len(net.layers))
        if L.weights:
            net.weights[key] = _load_array(base / L.weights, kind)
        if L.bias:
            net.biases[key] = _load_array(base / L.bias, "bias")
        net.layers.append(L)
    if net is None:
        raise PlanError("empty network description")
    return _fill_widths(net).validate()


def save_network(net: Network, directory: str | Path) -> Path:
    """Write a config plus weight files that ``parse_network`` reads back."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"input channels={net.in_channels} width={net.in_width}"]
    for i, L in enumerate(net.layers):
        key = net.key(i)
        parts = [L.kind, f"c_in={L.c_in}", f"c_out={L.c_out}", f"f={L.f}", f"s={L.s}"]
        if L.name:
            parts.append(f"name={L.name}")
        if L.skip:
            parts.append(f"from={L.skip}")
        if key in net.weights:
            w = net.weights[key]
            arr = {"dwconv": lambda a: a[:, None], "fc": lambda a: a[:, :, None, None]}.get(L.kind, lambda a: a)(w)
            fn = f"{key}.w.bin"
            (d / fn).write_bytes(dump_kernel(KernelTensor(arr)))
            parts.append(f"weights={fn}")
        if key in net.biases:
            fn = f"{key}.b.bin"
            (d / fn).write_bytes(dump_kernel(KernelTensor(net.biases[key].reshape(-1, 1, 1, 1))))
            parts.append(f"bias={fn}")
        lines.append(" ".join(parts))
    path = d / "network.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def fold_batchnorm(weights: np.ndarray, bias: np.ndarray | None, gamma, beta, mean, var,
                   eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Fold y = gamma (conv(x) + b - mean) / sqrt(var + eps) + beta into the conv."""
    g = np.asarray(gamma) / np.sqrt(np.asarray(var) + eps)
    w = np.asarray(weights) * g.reshape((-1,) + (1,) * (np.ndim(weights) - 1))
    b0 = np.zeros(len(g)) if bias is None else np.asarray(bias)
    return w, (b0 - np.asarray(mean)) * g + np.asarray(beta)


# float reference ------------------------------------------------------------------------------


def reference_inference(net: Network, image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    seen: dict[str, np.ndarray] = {}
    for i, L in enumerate(net.layers):
        key = net.key(i)
        if L.name:
            seen[L.name] = x
        if L.kind in ("conv", "downsample_conv"):
            x = conv2d_reference(x, KernelTensor(net.weights[key], L.s))
        elif L.kind == "dwconv":
            x = dwconv2d_reference(x, net.weights[key])
        elif L.kind == "square_activation":
            x = x * x
        elif L.kind == "avgpool":
            x = avgpool_reference(x, L.s)
        elif L.kind == "fc":
            x = net.weights[key] @ x.reshape(-1)
        elif L.kind == "residual_add":
            x = x + seen[L.skip]
        if key in net.biases:
            b = net.biases[key]
            x = x + (b[:, None, None] if x.ndim == 3 else b)
    return x


def toy_network(seed: int = 0, channels: int = 4, width: int = 16, classes: int = 10) -> Network:
    """conv3x3 -> x^2 -> downsample conv3x3/2 -> x^2 -> avgpool2 -> fc."""
    rng = np.random.default_rng(seed)
    c1, c2 = 2 * channels, 4 * channels
    w2 = width // 2
    feat = c2 * (w2 // 2) ** 2
    layers = [
        LayerSpec("conv", channels, c1, 3, 1, width, "conv1"),
        LayerSpec("square_activation", c1, c1, 1, 1, width),
        LayerSpec("downsample_conv", c1, c2, 3, 2, width, "conv2"),
        LayerSpec("square_activation", c2, c2, 1, 1, w2),
        LayerSpec("avgpool", c2, c2, 2, 2, w2),
        LayerSpec("fc", feat, classes, 1, 1, w2 // 2, "fc"),
    ]
    weights = {
        "conv1": rng.normal(size=(c1, channels, 3, 3)) / math.sqrt(9 * channels),
        "conv2": rng.normal(size=(c2, c1, 3, 3)) / math.sqrt(9 * c1),
        "fc": rng.normal(size=(classes, feat)) / math.sqrt(feat),
    }
    biases = {"conv1": rng.normal(size=c1) * 0.1, "conv2": rng.normal(size=c2) * 0.1, "fc": rng.normal(size=classes) * 0.1}
    return Network(channels, width, layers, weights, biases).validate()


# encrypted operations ----------------------------------------------------------------------


def square_activation(ev: Evaluator, ct: Ciphertext) -> Ciphertext:
    if ct.tag != SLOT:
        raise TagError(f"square activation needs slot semantics, got {ct.tag}")
    if ct.level < 1:
        raise LevelError("square activation at level 0")
    return ev.rescale(ev.square(ct))


def residual_add(ev: Evaluator, main: Ciphertext, skip: Ciphertext) -> Ciphertext:
    """Elementwise sum after dropping the deeper operand to the common level."""
    lv = min(main.level, skip.level)
    a = ev.drop_level(main, lv)
    b = ev.drop_level(skip, lv)
    if a.tag != b.tag:
        raise TagError(f"residual operands disagree: {a.tag} vs {b.tag}")
    if not math.isclose(a.scale, b.scale, rel_tol=1e-9):
        raise ScaleError(f"cannot align scales {a.scale:.6g} and {b.scale:.6g}")
    return ev.add(a, b)


# planning ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class MapView:
    """Logical pixel (ch, r, c) lives at physical (sel*r, sel*c) of ``layout``."""

    layout: FeatureMapLayout
    w0: int
    channels: int
    sel: int = 1

    def index(self, ch: int, r: int, c: int) -> tuple[int, int]:
        return self.layout.pixel_index(ch, self.sel * r, self.sel * c)

    def all_pixels(self):
        for ch in range(self.channels):
            for r in range(self.w0):
                for c in range(self.w0):
                    yield ch, r, c


def _relayout_maps(view: MapView, num_inputs: int, dst: FeatureMapLayout,
                   target: Callable[[int, int, int], tuple[int, int, int]]) -> list[RelayoutMap]:
    """One map per destination ciphertext; target maps logical pixels into ``dst``."""
    groups: dict[int, dict[int, tuple[list, list]]] = {}
    for ch, r, c in view.all_pixels():
        q, si = view.index(ch, r, c)
        dq, di = dst.pixel_index(*target(ch, r, c))
        g = groups.setdefault(dq, {}).setdefault(q, ([], []))
        g[0].append(si)
        g[1].append(di)
    n = dst.ring_degree // 2
    maps = []
    for dq in range(dst.num_cts):
        moves = [(q, np.array(s), np.array(d)) for q, (s, d) in sorted(groups.get(dq, {}).items())]
        if not moves:
            raise LayoutError(f"destination ciphertext {dq} receives nothing")
        rm = build_relayout(n, [view.layout.slice_real] * num_inputs, dst.slice_real, moves)
        rm.mats += [[None, None] for _ in range(num_inputs - len(rm.mats))]
        maps.append(rm)
    return maps


def _split_vector(view: MapView, values: Callable[[int, int, int], float], num_cts: int) -> list[tuple[np.ndarray, np.ndarray]]:
    n = view.layout.ring_degree // 2
    out = [(np.zeros(n), np.zeros(n)) for _ in range(num_cts)]
    for ch, r, c in view.all_pixels():
        q, idx = view.index(ch, r, c)
        slot, part = slot_of_real(np.array([idx]), view.layout.slice_real)
        out[q][int(part[0])][int(slot[0])] += values(ch, r, c)
    return out


@dataclass
class Stage:
    layer: LayerSpec
    key: str
    in_layout: FeatureMapLayout
    blocks: dict
    num_out: int
    view: MapView
    flow: str = ""
    bias: np.ndarray | None = None
    square: bool = False
    skip: str | None = None
    skip_blocks: dict | None = None
    next_layout: FeatureMapLayout | None = None
    relayouts: list[RelayoutMap] = field(default_factory=list)
    fc: dict | None = None

    def rotations(self) -> set[int]:
        out: set[int] = set()
        for k in self.blocks.values():
            out.update(k.rotations())
        for k in (self.skip_blocks or {}).values():
            out.update(k.rotations())
        for rm in self.relayouts:
            out.update(rm.rotations())
        if self.fc:
            for row in self.fc["mats"]:
                for m in row:
                    if m is not None:
                        out.update(rotation_keys(m, plan_for(m)))
            out.update(rotate_sum_keys(self.fc["d"], self.fc["count"]))
        return out


@dataclass
class NetworkPlan:
    network: Network
    params: RingParams
    input_layout: FeatureMapLayout
    input_decomposed: int
    stages: list[Stage]
    bootstrap: BootstrapPlan
    conv_level: int = 1
    levels: list[dict] = field(default_factory=list)

    @property
    def predicted_bootstraps(self) -> int:
        return sum(s.num_out for s in self.stages)

    def rotations(self) -> set[int]:
        out: set[int] = set()
        for st in self.bootstrap.split.ctos:
            out.update(st.rotations())
        for s in self.stages:
            out |= s.rotations()
            if s.next_layout is not None:
                out |= make_split(self.params.ring_degree, s.next_layout.slice_len).rotations(include_ctos=False)
        return out


def _canvas(w0: int, reach: int, channels: int, N: int) -> FeatureMapLayout:
    lay = FeatureMapLayout.fit(w0, channels, N, reach)
    if lay.w * lay.w > N:
        raise PlanError(f"{w0}x{w0} with reach {reach} does not fit N={N}")
    return lay


def _kernel_of(net: Network, i: int) -> KernelTensor:
    L = net.layers[i]
    w = net.weights[net.key(i)]
    if L.kind == "dwconv":
        full = np.zeros((L.c_in, L.c_in, L.f, L.f))
        full[np.arange(L.c_in), np.arange(L.c_in)] = w
        return KernelTensor(full, 1)
    return KernelTensor(w, L.s)


def _consumer_layout(net: Network, j: int, view_w0: int, N: int, flow: str):
    """Input layout for linear layer j and the logical-pixel target map into it."""
    L = net.layers[j]
    K = _kernel_of(net, j)
    if L.kind == "downsample_conv" and flow == "decomposed":
        base = _canvas(view_w0, K.reach, L.c_in, N)
        if base.w % L.s:
            raise PlanError("canvas not divisible by the stride")
        dst = base.strided(L.s)
        dst.check_reach(decompose_kernel(K).reach)
        s = L.s
        return dst, (lambda ch, r, c: (ch * s * s + (r % s) * s + (c % s), r // s, c // s))
    dst = _canvas(view_w0, K.reach, L.c_in, N)
    return dst, (lambda ch, r, c: (ch, r, c))


def plan_network(net: Network, params: RingParams, modeval: str = "oracle", flow: str = "decomposed",
                 bootstrap: BootstrapPlan | None = None) -> NetworkPlan:
    """Static plan: layouts, fused kernels, relayout maps and level budgets.

    ``flow`` picks the downsampling schedule: "decomposed" splits the input
    into stride phases before the conv, "densify" runs the conv at full
    resolution and gathers the stride grid after bootstrapping, "auto" takes
    whichever bootstraps fewer ciphertexts.
    """
    if flow == "auto":
        plans = [plan_network(net, params, modeval, f, bootstrap) for f in ("decomposed", "densify")]
        return min(plans, key=lambda p: p.predicted_bootstraps)
    if flow not in ("decomposed", "densify"):
        raise PlanError(f"unknown flow {flow!r}")
    net.validate()
    N = params.ring_degree
    layers = net.layers
    if not layers or layers[0].kind not in LINEAR:
        raise PlanError("the network must start with a linear layer")

    # group: linear [residual_add] [square] then the consumer
    groups = []
    i = 0
    while i < len(layers):
        L = layers[i]
        if L.kind not in LINEAR:
            raise PlanError(f"layer {i} ({L.kind}) must follow a linear layer")
        g = {"lin": i, "skip": None, "square": False}
        i += 1
        if i < len(layers) and layers[i].kind == "residual_add":
            g["skip"] = layers[i].skip
            g["skip_layer"] = i
            i += 1
        if i < len(layers) and layers[i].kind == "square_activation":
            g["square"] = True
            i += 1
        if i < len(layers) and layers[i].kind in ("avgpool", "fc"):
            pool = 1
            if layers[i].kind == "avgpool":
                pool = layers[i].s
                i += 1
                if i >= len(layers) or layers[i].kind != "fc":
                    raise PlanError("avgpool is only supported directly before the final fc")
            g["fc"] = (i, pool)
            i += 1
            if i != len(layers):
                raise PlanError("fc must be the last layer")
        groups.append(g)

    first = layers[0]
    K0 = _kernel_of(net, 0)
    if first.kind == "downsample_conv" and flow == "decomposed":
        base = _canvas(net.in_width, K0.reach, first.c_in, N)
        in_layout = base.strided(first.s)
        input_decomposed = first.s
    else:
        in_layout = _canvas(net.in_width, K0.reach, first.c_in, N)
        input_decomposed = 1

    # states fed to named layers (for residual skips): name -> layout
    named_layout: dict[str, FeatureMapLayout] = {}
    stages: list[Stage] = []
    cur = in_layout
    for gi, g in enumerate(groups):
        j = g["lin"]
        L = layers[j]
        key = net.key(j)
        if L.name:
            named_layout[L.name] = cur
        split = make_split(N, cur.slice_len)
        K = _kernel_of(net, j)
        if L.kind == "downsample_conv":
            if flow == "decomposed":
                sub = decompose_kernel(K)
                blocks = fuse_conv_blocks(cur, sub, split, key)
                out_lay = cur.with_channels(L.c_out)
                view = MapView(out_lay, cur.w0, L.c_out, 1)
                st_flow = "decomposed"
            else:
                unit = KernelTensor(K.weights, 1, K.origin)
                blocks = fuse_conv_blocks(cur, unit, split, key)
                out_lay = cur.with_channels(L.c_out)
                view = MapView(out_lay, cur.w0 // L.s, L.c_out, L.s)
                st_flow = "densify"
        elif L.kind == "dwconv":
            blocks = {}
            for b in range(cur.num_cts):
                dk = pack_dw_kernel(cur, net.weights[key], block=b)
                blocks[(b, b)] = fuse_dw_kernel(dk, split, cur.per_ct, f"{key}[{b}]")
            out_lay = cur
            view = MapView(out_lay, cur.w0, L.c_out, 1)
            st_flow = ""
        else:
            blocks = fuse_conv_blocks(cur, K, split, key)
            out_lay = cur.with_channels(L.c_out)
            view = MapView(out_lay, cur.w0, L.c_out, 1)
            st_flow = ""
        st = Stage(L, key, cur, blocks, out_lay.num_cts, view, st_flow,
                   net.biases.get(key), g["square"])
        if g["skip"] is not None:
            src = named_layout.get(g["skip"])
            if src is None or src.with_channels(L.c_out) != out_lay or view.sel != 1:
                raise PlanError(f"residual source {g['skip']!r} is not in the output layout")
            ident = np.zeros((L.c_out, L.c_out, 1, 1))
            ident[np.arange(L.c_out), np.arange(L.c_out)] = 1.0
            st.skip = g["skip"]
            st.skip_blocks = fuse_conv_blocks(src, KernelTensor(ident), split, f"skip:{g['skip']}")
            skb = net.biases.get(net.key(g["skip_layer"]))
            if skb is not None:
                st.bias = skb if st.bias is None else st.bias + skb
        if "fc" in g:
            fi, pool = g["fc"]
            st.fc = _plan_fc(net, fi, pool, view, out_lay.num_cts)
        elif gi + 1 < len(groups):
            nj = groups[gi + 1]["lin"]
            dst, target = _consumer_layout(net, nj, view.w0, N, flow)
            st.next_layout = dst
            st.relayouts = _relayout_maps(view, out_lay.num_cts, dst, target)
            cur = dst
        stages.append(st)

    bplan = bootstrap or default_bootstrap_plan(params, modeval, in_layout.slice_len)
    plan = NetworkPlan(net, params, in_layout, input_decomposed, stages, bplan)
    plan.levels = _level_budget(plan)
    return plan


def _plan_fc(net: Network, fi: int, pool: int, view: MapView, num_cts: int) -> dict:
    L = net.layers[fi]
    W = net.weights[net.key(fi)]
    wp = view.w0 // pool
    C = view.channels
    Wr = W.reshape(L.c_out, C, wp, wp)
    n = view.layout.ring_degree // 2
    dense = [[np.zeros((L.c_out, n)), np.zeros((L.c_out, n))] for _ in range(num_cts)]
    for ch, r, c in view.all_pixels():
        q, idx = view.index(ch, r, c)
        slot, part = slot_of_real(np.array([idx]), view.layout.slice_real)
        dense[q][int(part[0])][:, int(slot[0])] += Wr[:, ch, r // pool, c // pool] / (pool * pool)
    mats = []
    d = 1
    for row in dense:
        mrow = []
        for M in row:
            if np.any(M):
                dm, d = rect_diagonals(M, n)
                mrow.append(dm)
            else:
                mrow.append(None)
        mats.append(mrow)
    bias = net.biases.get(net.key(fi))
    return {"mats": mats, "d": d, "count": n // d, "c_out": L.c_out, "bias": bias}


def default_bootstrap_plan(params: RingParams, modeval: str, slice_len: int, decryptor=None) -> BootstrapPlan:
    split = make_split(params.ring_degree, slice_len)
    if modeval == "oracle":
        return BootstrapPlan(split, _PendingOracle(), raise_ratio=2.0 ** 8, ctos_extra_bits=12)
    if modeval in ("polynomial", "poly"):
        return BootstrapPlan(split, PolyModEval(), raise_ratio=2.0 ** 12, ctos_extra_bits=0)
    raise PlanError(f"unknown ModEval mode {modeval!r}")


class _PendingOracle:
    """Placeholder until a session binds the test decryptor."""

    mode = "oracle"
    levels = 0

    def split(self, *a, **k):
        raise PlanError("oracle ModEval needs the test key; run through InferenceSession")

    __call__ = split


def _level_budget(plan: NetworkPlan) -> list[dict]:
    L = plan.params.max_level
    b = plan.bootstrap
    ctos = b.split.levels["ctos"]
    out = []
    for st in plan.stages:
        row = {"stage": st.key, "conv": 1, "ctos": ctos, "modeval": b.modeval.levels,
               "activation": int(st.square)}
        after = L - ctos - b.modeval.levels - int(st.square)
        if st.fc is not None:
            row["fc"] = 1
            after -= 1
        elif st.next_layout is not None:
            s1 = make_split(plan.params.ring_degree, st.next_layout.slice_len).levels["stoc1"]
            row["relayout"] = 1
            row["stoc1"] = s1
            after -= 1 + s1
            if after < plan.conv_level:
                raise PlanError(f"stage {st.key}: {after} levels left, next conv needs {plan.conv_level}")
        if after < 0:
            raise PlanError(f"stage {st.key}: level budget exhausted")
        row["level_out"] = after
        out.append(row)
    return out


# session --------------------------------------------------------------------------------------


class InferenceSession:
    """Keys, plan and counters for one network; ``run`` takes a plaintext image.

    The session plays both roles: the client encrypts and decrypts, the
    server-side evaluator sees only public material.  With oracle ModEval the
    decryptor is also handed to the bootstrapper (test harness only).
    """

    def __init__(self, net: Network, params: RingParams, modeval: str = "oracle", flow: str = "decomposed",
                 seed: int = 0):
        self.plan = plan_network(net, params, modeval, flow)
        self.params = params
        self.seed = seed
        self.ctx = CkksContext(params, seed=seed, rotations=sorted(self.plan.rotations()), conjugation=True)
        if modeval == "oracle":
            self.plan.bootstrap.modeval = OracleModEval(self.ctx.decryptor, seed=seed + 17)
        self.trace: list[dict] = []

    @property
    def evaluator(self) -> Evaluator:
        return self.ctx.evaluator

    @property
    def counter(self):
        return self.ctx.counter

    def encrypt_input(self, image: np.ndarray) -> list[Ciphertext]:
        x = np.asarray(image, dtype=np.float64)
        if self.plan.input_decomposed > 1:
            x = decompose_image(x, self.plan.input_decomposed)
        ev = self.evaluator
        lay = self.plan.input_layout
        out = []
        for v in pack_image(lay, x):
            pt = ev.encoder.encode_nested_real(v, lay.slice_real, self.plan.conv_level, self.params.scale)
            out.append(ev.encrypt(pt))
        return out

    def _note(self, what: str, level_in: int, cts: Sequence[Ciphertext], before: dict):
        d = self.counter.since(before)
        self.trace.append({"op": what, "level_in": level_in, "level": min(c.level for c in cts), "cts": len(cts),
                           "levels_consumed": d.get("levels_consumed", 0), "hrot": d.get("hrot", 0),
                           "pmult": d.get("pmult", 0), "bootstrapped": d.get("ciphertexts_bootstrapped", 0)})

    def run_encrypted(self, cts: list[Ciphertext]):
        ev = self.evaluator
        plan = self.plan
        saved: dict[str, list[Ciphertext]] = {}
        for st in plan.stages:
            if st.layer.name:
                saved[st.layer.name] = cts
            t0 = self.counter.snapshot()
            x = [ev.drop_level(c, plan.conv_level) for c in cts]
            outs = conv_fused_blocked(ev, x, st.blocks, st.num_out)
            if st.skip is not None:
                sx = [ev.drop_level(c, plan.conv_level) for c in saved[st.skip]]
                souts = conv_fused_blocked(ev, sx, st.skip_blocks, st.num_out)
                outs = [residual_add(ev, a, b) for a, b in zip(outs, souts)]
            self._note(f"{st.key}:conv", plan.conv_level, outs, t0)
            t0 = self.counter.snapshot()
            parts = [bootstrap_to_slots(ev, o, plan.bootstrap, split_parts=True) for o in outs]
            self._note(f"{st.key}:bootstrap", min(o.level for o in outs), [p[0] for p in parts], t0)
            if st.bias is not None:
                parts = self._add_bias(st, parts)
            if st.square:
                t0 = self.counter.snapshot()
                lv = parts[0][0].level
                parts = [(square_activation(ev, a), square_activation(ev, b)) for a, b in parts]
                self._note(f"{st.key}:square", lv, [p[0] for p in parts], t0)
            if st.fc is not None:
                t0 = self.counter.snapshot()
                out = self._fc(st.fc, parts)
                self._note(f"{st.key}:fc", parts[0][0].level, [out], t0)
                return out
            if st.next_layout is None:
                return parts
            t0 = self.counter.snapshot()
            ps = normalize_scale(ev, parts[0][0])
            nxt = [relayout(ev, parts, rm, SLOT, pt_scale=ps) for rm in st.relayouts]
            self._note(f"{st.key}:relayout", parts[0][0].level, nxt, t0)
            t0 = self.counter.snapshot()
            split = make_split(self.params.ring_degree, st.next_layout.slice_len)
            cts = [stoc1(ev, c, split) for c in nxt]
            self._note(f"{st.key}:stoc1", nxt[0].level, cts, t0)
        return cts

    def _add_bias(self, st: Stage, parts):
        ev = self.evaluator
        b = st.bias
        vecs = _split_vector(st.view, lambda ch, r, c: b[ch], len(parts))
        out = []
        for (re, im), (vr, vi) in zip(parts, vecs):
            pr = ev.encoder.encode_slot_vector(vr, SLOT, re.level, re.scale)
            pi = ev.encoder.encode_slot_vector(vi, SLOT, im.level, im.scale)
            out.append((ev.add_plain(re, pr), ev.add_plain(im, pi)))
        return out

    def _fc(self, fc: dict, parts) -> Ciphertext:
        ev = self.evaluator
        acc = None
        for row, pair in zip(fc["mats"], parts):
            for m, ct in zip(row, pair):
                if m is None:
                    continue
                y = matvec_bsgs(ev, ct, m, plan_for(m), rescale=False)
                acc = y if acc is None else ev.add(acc, y)
        acc = rotate_sum(ev, ev.rescale(acc), fc["d"], fc["count"])
        if fc["bias"] is not None:
            v = np.zeros(self.params.slots)
            v[: fc["c_out"]] = fc["bias"]
            acc = ev.add_plain(acc, ev.encoder.encode_slot_vector(v, SLOT, acc.level, acc.scale))
        return acc

    def decrypt_output(self, result) -> np.ndarray:
        dec = self.ctx.decryptor
        if isinstance(result, Ciphertext):
            c_out = self.plan.stages[-1].fc["c_out"]
            return dec.slots(result)[:c_out].real.copy()
        st = self.plan.stages[-1]
        vals = [(dec.slots(a).real, dec.slots(b).real) for a, b in result]
        out = np.zeros((st.view.channels, st.view.w0, st.view.w0))
        for ch, r, c in st.view.all_pixels():
            q, idx = st.view.index(ch, r, c)
            slot, part = slot_of_real(np.array([idx]), st.view.layout.slice_real)
            out[ch, r, c] = vals[q][int(part[0])][int(slot[0])]
        return out

    def run(self, image: np.ndarray) -> np.ndarray:
        self.trace = []
        return self.decrypt_output(self.run_encrypted(self.encrypt_input(image)))


def run_inference(session: InferenceSession, image: np.ndarray) -> np.ndarray:
    return session.run(image)
