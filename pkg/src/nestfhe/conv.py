"""conv2d on nested-encoded ciphertexts plus the slot/coefficient baselines.

Feature maps live on a zero-padded w x w canvas, one channel per real slice of
w*w coefficients.  A 'same' convolution is computed in place: output pixel
(r, c) stays at index r*w + c because tap (dr, dc) is the monomial
X^-(dr*w + dc).  The zero margin between w0 and w absorbs every wraparound
term, so valid pixels are exact.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ckks import Ciphertext, Evaluator, Plaintext
from .encoding import (COEFF, SLOT, EncodingTag, dft_plan, negacyclic_conv, nested,
                       nested_real_slots)
from .linalg import BsgsPlan, DiagonalMatrix, matvec_bsgs, plan_bsgs, plan_for, rotation_keys
from .ring import bit_reverse_perm

Encryptor = Callable[[Plaintext], Ciphertext]


class LayoutError(ValueError):
    pass


def next_pow2(x: int) -> int:
    return 1 << max(0, (int(x) - 1).bit_length())


# kernels ----------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelTensor:
    """Weights [C_out][C_in][f][f]; tap (a, b) reads offset (a - origin, b - origin)."""

    weights: np.ndarray
    stride: int = 1
    origin: int | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise LayoutError("kernel must be [C_out][C_in][f][f]")
        object.__setattr__(self, "weights", w)
        if self.origin is None:
            object.__setattr__(self, "origin", (w.shape[2] - 1) // 2)

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def f(self) -> int:
        return self.weights.shape[2]

    @property
    def reach(self) -> int:
        """Largest |offset| of any tap."""
        return max(self.origin, self.f - 1 - self.origin)

    def offsets(self) -> list[tuple[int, int, int, int]]:
        """(a, b, dr, dc) for every tap."""
        o = self.origin
        return [(a, b, a - o, b - o) for a in range(self.f) for b in range(self.f)]


def dump_kernel(k: KernelTensor) -> bytes:
    head = struct.pack("<4I", k.c_out, k.c_in, k.f, k.stride)
    return head + k.weights.astype("<f8").tobytes()


def load_kernel(data: bytes) -> KernelTensor:
    if len(data) < 16:
        raise LayoutError("truncated kernel header")
    co, ci, f, s = struct.unpack("<4I", data[:16])
    need = co * ci * f * f * 8
    if len(data) - 16 != need:
        raise LayoutError(f"kernel payload is {len(data) - 16} bytes, expected {need}")
    w = np.frombuffer(data[16:], dtype="<f8").reshape(co, ci, f, f)
    return KernelTensor(w.astype(np.float64), s)


def read_kernel_file(path) -> KernelTensor:
    with open(path, "rb") as fh:
        return load_kernel(fh.read())


# layouts ----------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMapLayout:
    """Dense real packing: N // w**2 channels per ciphertext, one per slice."""

    w0: int
    w: int
    channels: int
    ring_degree: int

    def __post_init__(self):
        if self.w & (self.w - 1) or self.w < 1:
            raise LayoutError("canvas width must be a power of two")
        if self.w0 > self.w:
            raise LayoutError("image larger than canvas")
        if self.w * self.w > self.ring_degree:
            raise LayoutError("canvas does not fit the ring")
        if self.channels < 1:
            raise LayoutError("need at least one channel")

    @classmethod
    def fit(cls, w0: int, channels: int, ring_degree: int, reach: int = 1) -> "FeatureMapLayout":
        """Smallest power-of-two canvas leaving ``reach`` zero rows/cols."""
        return cls(w0, next_pow2(w0 + reach), channels, ring_degree)

    @property
    def per_ct(self) -> int:
        return self.ring_degree // (self.w * self.w)

    @property
    def slice_real(self) -> int:
        return self.w * self.w

    @property
    def slice_len(self) -> int:
        return self.w * self.w // 2

    @property
    def tag(self) -> EncodingTag:
        return nested(self.slice_len)

    @property
    def num_cts(self) -> int:
        return -(-self.channels // self.per_ct)

    @property
    def padded_channels(self) -> int:
        return self.num_cts * self.per_ct

    def check_reach(self, reach: int):
        if self.w0 + reach > self.w:
            raise LayoutError(f"canvas {self.w} leaves no room for reach {reach} around {self.w0}")

    def with_channels(self, channels: int) -> "FeatureMapLayout":
        return FeatureMapLayout(self.w0, self.w, channels, self.ring_degree)

    def strided(self, s: int) -> "FeatureMapLayout":
        """Layout of the s-phase decomposition: (w0/s, w/s), channels * s**2."""
        if self.w % s or self.w0 % s:
            raise LayoutError(f"stride {s} does not divide the image/canvas width")
        return FeatureMapLayout(self.w0 // s, self.w // s, self.channels * s * s, self.ring_degree)

    def pixel_index(self, ch: int, r: int, c: int) -> tuple[int, int]:
        """(ciphertext, real index) of a pixel."""
        q, k = divmod(ch, self.per_ct)
        return q, k * self.slice_real + r * self.w + c

    def valid_mask(self) -> np.ndarray:
        m = np.zeros((self.w, self.w), dtype=bool)
        m[: self.w0, : self.w0] = True
        return np.tile(m.reshape(-1), self.per_ct)


def pack_image(layout: FeatureMapLayout, image: np.ndarray) -> list[np.ndarray]:
    """[C][w0][w0] -> flat real vectors of length N, one per ciphertext."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[1:] != (layout.w0, layout.w0):
        raise LayoutError(f"expected [C][{layout.w0}][{layout.w0}], got {img.shape}")
    if img.shape[0] > layout.padded_channels:
        raise LayoutError("channel count overflows the layout")
    canvas = np.zeros((layout.padded_channels, layout.w, layout.w))
    canvas[: img.shape[0], : layout.w0, : layout.w0] = img
    flat = canvas.reshape(layout.num_cts, -1)
    return [row.copy() for row in flat]


def unpack_image(layout: FeatureMapLayout, vecs: Sequence[np.ndarray], channels: int | None = None) -> np.ndarray:
    ch = layout.channels if channels is None else channels
    flat = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in vecs])
    canvas = flat.reshape(-1, layout.w, layout.w)
    return canvas[:ch, : layout.w0, : layout.w0].copy()


def pack_feature_map(ev: Evaluator, encrypt: Encryptor, layout: FeatureMapLayout, image,
                     level: int | None = None, scale: float | None = None) -> list[Ciphertext]:
    out = []
    for v in pack_image(layout, image):
        pt = ev.encoder.encode_nested_real(v, layout.slice_real, level, scale)
        out.append(encrypt(pt))
    return out


def decrypt_feature_map(dec, layout: FeatureMapLayout, cts: Sequence[Ciphertext],
                        channels: int | None = None) -> np.ndarray:
    vecs = [dec.decrypt_decode(ct) for ct in cts]
    return unpack_image(layout, vecs, channels)


# float oracles -------------------------------------------------------------------------


def conv2d_reference(image: np.ndarray, kernel: KernelTensor) -> np.ndarray:
    """Zero-padded cross-correlation; output (r, c) reads input (s*r + dr, s*c + dc)."""
    x = np.asarray(image, dtype=np.float64)
    K = kernel.weights
    s = kernel.stride
    ci, h, wd = x.shape
    if ci != kernel.c_in:
        raise LayoutError("channel mismatch")
    ho, wo = -(-h // s), -(-wd // s)
    pad = kernel.f
    xp = np.zeros((ci, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((kernel.c_out, ho, wo))
    rows = np.arange(ho) * s
    cols = np.arange(wo) * s
    for a, b, dr, dc in kernel.offsets():
        patch = xp[:, pad + dr + rows][:, :, pad + dc + cols]
        out += np.einsum("oi,ihw->ohw", K[:, :, a, b], patch)
    return out


def dwconv2d_reference(image: np.ndarray, weights: np.ndarray, stride: int = 1) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    C = w.shape[0]
    full = np.zeros((C, C) + w.shape[1:])
    full[np.arange(C), np.arange(C)] = w
    return conv2d_reference(image, KernelTensor(full, stride))


def avgpool_reference(image: np.ndarray, window: int) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    C, h, wd = x.shape
    if h % window or wd % window:
        raise LayoutError("window must divide the image")
    return x.reshape(C, h // window, window, wd // window, window).mean(axis=(2, 4))


# kernel polynomials ----------------------------------------------------------------------


def _place(vec: np.ndarray, e: int, value: float):
    """Add value * X^e into a negacyclic coefficient vector."""
    n = vec.size
    e %= 2 * n
    if e >= n:
        vec[e - n] -= value
    else:
        vec[e] += value


def kernel_poly(weights2d: np.ndarray, w: int, origin: int, unit: int = 1, n: int | None = None,
                extra: int = 0) -> np.ndarray:
    """sum_taps K[a,b] X^-(unit*(dr*w + dc) + extra) modulo X^n + 1."""
    f = weights2d.shape[0]
    n = w * w * unit if n is None else n
    out = np.zeros(n)
    for a in range(f):
        for b in range(f):
            v = weights2d[a, b]
            if v:
                _place(out, -(unit * ((a - origin) * w + (b - origin)) + extra), v)
    return out


def layout_conv_oracle(layout: FeatureMapLayout, image: np.ndarray, kernel: KernelTensor,
                       cyclic: bool = False) -> np.ndarray:
    """Plaintext-polynomial simulation of the packed conv, negacyclic or cyclic."""
    x = pack_image(layout.with_channels(kernel.c_in), image)
    x = np.concatenate(x).reshape(-1, layout.slice_real)
    L = layout.slice_real
    out = np.zeros((kernel.c_out, L))
    for m in range(kernel.c_out):
        for nn in range(kernel.c_in):
            k = kernel_poly(kernel.weights[m, nn], layout.w, kernel.origin)
            if cyclic:
                kc = np.zeros(L)
                for a, b, dr, dc in kernel.offsets():
                    kc[(-(dr * layout.w + dc)) % L] += kernel.weights[m, nn, a, b]
                out[m] += np.real(np.fft.ifft(np.fft.fft(x[nn]) * np.fft.fft(kc)))
            else:
                out[m] += negacyclic_conv(x[nn], k)
    return out.reshape(kernel.c_out, layout.w, layout.w)[:, : layout.w0, : layout.w0]


# nested conv2d ------------------------------------------------------------------------------


@dataclass
class PackedKernelDiagonals:
    """Kernel matrix as cyclic diagonals at slice granularity."""

    diag: DiagonalMatrix
    plan: BsgsPlan
    slice_len: int
    channels: int
    provenance: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def plaintext_count(self) -> int:
        return len(self.diag)

    def rotations(self) -> tuple[int, ...]:
        return rotation_keys(self.diag, self.plan)


def _diag_slots(layout: FeatureMapLayout, vec: np.ndarray) -> np.ndarray:
    return nested_real_slots(dft_plan(layout.ring_degree), vec, layout.slice_real)


def pack_conv_kernels(layout: FeatureMapLayout, kernel: KernelTensor, out_block: int = 0,
                      in_block: int = 0, provenance: str = "") -> PackedKernelDiagonals:
    """C x C block (out_block, in_block) of the kernel as slot-domain diagonals."""
    C = layout.per_ct
    layout.check_reach(kernel.reach)
    L = layout.slice_real
    diags: dict[int, np.ndarray] = {}
    for k in range(C):
        vec = np.zeros(layout.ring_degree)
        any_nz = False
        for m in range(C):
            mo = out_block * C + m
            ni = in_block * C + (m + k) % C
            if mo >= kernel.c_out or ni >= kernel.c_in:
                continue
            wk = kernel.weights[mo, ni]
            if not np.any(wk):
                continue
            vec[m * L:(m + 1) * L] = kernel_poly(wk, layout.w, kernel.origin)
            any_nz = True
        if any_nz:
            diags[k * layout.slice_len] = _diag_slots(layout, vec)
    dm = DiagonalMatrix(layout.ring_degree // 2, diags)
    plan = _conv_plan(dm, C, layout.slice_len)
    return PackedKernelDiagonals(dm, plan, layout.slice_len, C, provenance)


def _conv_plan(dm: DiagonalMatrix, C: int, slice_len: int) -> BsgsPlan:
    p = plan_bsgs(C, slice_len)
    from .linalg import _flat, _rotations_for
    return BsgsPlan(p.baby, p.giant, slice_len, False,
                    _flat(_rotations_for(dm.offsets, p, dm.dim), dm.dim))


def pack_conv_blocks(layout: FeatureMapLayout, kernel: KernelTensor,
                     provenance: str = "") -> dict[tuple[int, int], PackedKernelDiagonals]:
    C = layout.per_ct
    nob = -(-kernel.c_out // C)
    nib = -(-kernel.c_in // C)
    out = {}
    for ob in range(nob):
        for ib in range(nib):
            blk = kernel.weights[ob * C:(ob + 1) * C, ib * C:(ib + 1) * C]
            if not np.any(blk):
                continue
            out[(ob, ib)] = pack_conv_kernels(layout, kernel, ob, ib, f"{provenance}[{ob},{ib}]")
    return out


def conv2d_nested(ev: Evaluator, ct: Ciphertext, kern: PackedKernelDiagonals,
                  rescale: bool = True) -> Ciphertext:
    if ct.tag != nested(kern.slice_len):
        raise LayoutError(f"conv expects nested({kern.slice_len}), got {ct.tag}")
    return matvec_bsgs(ev, ct, kern.diag, kern.plan, rescale=rescale)


def conv2d_blocked(ev: Evaluator, cts: Sequence[Ciphertext],
                   blocks: dict[tuple[int, int], PackedKernelDiagonals], num_out: int) -> list[Ciphertext]:
    """Block matrix product: output block ob sums conv(ib) over input blocks."""
    outs = []
    for ob in range(num_out):
        acc = None
        for ib, ct in enumerate(cts):
            kern = blocks.get((ob, ib))
            if kern is None:
                continue
            part = conv2d_nested(ev, ct, kern, rescale=False)
            acc = part if acc is None else ev.add(acc, part)
        if acc is None:
            raise LayoutError(f"output block {ob} has no contributing kernels")
        outs.append(ev.rescale(acc))
    return outs


def add_bias(ev: Evaluator, ct: Ciphertext, layout: FeatureMapLayout, bias: np.ndarray,
             block: int = 0) -> Ciphertext:
    C = layout.per_ct
    vec = np.zeros(layout.ring_degree)
    b = np.asarray(bias, dtype=np.float64)
    for m in range(C):
        ch = block * C + m
        if ch < b.size:
            vec[m * layout.slice_real:(m + 1) * layout.slice_real] = b[ch]
    pt = ev.encoder.encode_nested_real(vec, layout.slice_real, ct.level, ct.scale)
    return ev.add_plain(ct, pt)


# depthwise -------------------------------------------------------------------------------


@dataclass
class DwKernel:
    slots: np.ndarray
    slice_len: int


def pack_dw_kernel(layout: FeatureMapLayout, weights: np.ndarray, origin: int | None = None,
                   block: int = 0) -> DwKernel:
    """Per-channel kernels [C][f][f] as one plaintext (k_1 | k_2 | ... | k_C)."""
    w = np.asarray(weights, dtype=np.float64)
    f = w.shape[1]
    o = (f - 1) // 2 if origin is None else origin
    layout.check_reach(max(o, f - 1 - o))
    C = layout.per_ct
    L = layout.slice_real
    vec = np.zeros(layout.ring_degree)
    for m in range(C):
        ch = block * C + m
        if ch < w.shape[0]:
            vec[m * L:(m + 1) * L] = kernel_poly(w[ch], layout.w, o)
    return DwKernel(_diag_slots(layout, vec), layout.slice_len)


def dwconv2d(ev: Evaluator, ct: Ciphertext, kern: DwKernel, rescale: bool = True) -> Ciphertext:
    if ct.tag != nested(kern.slice_len):
        raise LayoutError(f"dwconv expects nested({kern.slice_len}), got {ct.tag}")
    q = float(ev.params.moduli[ct.level])
    pt = ev.encoder.encode_slot_vector(kern.slots, ct.tag, ct.level, q)
    out = ev.mul_plain(ct, pt)
    return ev.rescale(out) if rescale else out


# stride decomposition -----------------------------------------------------------------------


def decompose_image(image: np.ndarray, s: int) -> np.ndarray:
    """[C][h][w] -> [C*s*s][h/s][w/s]; phase (al, be) of channel c is c*s*s + al*s + be."""
    x = np.asarray(image, dtype=np.float64)
    C, h, wd = x.shape
    if h % s or wd % s:
        raise LayoutError(f"stride {s} does not divide {h}x{wd}")
    y = x.reshape(C, h // s, s, wd // s, s).transpose(0, 2, 4, 1, 3)
    return y.reshape(C * s * s, h // s, wd // s)


def compose_image(phases: np.ndarray, s: int) -> np.ndarray:
    p = np.asarray(phases)
    Cs, h, wd = p.shape
    C = Cs // (s * s)
    return p.reshape(C, s, s, h, wd).transpose(0, 3, 1, 4, 2).reshape(C, h * s, wd * s)


def decompose_kernel(kernel: KernelTensor) -> KernelTensor:
    """Strided kernel -> unit-stride kernel over phase channels.

    Tap offset dr splits as s*q + al with al = dr mod s; phases whose tap set is
    short are zero-padded to the common ceil(f/s) footprint.
    """
    s = kernel.stride
    if s == 1:
        return kernel
    o = kernel.origin
    qmin = (-o) // s
    qmax = (kernel.f - 1 - o) // s
    fp = qmax - qmin + 1
    co, ci = kernel.c_out, kernel.c_in
    out = np.zeros((co, ci * s * s, fp, fp))
    for a, b, dr, dc in kernel.offsets():
        qr, al = divmod(dr, s)
        qc, be = divmod(dc, s)
        ph = al * s + be
        out[:, np.arange(ci) * s * s + ph, qr - qmin, qc - qmin] += kernel.weights[:, :, a, b]
    return KernelTensor(out, 1, -qmin)


def downsample_conv2d(ev: Evaluator, phase_cts: Sequence[Ciphertext], layout: FeatureMapLayout,
                      kernel: KernelTensor) -> list[Ciphertext]:
    """Strided conv as a unit-stride conv over the phase channels of ``layout``."""
    sub = decompose_kernel(kernel)
    blocks = pack_conv_blocks(layout, sub, "downsample")
    num_out = -(-kernel.c_out // layout.per_ct)
    return conv2d_blocked(ev, phase_cts, blocks, num_out)


def avgpool_kernel(channels: int, window: int) -> KernelTensor:
    w = np.zeros((channels, channels, window, window))
    w[np.arange(channels), np.arange(channels)] = 1.0 / (window * window)
    return KernelTensor(w, window, 0)


def avgpool(ev: Evaluator, phase_cts: Sequence[Ciphertext], layout: FeatureMapLayout,
            channels: int, window: int) -> list[Ciphertext]:
    """Non-overlapping average pooling on a phase-decomposed input."""
    if window == 1:
        return list(phase_cts)
    return downsample_conv2d(ev, phase_cts, layout, avgpool_kernel(channels, window))


# slot-domain rearrangement ---------------------------------------------------------------------
#
# After CtoS the slot vector of a nested(l) feature map is the folded message in
# block-local bit-reversed order: slot c*l + brv_l(t) holds r_t + i*r_{t+l} of
# slice c.  Splitting into real and imaginary ciphertexts gives two slot
# vectors of plain reals; every rearrangement below is a real-linear map from
# such split vectors to the folded, bit-reversed vector of a target layout.


def slot_of_real(index: np.ndarray, slice_real: int) -> tuple[np.ndarray, np.ndarray]:
    """(slot, part) of real message indices; part 0 = real half, 1 = imaginary half."""
    idx = np.asarray(index, dtype=np.int64)
    l = slice_real // 2
    c, t = np.divmod(idx, slice_real)
    part = (t >= l).astype(np.int64)
    perm = np.asarray(bit_reverse_perm(l), dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(l)
    return c * l + inv[t - part * l], part


@dataclass
class RelayoutMap:
    """y = sum over (input, part) of M[input][part] x[input][part]."""

    mats: list[list[DiagonalMatrix | None]]
    slots: int

    @property
    def num_inputs(self) -> int:
        return len(self.mats)

    def rotations(self) -> tuple[int, ...]:
        out = set()
        for row in self.mats:
            for m in row:
                if m is not None and len(m):
                    out.update(rotation_keys(m, plan_for(m)))
        return tuple(sorted(out))

    def apply(self, xs: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        y = np.zeros(self.slots, dtype=complex)
        for row, x in zip(self.mats, xs):
            for m, v in zip(row, x):
                if m is not None:
                    y += m.apply(v)
        return y


def build_relayout(n: int, src_slice_real: Sequence[int], dst_slice_real: int,
                   moves: Sequence[tuple[int, np.ndarray, np.ndarray]],
                   weights: Sequence[np.ndarray] | None = None) -> RelayoutMap:
    """moves[i] = (input, src real indices, dst real indices)."""
    per: dict[tuple[int, int], list] = {}
    for i, (q, src, dst) in enumerate(moves):
        ss, sp = slot_of_real(src, src_slice_real[q])
        ds, dp = slot_of_real(dst, dst_slice_real)
        coef = np.where(dp == 1, 1j, 1.0)
        if weights is not None:
            coef = coef * np.asarray(weights[i])
        for part in (0, 1):
            sel = sp == part
            per.setdefault((q, part), []).append((ds[sel], ss[sel], coef[sel]))
    nin = max(q for q, _, _ in moves) + 1 if moves else 0
    mats: list[list[DiagonalMatrix | None]] = [[None, None] for _ in range(nin)]
    for (q, part), chunks in per.items():
        d = np.concatenate([c[0] for c in chunks])
        s_ = np.concatenate([c[1] for c in chunks])
        v = np.concatenate([c[2] for c in chunks])
        if d.size:
            mats[q][part] = DiagonalMatrix.from_mapping(n, d, s_, v)
    return RelayoutMap(mats, n)


def relayout(ev: Evaluator, inputs: Sequence[tuple[Ciphertext, Ciphertext]], rmap: RelayoutMap,
             out_tag: EncodingTag = SLOT, pt_scale: float | None = None) -> Ciphertext:
    """Apply a relayout map to split (real, imaginary) slot ciphertexts."""
    acc = None
    for row, pair in zip(rmap.mats, inputs):
        for m, ct in zip(row, pair):
            if m is None or not len(m):
                continue
            part = matvec_bsgs(ev, ct, m, plan_for(m), pt_scale=pt_scale, rescale=False)
            acc = part if acc is None else ev.add(acc, part)
    if acc is None:
        raise LayoutError("relayout map selects nothing")
    return ev.rescale(acc).retag(out_tag)


def identity_moves(layout: FeatureMapLayout, q: int = 0):
    """Valid pixels of ciphertext q to the same positions (masks the margin)."""
    idx = np.flatnonzero(layout.valid_mask())
    return [(q, idx, idx)]


def decompose_moves(src: FeatureMapLayout, s: int, num_inputs: int | None = None):
    """Moves for the s-phase split of every input ciphertext of ``src``."""
    dst = src.strided(s)
    moves = []
    nin = src.num_cts if num_inputs is None else num_inputs
    src_idx: dict[int, list] = {}
    dst_idx: dict[int, list] = {}
    for ch in range(min(src.channels, nin * src.per_ct)):
        for r in range(src.w0):
            for c in range(src.w0):
                q, si = src.pixel_index(ch, r, c)
                pch = ch * s * s + (r % s) * s + (c % s)
                dq, di = dst.pixel_index(pch, r // s, c // s)
                src_idx.setdefault((q, dq), []).append(si)
                dst_idx.setdefault((q, dq), []).append(di)
    per_out: dict[int, list] = {}
    for (q, dq), si in src_idx.items():
        per_out.setdefault(dq, []).append((q, np.array(si), np.array(dst_idx[(q, dq)])))
    for dq in sorted(per_out):
        moves.append(per_out[dq])
    return dst, moves


def densify_moves(src: FeatureMapLayout, s: int, num_inputs: int):
    """Gather the stride-s valid pixels of sparse conv outputs into the phase layout.

    Input ciphertext q holds channels q*C .. (q+1)*C - 1 computed at full
    resolution; only pixels (s*r, s*c) are wanted.  The result follows the
    phase-channel convention with a single phase per channel.
    """
    C = src.per_ct
    w0s = src.w0 // s
    dst = FeatureMapLayout(w0s, src.w // s, src.channels, src.ring_degree)
    per_out: dict[int, list] = {}
    for q in range(num_inputs):
        for k in range(C):
            ch = q * C + k
            if ch >= src.channels:
                break
            si, di = [], []
            for r in range(w0s):
                for c in range(w0s):
                    si.append(src.pixel_index(ch, s * r, s * c)[1])
                    dq, d = dst.pixel_index(ch, r, c)
                    di.append(d)
            per_out.setdefault(dq, []).append((q, np.array(si), np.array(di)))
    return dst, [per_out[k] for k in sorted(per_out)]


def decompose_stride(ev: Evaluator, split_cts: Sequence[tuple[Ciphertext, Ciphertext]],
                     layout: FeatureMapLayout, s: int, pt_scale: float | None = None):
    """Phase split of slot-form feature maps; returns (layout, ciphertexts)."""
    dst, groups = decompose_moves(layout, s, len(split_cts))
    outs = []
    for moves in groups:
        rmap = build_relayout(ev.params.slots, [layout.slice_real] * len(split_cts),
                              dst.slice_real, moves)
        outs.append(relayout(ev, split_cts, rmap, SLOT, pt_scale))
    return dst, outs


def densify(ev: Evaluator, split_cts: Sequence[tuple[Ciphertext, Ciphertext]],
            layout: FeatureMapLayout, s: int, pt_scale: float | None = None):
    """Merge sparse (stride-s valid) slot-form maps into dense ciphertexts."""
    dst, groups = densify_moves(layout, s, len(split_cts))
    outs = []
    for moves in groups:
        rmap = build_relayout(ev.params.slots, [layout.slice_real] * len(split_cts),
                              dst.slice_real, moves)
        outs.append(relayout(ev, split_cts, rmap, SLOT, pt_scale))
    return dst, outs


def extract(ev: Evaluator, ct: Ciphertext, mask: np.ndarray) -> Ciphertext:
    """Masked slot selection with an exact 0/1 plaintext."""
    m = np.asarray(mask, dtype=np.float64)
    if not np.all((m == 0) | (m == 1)):
        raise LayoutError("mask must be 0/1 valued")
    if np.all(m == 1):
        return ct
    q = float(ev.params.moduli[ct.level])
    pt = ev.encoder.encode_slot_vector(m, ct.tag, ct.level, q)
    return ev.rescale(ev.mul_plain(ct, pt))


def split_slot_values(layout: FeatureMapLayout, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Client-side view of a real map in split slot form (for tests and tooling)."""
    n = layout.ring_degree // 2
    idx = np.arange(layout.ring_degree)
    slot, part = slot_of_real(idx, layout.slice_real)
    re = np.zeros(n)
    im = np.zeros(n)
    v = np.asarray(vec, dtype=np.float64)
    re[slot[part == 0]] = v[part == 0]
    im[slot[part == 1]] = v[part == 1]
    return re, im


def folded_to_real(layout: FeatureMapLayout, z: np.ndarray) -> np.ndarray:
    """Inverse of the folded bit-reversed slot view."""
    idx = np.arange(layout.ring_degree)
    slot, part = slot_of_real(idx, layout.slice_real)
    z = np.asarray(z)
    return np.where(part == 0, z[slot].real, z[slot].imag)


# baselines ------------------------------------------------------------------------------------
#
# Coefficient-encoding baseline: channels interleaved at coefficient pix*C + n;
# one plaintext per output channel, then a packing tree merges the C products
# (each valid only at indices = 0 mod C) into one ciphertext.


def coeff_layout_vector(layout: FeatureMapLayout, image: np.ndarray) -> np.ndarray:
    C = layout.per_ct
    img = np.asarray(image, dtype=np.float64)
    canvas = np.zeros((C, layout.w, layout.w))
    canvas[: img.shape[0], : layout.w0, : layout.w0] = img
    return canvas.reshape(C, -1).T.reshape(-1)


def coeff_layout_unpack(layout: FeatureMapLayout, vec: np.ndarray, channels: int) -> np.ndarray:
    C = layout.per_ct
    canvas = np.asarray(vec).reshape(-1, C).T.reshape(C, layout.w, layout.w)
    return canvas[:channels, : layout.w0, : layout.w0]


def coeff_conv_kernels(layout: FeatureMapLayout, kernel: KernelTensor) -> list[np.ndarray]:
    C = layout.per_ct
    layout.check_reach(kernel.reach)
    N = layout.ring_degree
    out = []
    for m in range(C):
        k = np.zeros(N)
        if m < kernel.c_out:
            for nn in range(min(C, kernel.c_in)):
                k += kernel_poly(kernel.weights[m, nn], layout.w, kernel.origin, unit=C, n=N, extra=nn)
        out.append(k)
    return out


def _monomial_pmult(ev: Evaluator, ct: Ciphertext, k: int) -> Ciphertext:
    """Plaintext multiply by X^k: exact, no rescale needed."""
    ev.counter.bump("pmult")
    return Ciphertext(ct.b.mul_monomial(k), ct.a.mul_monomial(k), ct.level, ct.scale, ct.tag)


def pack_tree_galois(C: int, N: int) -> list[int]:
    out = []
    u = C // 2
    while u >= 1:
        out.append(1 + N // u)
        u //= 2
    return out


def _pack_tree(ev: Evaluator, items: list[Ciphertext], C: int, N: int) -> Ciphertext:
    if len(items) == 1:
        return items[0]
    A = _pack_tree(ev, items[0::2], C, N)
    B = _pack_tree(ev, items[1::2], C, N)
    u = C // len(items)
    xb = _monomial_pmult(ev, B, u)
    t1 = ev.add(A, xb)
    t2 = ev.sub(A, xb)
    return ev.add(t1, ev.apply_galois(t2, 1 + N // u))


def conv2d_coeff(ev: Evaluator, ct: Ciphertext, kernels: Sequence[np.ndarray]) -> Ciphertext:
    """Baseline: C kernel PMults, then C-1 merges (monomial PMult + automorphism)."""
    C = len(kernels)
    N = ev.params.ring_degree
    if C & (C - 1) or C * C > N:
        raise LayoutError("packing tree needs a power-of-two C with C*C <= N")
    q = float(ev.params.moduli[ct.level])
    prods = []
    for k in kernels:
        pt = ev.encoder.encode_coeffs(k, ct.level, q)
        prods.append(ev.rescale(ev.mul_plain(ct, pt)))
    out = _pack_tree(ev, prods, C, N)
    return Ciphertext(out.b, out.a, out.level, out.scale * C, out.tag)


# Slot-encoding baseline: N/2 slots hold half the data, so a layer is two
# independent row tiles.  Each tile keeps C channel blocks of w*w/2 slots
# (w/2 canvas rows); tiles overlap by the kernel reach so every valid output
# row of a tile depends only on that tile.


@dataclass(frozen=True)
class SlotTiling:
    layout: FeatureMapLayout
    lo: int
    hi: int

    @property
    def rows(self) -> int:
        return self.layout.w // 2

    @property
    def valid_rows(self) -> int:
        return self.rows - self.lo - self.hi

    @property
    def block(self) -> int:
        return self.layout.w * self.layout.w // 2

    def check(self):
        lay = self.layout
        if 2 * self.valid_rows < lay.w0 or self.valid_rows <= 0:
            raise LayoutError("tiles cannot cover the image at this canvas size")
        lay.check_reach(max(self.lo, self.hi))


def slot_tiling(layout: FeatureMapLayout, kernel: KernelTensor) -> SlotTiling:
    t = SlotTiling(layout, kernel.origin, kernel.f - 1 - kernel.origin)
    t.check()
    return t


def slot_tile_vectors(tiling: SlotTiling, image: np.ndarray) -> list[np.ndarray]:
    lay = tiling.layout
    C = lay.per_ct
    img = np.asarray(image, dtype=np.float64)
    full = np.zeros((C, lay.w0 + 2 * lay.w, lay.w))
    off = lay.w
    full[: img.shape[0], off:off + lay.w0, : lay.w0] = img
    out = []
    for t in range(2):
        r0 = off + t * tiling.valid_rows - tiling.lo
        tile = full[:, r0:r0 + tiling.rows, :]
        out.append(tile.reshape(-1))
    return out


def slot_tile_unpack(tiling: SlotTiling, vecs: Sequence[np.ndarray], channels: int) -> np.ndarray:
    lay = tiling.layout
    C = lay.per_ct
    out = np.zeros((channels, lay.w0, lay.w0))
    for t, v in enumerate(vecs):
        tile = np.asarray(v).real.reshape(C, tiling.rows, lay.w)
        for j in range(tiling.valid_rows):
            r = t * tiling.valid_rows + j
            if r < lay.w0:
                out[:, r, :] = tile[:channels, tiling.lo + j, : lay.w0]
    return out


def slot_conv_plaintexts(tiling: SlotTiling, kernel: KernelTensor, depthwise: bool = False):
    """{(d, shift): slot vector}; d is the channel diagonal, shift the tap rotation."""
    lay = tiling.layout
    C = lay.per_ct
    B = tiling.block
    out = {}
    for a, b, dr, dc in kernel.offsets():
        shift = dr * lay.w + dc
        for d in ([0] if depthwise else range(C)):
            v = np.zeros(C * B)
            nz = False
            for j in range(C):
                m = (j - d) % C
                if m < kernel.c_out and j < kernel.c_in:
                    wv = kernel.weights[m, j, a, b]
                    if wv:
                        v[j * B:(j + 1) * B] = wv
                        nz = True
            if nz:
                out[(d, shift)] = v
    return out


def slot_conv_rotations(tiling: SlotTiling, kernel: KernelTensor, depthwise: bool = False) -> set[int]:
    n = tiling.layout.ring_degree // 2
    B = tiling.block
    rots = {(dr * tiling.layout.w + dc) % n for _, _, dr, dc in kernel.offsets()}
    if not depthwise:
        rots |= {(d * B) % n for d in range(tiling.layout.per_ct)}
    return rots - {0}


def conv2d_slot(ev: Evaluator, cts: Sequence[Ciphertext], tiling: SlotTiling, kernel: KernelTensor,
                depthwise: bool = False) -> list[Ciphertext]:
    """Per tile: tap rotations of the input, channel-diagonal rotations of partial sums."""
    pts = slot_conv_plaintexts(tiling, kernel, depthwise)
    B = tiling.block
    outs = []
    for ct in cts:
        q = float(ev.params.moduli[ct.level])
        taps = {}
        for (_, shift) in pts:
            if shift not in taps:
                taps[shift] = ev.rotate(ct, shift) if shift else ct
        acc = None
        for d in sorted({d for d, _ in pts}):
            part = None
            for (dd, shift), v in pts.items():
                if dd != d:
                    continue
                pt = ev.encoder.encode_slot_vector(v, SLOT, ct.level, q)
                t = ev.mul_plain(taps[shift], pt)
                part = t if part is None else ev.add(part, t)
            if d:
                part = ev.rotate(part, d * B)
            acc = part if acc is None else ev.add(acc, part)
        outs.append(ev.rescale(acc))
    return outs
