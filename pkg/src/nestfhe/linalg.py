"""Diagonal-method matrix-vector products on encrypted slot vectors.

``DiagonalMatrix`` stores cyclic diagonals ``d_k[i] = W[i, (i+k) % M]`` so
that ``W x = sum_k d_k * rot(x, k)`` with ``rot`` a left rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .ckks import Ciphertext, Evaluator


class PlanError(ValueError):
    pass


class DiagonalMatrix:
    def __init__(self, dim: int, diags: Mapping[int, np.ndarray] | None = None):
        self.dim = dim
        self.diags: dict[int, np.ndarray] = {}
        for k, v in (diags or {}).items():
            self.add(k, v)

    def add(self, k: int, v: np.ndarray):
        k %= self.dim
        v = np.asarray(v, dtype=complex)
        if v.shape != (self.dim,):
            raise ValueError("diagonal length must equal the dimension")
        if k in self.diags:
            self.diags[k] = self.diags[k] + v
        else:
            self.diags[k] = v.copy()

    @classmethod
    def from_dense(cls, W: np.ndarray, tol: float = 0.0) -> "DiagonalMatrix":
        W = np.asarray(W)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError("matrix must be square")
        M = W.shape[0]
        i = np.arange(M)
        out = cls(M)
        for k in range(M):
            d = W[i, (i + k) % M]
            if np.any(np.abs(d) > tol):
                out.diags[k] = d.astype(complex)
        return out

    @classmethod
    def from_mapping(cls, dim: int, dst, src, values=None) -> "DiagonalMatrix":
        """Sparse map y[dst] += values * x[src]."""
        dst = np.asarray(dst, dtype=np.int64)
        src = np.asarray(src, dtype=np.int64)
        vals = np.ones(len(dst)) if values is None else np.asarray(values)
        off = (src - dst) % dim
        out = cls(dim)
        for k in np.unique(off):
            sel = off == k
            d = np.zeros(dim, dtype=complex)
            np.add.at(d, dst[sel], vals[sel])
            out.diags[int(k)] = d
        return out

    @classmethod
    def identity(cls, dim: int) -> "DiagonalMatrix":
        return cls(dim, {0: np.ones(dim)})

    def to_dense(self) -> np.ndarray:
        M = self.dim
        W = np.zeros((M, M), dtype=complex)
        i = np.arange(M)
        for k, d in self.diags.items():
            W[i, (i + k) % M] += d
        return W

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=complex)
        y = np.zeros(self.dim, dtype=complex)
        for k, d in self.diags.items():
            y += d * np.roll(x, -k)
        return y

    def __matmul__(self, other: "DiagonalMatrix") -> "DiagonalMatrix":
        if self.dim != other.dim:
            raise ValueError("dimension mismatch")
        out = DiagonalMatrix(self.dim)
        for a, da in self.diags.items():
            for b, db in other.diags.items():
                out.add(a + b, da * np.roll(db, -a))
        return out

    def scaled(self, c: complex) -> "DiagonalMatrix":
        return DiagonalMatrix(self.dim, {k: v * c for k, v in self.diags.items()})

    def row_scaled(self, v: np.ndarray) -> "DiagonalMatrix":
        """diag(v) @ self."""
        return DiagonalMatrix(self.dim, {k: d * v for k, d in self.diags.items()})

    def pruned(self, tol: float = 1e-13) -> "DiagonalMatrix":
        peak = max((np.max(np.abs(d)) for d in self.diags.values()), default=0.0)
        keep = {k: d for k, d in self.diags.items() if np.max(np.abs(d)) > tol * max(peak, 1e-300)}
        return DiagonalMatrix(self.dim, keep)

    @property
    def offsets(self) -> list[int]:
        return sorted(self.diags)

    def __len__(self) -> int:
        return len(self.diags)


def extract_diagonals(W: np.ndarray) -> DiagonalMatrix:
    return DiagonalMatrix.from_dense(W)


# planning -----------------------------------------------------------------------


@dataclass(frozen=True)
class BsgsPlan:
    """Offsets decompose as ``g*B*s + b*s`` with ``0 <= b < B``."""

    baby: int
    giant: int
    spacing: int = 1
    signed: bool = False
    rotations: tuple[int, ...] = field(default=(), compare=False)

    def split(self, offset: int, dim: int) -> tuple[int, int]:
        if offset % self.spacing:
            raise PlanError(f"offset {offset} not a multiple of spacing {self.spacing}")
        u = offset // self.spacing
        units = dim // self.spacing
        if self.signed and u > units // 2:
            u -= units
        g, b = divmod(u, self.baby)
        return g, b

    @property
    def predicted_rotations(self) -> int:
        return self.baby + self.giant - 2


def plan_bsgs(num_diagonals: int, spacing: int = 1) -> BsgsPlan:
    """Minimise B + G with B*G >= M; ties prefer the smaller cover, then B >= G."""
    if num_diagonals < 1:
        raise PlanError("need at least one diagonal")
    M = num_diagonals
    best = None
    for B in range(1, M + 1):
        G = -(-M // B)
        key = (B + G, B * G, -B)
        if best is None or key < best[0]:
            best = (key, B, G)
    _, B, G = best
    rots = tuple(sorted({b * spacing for b in range(1, B)} | {g * B * spacing for g in range(1, G)}))
    return BsgsPlan(B, G, spacing, False, rots)


def _rotations_for(offsets: Iterable[int], plan: BsgsPlan, dim: int) -> tuple[set[int], set[int]]:
    babies, giants = set(), set()
    for k in offsets:
        g, b = plan.split(k, dim)
        if b:
            babies.add(b * plan.spacing)
        if g:
            giants.add((g * plan.baby * plan.spacing) % dim)
    return babies, giants


def plan_for(diag: DiagonalMatrix, spacing: int | None = None) -> BsgsPlan:
    """Plan for an arbitrary offset set: evenly spaced sets use ``plan_bsgs``."""
    offs = diag.offsets
    dim = diag.dim
    if not offs:
        return BsgsPlan(1, 1, 1)
    s = spacing or (math.gcd(*offs, dim) if len(offs) > 1 else (offs[0] or dim))
    units = dim // s
    us = sorted(k // s for k in offs)
    if us == list(range(us[-1] + 1)):
        p = plan_bsgs(len(us), s)
        return BsgsPlan(p.baby, p.giant, s, False, _flat(_rotations_for(offs, p, dim), dim))
    best = None
    B = 1
    while B <= units:
        for signed in (False, True):
            p = BsgsPlan(B, 1, s, signed)
            bb, gg = _rotations_for(offs, p, dim)
            cost = len(bb) + len(gg)
            if best is None or cost < best[0]:
                gcount = len({p.split(k, dim)[0] for k in offs})
                best = (cost, BsgsPlan(B, gcount, s, signed, _flat((bb, gg), dim)))
        B *= 2
    return best[1]


def _flat(pair, dim) -> tuple[int, ...]:
    bb, gg = pair
    return tuple(sorted((set(bb) | set(gg)) - {0}))


def rotation_keys(diag: DiagonalMatrix, plan: BsgsPlan) -> tuple[int, ...]:
    return _flat(_rotations_for(diag.offsets, plan, diag.dim), diag.dim)


# evaluation ---------------------------------------------------------------------


def _tile(v: np.ndarray, n: int) -> np.ndarray:
    if v.size == n:
        return v
    if n % v.size:
        raise PlanError(f"matrix dimension {v.size} does not divide slot count {n}")
    return np.tile(v, n // v.size)


def _encode_diag(ev: Evaluator, ct: Ciphertext, v: np.ndarray, pt_scale: float,
                 cache: dict | None = None, key=None):
    if cache is not None:
        k = (key, ct.level, pt_scale, ct.tag)
        pt = cache.get(k)
        if pt is None:
            pt = cache[k] = ev.encoder.encode_slot_vector(_tile(v, ct.slot_count), ct.tag, ct.level, pt_scale)
        return pt
    return ev.encoder.encode_slot_vector(_tile(v, ct.slot_count), ct.tag, ct.level, pt_scale)


def _pt_scale(ev: Evaluator, ct: Ciphertext, pt_scale: float | None) -> float:
    return float(ev.params.moduli[ct.level]) if pt_scale is None else float(pt_scale)


def _finish(ev: Evaluator, acc: Ciphertext | None, ct: Ciphertext, pt_scale: float,
            rescale: bool) -> Ciphertext:
    if acc is None:
        raise PlanError("empty matrix")
    return ev.rescale(acc) if rescale else acc


def matvec_naive(ev: Evaluator, ct: Ciphertext, diag: DiagonalMatrix,
                 pt_scale: float | None = None, rescale: bool = True) -> Ciphertext:
    """One rotation per nonzero diagonal."""
    ps = _pt_scale(ev, ct, pt_scale)
    acc = None
    for k in diag.offsets:
        r = ev.rotate(ct, k) if k else ct
        term = ev.mul_plain(r, _encode_diag(ev, ct, diag.diags[k], ps))
        acc = term if acc is None else ev.add(acc, term)
    return _finish(ev, acc, ct, ps, rescale)


def matvec_bsgs(ev: Evaluator, ct: Ciphertext, diag: DiagonalMatrix, plan: BsgsPlan | None = None,
                pt_scale: float | None = None, rescale: bool = True,
                cache: dict | None = None) -> Ciphertext:
    """Baby rotations of the input, giant rotations of partial sums.

    ``cache`` keeps encoded plaintexts across calls (keyed by offset, level,
    scale and tag); pass the same dict for repeated use of one matrix.
    """
    plan = plan or plan_for(diag)
    ps = _pt_scale(ev, ct, pt_scale)
    dim = diag.dim
    groups: dict[int, list[tuple[int, int]]] = {}
    for k in diag.offsets:
        g, b = plan.split(k, dim)
        groups.setdefault(g, []).append((b, k))
    babies: dict[int, Ciphertext] = {0: ct}
    for g in sorted(groups):
        for b, _ in groups[g]:
            if b not in babies:
                babies[b] = ev.rotate(ct, b * plan.spacing)
    acc = None
    for g in sorted(groups):
        shift = g * plan.baby * plan.spacing
        inner = None
        for b, k in sorted(groups[g]):
            v = np.roll(diag.diags[k], shift)
            term = ev.mul_plain(babies[b], _encode_diag(ev, ct, v, ps, cache, (k, shift, plan.baby)))
            inner = term if inner is None else ev.add(inner, term)
        if shift % dim:
            inner = ev.rotate(inner, shift % dim)
        acc = inner if acc is None else ev.add(acc, inner)
    return _finish(ev, acc, ct, ps, rescale)


# rectangular (few outputs, many inputs) ----------------------------------------


def rect_diagonals(W: np.ndarray, n: int) -> tuple[DiagonalMatrix, int]:
    """d x n weights as d wrapped diagonals; outputs appear after ``rotate_sum``.

    D_k[i] = W[i mod d, (i + k) mod n]; summing z[o + t*d] over t gives row o.
    """
    W = np.asarray(W)
    rows, cols = W.shape
    if cols > n:
        raise PlanError("more inputs than slots")
    d = 1
    while d < rows:
        d *= 2
    if n % d:
        raise PlanError("output count exceeds the slot count")
    Wp = np.zeros((d, n), dtype=complex)
    Wp[:rows, :cols] = W
    i = np.arange(n)
    diags = {}
    for k in range(d):
        v = Wp[i % d, (i + k) % n]
        if np.any(v):
            diags[k] = v
    return DiagonalMatrix(n, diags), d


def rotate_sum(ev: Evaluator, ct: Ciphertext, stride: int, count: int) -> Ciphertext:
    """sum_t rot(ct, t*stride) for t < count (count a power of two)."""
    acc = ct
    step = stride
    while count > 1:
        acc = ev.add(acc, ev.rotate(acc, step))
        step *= 2
        count //= 2
    return acc


def rotate_sum_keys(stride: int, count: int) -> tuple[int, ...]:
    out = []
    while count > 1:
        out.append(stride)
        stride *= 2
        count //= 2
    return tuple(out)
