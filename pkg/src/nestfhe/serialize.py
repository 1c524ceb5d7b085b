"""Binary container for ciphertexts, plaintexts and switching keys.

Layout (little-endian): magic ``NJNS``, u16 version, u32 N, u8 level,
f64 scale, u8 tag (+ u32 slice length when nested), u8 object kind, u16
limb count, the limb moduli as u64, u16 polynomial count, then the residue
words (NTT form) modulus-major.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .ckks import Ciphertext, Plaintext, SwitchKey
from .encoding import Encoding, EncodingTag
from .ring import RnsPolynomial

MAGIC = b"NJNS"
VERSION = 1

_KIND_CT, _KIND_PT, _KIND_SWK = 1, 2, 3


class FormatError(ValueError):
    pass


def _write_tag(buf: io.BytesIO, tag: EncodingTag):
    buf.write(struct.pack("<B", tag.kind.value))
    if tag.kind is Encoding.NESTED:
        buf.write(struct.pack("<I", tag.slice_len))


def _read_tag(buf: io.BytesIO) -> EncodingTag:
    (k,) = struct.unpack("<B", buf.read(1))
    kind = Encoding(k)
    if kind is Encoding.NESTED:
        (l,) = struct.unpack("<I", buf.read(4))
        return EncodingTag(kind, l)
    return EncodingTag(kind)


def _write_polys(buf: io.BytesIO, polys: list[RnsPolynomial]):
    moduli = polys[0].moduli
    buf.write(struct.pack("<H", len(moduli)))
    buf.write(np.asarray(moduli, dtype="<u8").tobytes())
    buf.write(struct.pack("<H", len(polys)))
    for p in polys:
        buf.write(p.to_ntt().data.astype("<u8").tobytes())


def _read_polys(buf: io.BytesIO, n: int) -> list[RnsPolynomial]:
    (k,) = struct.unpack("<H", buf.read(2))
    moduli = tuple(int(x) for x in np.frombuffer(buf.read(8 * k), dtype="<u8"))
    (cnt,) = struct.unpack("<H", buf.read(2))
    out = []
    for _ in range(cnt):
        raw = buf.read(8 * k * n)
        if len(raw) != 8 * k * n:
            raise FormatError("truncated limb data")
        data = np.frombuffer(raw, dtype="<u8").astype(np.uint64).reshape(k, n)
        if np.any(data >= np.array(moduli, dtype=np.uint64)[:, None]):
            raise FormatError("residue not reduced")
        out.append(RnsPolynomial(data.copy(), moduli, True))
    return out


def _header(kind: int, n: int, level: int, scale: float, tag: EncodingTag) -> io.BytesIO:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HIBd", VERSION, n, level, scale))
    _write_tag(buf, tag)
    buf.write(struct.pack("<B", kind))
    return buf


def _parse_header(data: bytes):
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise FormatError("bad magic")
    version, n, level, scale = struct.unpack("<HIBd", buf.read(15))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    tag = _read_tag(buf)
    (kind,) = struct.unpack("<B", buf.read(1))
    return buf, kind, n, level, scale, tag


def dump_ciphertext(ct: Ciphertext) -> bytes:
    buf = _header(_KIND_CT, ct.ring_degree, ct.level, ct.scale, ct.tag)
    _write_polys(buf, [ct.b, ct.a])
    return buf.getvalue()


def load_ciphertext(data: bytes) -> Ciphertext:
    buf, kind, n, level, scale, tag = _parse_header(data)
    if kind != _KIND_CT:
        raise FormatError("not a ciphertext")
    b, a = _read_polys(buf, n)
    return Ciphertext(b, a, level, scale, tag)


def dump_plaintext(pt: Plaintext) -> bytes:
    buf = _header(_KIND_PT, pt.poly.n, pt.level, pt.scale, pt.tag)
    _write_polys(buf, [pt.poly])
    return buf.getvalue()


def load_plaintext(data: bytes) -> Plaintext:
    buf, kind, n, level, scale, tag = _parse_header(data)
    if kind != _KIND_PT:
        raise FormatError("not a plaintext")
    (p,) = _read_polys(buf, n)
    return Plaintext(p, level, scale, tag)


def dump_switch_key(key: SwitchKey) -> bytes:
    n = key.b[0].shape[1]
    buf = _header(_KIND_SWK, n, 0, 0.0, EncodingTag(Encoding.SLOT))
    src = key.source.encode()
    buf.write(struct.pack("<QH", key.seed, len(src)))
    buf.write(src)
    _write_polys(buf, [RnsPolynomial(b, key.moduli, True) for b in key.b])
    return buf.getvalue()


def load_switch_key(data: bytes) -> SwitchKey:
    buf, kind, n, _, _, _ = _parse_header(data)
    if kind != _KIND_SWK:
        raise FormatError("not a switching key")
    seed, ln = struct.unpack("<QH", buf.read(10))
    src = buf.read(ln).decode()
    polys = _read_polys(buf, n)
    return SwitchKey([p.data for p in polys], seed, polys[0].moduli, src)


_KIND_KDIAG = 4


def dump_kernel_diagonals(kern) -> bytes:
    """PackedKernelDiagonals or FusedKernel; fused ones set flag bit 0."""
    from .bootstrap import FusedKernel

    dim = kern.diag.dim
    buf = _header(_KIND_KDIAG, 2 * dim, 0, 0.0, EncodingTag(Encoding.SLOT))
    prov = kern.provenance.encode()
    p = kern.plan
    flags = 1 if isinstance(kern, FusedKernel) else 0
    buf.write(struct.pack("<BH", flags, len(prov)))
    buf.write(prov)
    buf.write(struct.pack("<IIIIIB", kern.slice_len, kern.channels, p.baby, p.giant, p.spacing, int(p.signed)))
    offs = kern.diag.offsets
    buf.write(struct.pack("<I", len(offs)))
    buf.write(np.asarray(offs, dtype="<u4").tobytes())
    for k in offs:
        buf.write(np.asarray(kern.diag.diags[k], dtype="<c16").tobytes())
    return buf.getvalue()


def load_kernel_diagonals(data: bytes):
    from .bootstrap import FusedKernel
    from .conv import PackedKernelDiagonals
    from .linalg import BsgsPlan, DiagonalMatrix, rotation_keys

    buf, kind, n, _, _, _ = _parse_header(data)
    if kind != _KIND_KDIAG:
        raise FormatError("not a kernel container")
    flags, ln = struct.unpack("<BH", buf.read(3))
    prov = buf.read(ln).decode()
    slice_len, channels, baby, giant, spacing, signed = struct.unpack("<IIIIIB", buf.read(21))
    (cnt,) = struct.unpack("<I", buf.read(4))
    offs = np.frombuffer(buf.read(4 * cnt), dtype="<u4")
    dim = n // 2
    diags = {}
    for k in offs:
        raw = buf.read(16 * dim)
        if len(raw) != 16 * dim:
            raise FormatError("truncated diagonal data")
        diags[int(k)] = np.frombuffer(raw, dtype="<c16").astype(complex)
    dm = DiagonalMatrix(dim, diags)
    plan = BsgsPlan(baby, giant, spacing, bool(signed))
    plan = BsgsPlan(baby, giant, spacing, bool(signed), rotation_keys(dm, plan))
    cls = FusedKernel if flags & 1 else PackedKernelDiagonals
    return cls(dm, plan, slice_len, channels, prov)
