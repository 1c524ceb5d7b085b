import numpy as np
import pytest

from nestfhe.bootstrap import FusedKernel, fuse_kernel_with_stoc2, make_split
from nestfhe.conv import FeatureMapLayout, KernelTensor, PackedKernelDiagonals, pack_conv_kernels
from nestfhe.encoding import nested
from nestfhe.serialize import (FormatError, dump_ciphertext, dump_kernel_diagonals, dump_plaintext,
                               dump_switch_key, load_ciphertext, load_kernel_diagonals, load_plaintext,
                               load_switch_key)


def test_ciphertext_roundtrip(toy_ctx, rng):
    enc, dec = toy_ctx.encoder, toy_ctx.decryptor
    x = rng.normal(size=256)
    ct = dec.encrypt_sk(enc.encode_nested_real(x, 16, level=4))
    back = load_ciphertext(dump_ciphertext(ct))
    assert (back.level, back.scale, back.tag) == (4, ct.scale, nested(8))
    assert back.b.to_ints() == ct.b.to_ints() and back.a.to_ints() == ct.a.to_ints()
    assert np.allclose(dec.decrypt_decode(back), x, atol=1e-6)


def test_plaintext_roundtrip(toy_ctx, rng):
    pt = toy_ctx.encoder.encode_slots(rng.normal(size=128), level=2)
    back = load_plaintext(dump_plaintext(pt))
    assert (back.level, back.scale, back.tag) == (pt.level, pt.scale, pt.tag)
    assert back.poly.to_ints() == pt.poly.to_ints()


def test_switch_key_roundtrip(toy_ctx):
    key = next(iter(toy_ctx.keys.galois.values()))
    back = load_switch_key(dump_switch_key(key))
    assert back.seed == key.seed and back.moduli == key.moduli and back.source == key.source
    assert all(np.array_equal(a, b) for a, b in zip(back.b, key.b))


@pytest.mark.parametrize("fused", [False, True])
def test_kernel_diagonals_roundtrip(fused, rng):
    lay = FeatureMapLayout(6, 8, 4, 256)
    kern = pack_conv_kernels(lay, KernelTensor(rng.normal(size=(4, 4, 3, 3))), provenance="conv1")
    if fused:
        kern = fuse_kernel_with_stoc2(kern, make_split(256, lay.slice_len))
    back = load_kernel_diagonals(dump_kernel_diagonals(kern))
    assert type(back) is (FusedKernel if fused else PackedKernelDiagonals)
    assert back.provenance == kern.provenance and back.plan == kern.plan
    assert back.rotations() == kern.rotations()
    assert back.diag.offsets == kern.diag.offsets
    assert all(np.array_equal(back.diag.diags[k], kern.diag.diags[k]) for k in kern.diag.offsets)


def test_format_errors(toy_ctx, rng):
    ct = toy_ctx.decryptor.encrypt_sk(toy_ctx.encoder.encode_slots(rng.normal(size=128)))
    data = dump_ciphertext(ct)
    with pytest.raises(FormatError):
        load_ciphertext(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_ciphertext(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(FormatError):
        load_plaintext(data)
    with pytest.raises(FormatError):
        load_ciphertext(data[:-100])
