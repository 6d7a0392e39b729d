"""Toy encoder determinism/linearity and FMFD1 dump round-trips."""

import numpy as np
import pytest

from fmbench.encoders import (FeatureDump, ToyEncoder, encode_slice,
                              make_encoder, read_feature_dump, toy_encode,
                              write_feature_dump)
from fmbench.errors import FormatError, ShapeError
from fmbench.imaging import Slice2D


def slc(data, vid="v", z=0):
    return Slice2D(np.asarray(data, dtype=np.float64), vid, z)


def random_slice(side, seed, vid="v", z=0):
    rng = np.random.default_rng(seed)
    return slc(rng.normal(size=(side, side)), vid, z)


def test_encode_deterministic_bit_identical():
    enc = ToyEncoder(seed=3, embed_dim=16, input_resolution=64)
    a = encode_slice(random_slice(64, 0), enc)
    b = encode_slice(random_slice(64, 0), enc)
    assert np.array_equal(a.class_token, b.class_token)
    assert np.array_equal(a.patch_tokens, b.patch_tokens)


def test_zero_slice_tokens_are_bias_plus_positional_code():
    enc = ToyEncoder(seed=5, embed_dim=8, input_resolution=48)
    fm = encode_slice(slc(np.zeros((48, 48))), enc)
    pos = enc._pos_code(3, 3)
    expected = (enc._b[None, None, :] + pos).astype(np.float32)
    assert np.allclose(fm.patch_tokens, expected, atol=1e-6)
    # all patches identical once the positional code is removed
    depos = fm.patch_tokens - pos.astype(np.float32)
    assert np.allclose(depos, depos[0, 0], atol=1e-6)


def test_geometry_512_to_32x32():
    enc = ToyEncoder(seed=0, embed_dim=4, input_resolution=512)
    fm = encode_slice(slc(np.zeros((512, 512))), enc)
    assert fm.patch_tokens.shape == (32, 32, 4)


def test_shape_mismatch_rejected():
    enc = ToyEncoder(seed=0, embed_dim=4, input_resolution=64)
    with pytest.raises(ShapeError):
        encode_slice(slc(np.zeros((32, 32))), enc)
    with pytest.raises(ShapeError):
        toy_encode(slc(np.zeros((32, 48))), 0, 4)
    with pytest.raises(ShapeError):
        toy_encode(slc(np.zeros((30, 30))), 0, 4)


def test_toy_encode_linearity():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(32, 32))
    zero = toy_encode(slc(np.zeros((32, 32))), 7, 12).patch_tokens
    fx = toy_encode(slc(x), 7, 12).patch_tokens
    for a in (0.25, 2.0, -1.5):
        fax = toy_encode(slc(a * x), 7, 12).patch_tokens
        assert np.allclose(fax - zero, a * (fx - zero), atol=1e-5)


def test_class_token_is_mean_of_patch_tokens():
    fm = toy_encode(random_slice(64, 2), 1, 20)
    mean = fm.patch_tokens.reshape(-1, 20).astype(np.float64).mean(axis=0)
    assert np.allclose(fm.class_token, mean, atol=1e-6)


def test_distinct_seeds_give_distinct_tokens():
    s = random_slice(32, 4)
    a = toy_encode(s, 1, 8).patch_tokens
    b = toy_encode(s, 2, 8).patch_tokens
    assert np.abs(a - b).max() > 0


def template_slice(class_id, sample_seed, side=64):
    """Smooth class template plus small per-sample noise."""
    tpl_rng = np.random.default_rng(1000 + class_id)
    base = tpl_rng.normal(size=(side // 8, side // 8))
    template = np.kron(base, np.ones((8, 8)))
    noise = np.random.default_rng(sample_seed).normal(scale=0.02, size=(side, side))
    return slc(template + noise)


def test_toy_encoder_class_separability():
    enc = ToyEncoder(seed=11, embed_dim=32, input_resolution=64)
    tokens = {}
    for cls in range(3):
        tokens[cls] = np.stack([
            encode_slice(template_slice(cls, 50 * cls + i), enc).class_token
            for i in range(20)])
    centroids = {c: t.mean(axis=0) for c, t in tokens.items()}
    within = np.mean([np.linalg.norm(t - centroids[c], axis=1).mean()
                      for c, t in tokens.items()])
    between = min(np.linalg.norm(centroids[a] - centroids[b])
                  for a in range(3) for b in range(a + 1, 3))
    assert between > 5.0 * within


# -- FMFD1 dumps -----------------------------------------------------------------

def three_maps():
    enc = ToyEncoder(seed=2, embed_dim=6, input_resolution=32)
    return [encode_slice(random_slice(32, i, vid="vol", z=i), enc) for i in range(3)]


def test_dump_round_trip_bit_identical(tmp_path):
    maps = three_maps()
    path = tmp_path / "f.fmfd"
    write_feature_dump(maps, path)
    back = read_feature_dump(path)
    assert len(back) == 3
    for m, b in zip(maps, back):
        assert np.array_equal(m.class_token, b.class_token)
        assert np.array_equal(m.patch_tokens, b.patch_tokens)
        assert m.descriptor == b.descriptor
        assert m.sample_id == b.sample_id
        assert m.source == b.source


def test_dump_writes_are_byte_stable(tmp_path):
    maps = three_maps()
    p1, p2 = tmp_path / "a.fmfd", tmp_path / "b.fmfd"
    write_feature_dump(maps, p1)
    write_feature_dump(maps, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_dump(tmp_path):
    path = tmp_path / "empty.fmfd"
    write_feature_dump([], path)
    assert read_feature_dump(path) == []


def test_dump_random_access(tmp_path):
    maps = three_maps()
    path = tmp_path / "f.fmfd"
    write_feature_dump(maps, path)
    dump = FeatureDump(path)
    got = dump.get("vol:1")
    assert np.array_equal(got.patch_tokens, maps[1].patch_tokens)
    assert "vol:2" in dump and "nope" not in dump


def test_dump_truncated_payload_raises(tmp_path):
    maps = three_maps()
    path = tmp_path / "f.fmfd"
    write_feature_dump(maps, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError, match="truncated"):
        FeatureDump(path)


def test_dump_magic_mismatch(tmp_path):
    path = tmp_path / "f.fmfd"
    write_feature_dump(three_maps(), path)
    blob = bytearray(path.read_bytes())
    blob[:5] = b"NOPE!"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        FeatureDump(path)


def test_dump_descriptor_conflict_on_write(tmp_path):
    a = toy_encode(random_slice(32, 0), 1, 6)
    b = toy_encode(random_slice(32, 1), 2, 6)
    with pytest.raises(FormatError, match="descriptor"):
        write_feature_dump([a, b], tmp_path / "x.fmfd")


def test_make_encoder_spec_strings():
    enc = make_encoder("toy:seed=7,dim=64")
    assert enc.descriptor.embed_dim == 64
    assert enc.descriptor.input_resolution == 512
    enc2 = make_encoder("toy:seed=7,dim=16,res=64")
    assert enc2.descriptor.input_resolution == 64
    with pytest.raises(ValueError):
        make_encoder("mystery:model")
