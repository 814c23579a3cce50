import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simzss import autodiff as ad
from simzss.autodiff import ParameterError, ShapeError, Tensor
from simzss.encoders import (
    HandcraftedFeaturizer,
    PrecomputedFeatures,
    TextEncoder,
    TextEncoderConfig,
    TinyFrozenViT,
    handcrafted_features,
    truncate_caption,
)
from simzss.formats import write_features
from simzss.text import Concept, TokenizedCaption


def caption(ids, concepts=()):
    return TokenizedCaption("", [1, *ids, 2], [(i, i + 1) for i in range(len(ids) + 2)], list(concepts))


@pytest.fixture
def encoder():
    return TextEncoder(TextEncoderConfig(vocab_size=20, width=16, layers=2, heads=4, context=12), np.random.default_rng(0))


# ------------------------------------------------------------------- text


def test_identical_captions_identical_repr(encoder):
    a = encoder.encode(caption([5, 6, 7]))
    b = encoder.encode(caption([5, 6, 7]))
    assert np.array_equal(a.dense.data, b.dense.data) and np.array_equal(a.global_.data, b.global_.data)


def test_bos_eos_global_is_row_one(encoder):
    r = encoder.encode(caption([]))
    assert r.dense.shape[0] == 2
    assert np.array_equal(r.global_.data, r.dense.data[1])


def test_packed_batch_matches_single_encodes(encoder):
    caps = [caption([4, 5]), caption([7, 8, 9, 10]), caption([])]
    batch = encoder.forward(caps)
    for i, c in enumerate(caps):
        np.testing.assert_allclose(batch.repr(i).dense.data, encoder.encode(c).dense.data, atol=1e-6)


def test_causality(encoder):
    base = encoder.encode(caption([4, 5, 6, 7])).dense.data
    pert = encoder.encode(caption([4, 5, 11, 7])).dense.data
    # token 3 (id 6 -> 11) changed: rows 0..2 untouched
    assert np.array_equal(base[:3], pert[:3])
    assert not np.array_equal(base[3], pert[3])


def test_init_statistics():
    enc = TextEncoder(TextEncoderConfig(vocab_size=500, width=32), np.random.default_rng(1))
    emb = enc.params["token_embedding"].data
    assert abs(emb.std() - 0.02) < 0.002
    assert not enc.params["blocks.0.attn.q.bias"].data.any()


def test_global_gradient_wrt_token_embedding():
    cfg = TextEncoderConfig(vocab_size=8, width=8, layers=1, heads=2, context=6)
    rng = np.random.default_rng(2)
    base = TextEncoder(cfg, rng)
    names = list(base.params)
    arrays = [base.params[n].data.astype(np.float64) + rng.normal(0, 0.2, base.params[n].shape) for n in names]
    w = rng.normal(size=8)
    cap = caption([4, 5, 6])
    k = names.index("token_embedding")

    def fn(table):
        params = {n: Tensor(a) for n, a in zip(names, arrays)}
        params["token_embedding"] = table
        r = TextEncoder(cfg, params=params).encode(cap)
        return ad.sum(ad.mul(r.global_, Tensor(w)))

    assert ad.check_gradients(fn, [arrays[k]]) < 1e-3


def test_truncation_keeps_eos_and_counts(encoder, caplog):
    long = caption(list(range(4, 20)), [Concept(0, "x", [], [1, 2]), Concept(1, "y", [], [15])])
    short = truncate_caption(long, 12)
    assert short.n_tokens == 12 and short.ids[-1] == 2 and short.truncated
    assert [c.concept_id for c in short.concepts] == [0]
    batch = encoder.forward([long])
    assert batch.lengths == [12] and encoder.truncations == 1
    assert "truncated" in caplog.text


# ----------------------------------------------------------------- vision


def test_solid_red_patch():
    img = np.zeros((8, 8, 3), np.uint8)
    img[..., 0] = 255
    r = handcrafted_features(img, 8, 16)
    np.testing.assert_allclose(r.dense[0, :3], [1, 0, 0])
    np.testing.assert_allclose(r.dense[0, 3:6], 0)
    np.testing.assert_allclose(r.dense[0, 8:12], 0)
    assert not r.dense[0, 12:].any()


def test_gray_image_rows_share_colour_dims():
    r = handcrafted_features(np.full((32, 32, 3), 120, np.uint8))
    assert np.all(r.dense[:, :6] == r.dense[0, :6])


def test_global_is_row_mean():
    img = np.random.default_rng(0).integers(0, 256, (32, 48, 3), dtype=np.uint8)
    r = handcrafted_features(img)
    assert r.grid == (4, 6) and r.n_v == 24
    assert np.abs(r.global_ - r.dense.mean(axis=0)).max() < 1e-6


def test_same_colour_different_position_differs_only_in_position():
    img = np.full((16, 16, 3), 50, np.uint8)
    img[0:8, 0:8] = (200, 10, 10)
    img[8:16, 8:16] = (200, 10, 10)
    r = handcrafted_features(img, 8, 16)
    diff = np.nonzero(r.dense[0] != r.dense[3])[0]
    assert set(diff.tolist()) == {6, 7}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 15), st.integers(0, 2**31 - 1))
def test_painting_one_patch_changes_one_row(patch, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    before = handcrafted_features(img).dense
    r, c = divmod(patch, 4)
    img[r * 8 : r * 8 + 8, c * 8 : c * 8 + 8] = rng.integers(0, 256, 3, dtype=np.uint8)
    changed = np.nonzero(np.any(handcrafted_features(img).dense != before, axis=1))[0]
    assert set(changed.tolist()) <= {patch}


def test_handcrafted_errors():
    with pytest.raises(ParameterError):
        handcrafted_features(np.zeros((8, 8, 3), np.uint8), 8, 11)
    with pytest.raises(ShapeError):
        handcrafted_features(np.zeros((12, 8, 3), np.uint8), 8)


def test_handcrafted_deterministic():
    img = np.random.default_rng(1).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    f = HandcraftedFeaturizer()
    assert np.array_equal(f.encode_image(img).dense, f.encode_image(img).dense)


def test_tiny_vit_round_trip_and_frozen(tmp_path):
    vit = TinyFrozenViT.create(tmp_path / "vit.szck", seed=3)
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    r = vit.encode_image(img)
    assert r.dense.shape == (64, 32) and r.global_.shape == (32,)
    again = TinyFrozenViT.load(tmp_path / "vit.szck")
    assert again.fingerprint() == vit.fingerprint()
    assert np.array_equal(again.encode_image(img).dense, r.dense)
    with pytest.raises(ValueError):
        vit.weights["cls_token"][0] = 1.0


def test_tiny_vit_other_resolution(tmp_path):
    vit = TinyFrozenViT.create(tmp_path / "vit.szck", seed=3)
    r = vit.encode_image(np.zeros((32, 48, 3), np.uint8))
    assert r.grid == (4, 6) and r.dense.shape == (24, 32)


def test_precomputed_features(tmp_path):
    rng = np.random.default_rng(0)
    items = {str(i): (rng.normal(size=(16, 8)).astype(np.float32), rng.normal(size=8).astype(np.float32)) for i in range(3)}
    write_features(tmp_path / "f.szsf", items)
    pf = PrecomputedFeatures(tmp_path / "f.szsf")
    r = pf.encode_image("1")
    assert np.array_equal(r.dense, items["1"][0]) and np.array_equal(r.global_, items["1"][1])
    assert r.grid == (4, 4) and pf.d_v == 8
    with pytest.raises(KeyError):
        pf.encode_image("9")
