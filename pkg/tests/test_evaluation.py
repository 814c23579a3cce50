import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from simzss.alignment import Projection
from simzss.encoders import HandcraftedFeaturizer, TextEncoder, TextEncoderConfig, VisionRepr
from simzss.evaluation import (
    IGNORE,
    ClassEmbeddings,
    ConfusionAccumulator,
    SegmentationResult,
    apply_background,
    classify,
    embed_classes,
    gt_foreground,
    gt_with_background,
    load_templates,
    miou,
    patch_scores,
    scores_to_result,
    segment,
    segment_features,
    sweep_theta,
    theta_grid,
    window_starts,
)
from simzss.text import train_bpe


@given(st.integers(1, 300), st.data())
def test_windows_cover_every_pixel(length, data):
    window = data.draw(st.integers(1, length))
    stride = data.draw(st.integers(1, window))
    covered = np.zeros(length, bool)
    starts = window_starts(length, window, stride)
    for s in starts:
        assert 0 <= s <= length - window
        covered[s : s + window] = True
    assert covered.all() and starts == sorted(starts)


def test_window_examples():
    assert window_starts(448, 448, 224) == [0]
    assert window_starts(672, 448, 224) == [0, 224]
    assert window_starts(500, 448, 224) == [0, 52]
    with pytest.raises(ValueError):
        window_starts(10, 12, 4)
    with pytest.raises(ValueError):
        window_starts(10, 4, 5)


def colour_embeds():
    e = np.zeros((3, 32), np.float32)
    e[0, 0] = e[1, 1] = e[2, 2] = 1.0
    return ClassEmbeddings(["r", "g", "b"], e, ["{}"])


def test_one_window_image_is_stride_invariant():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    prov, emb = HandcraftedFeaturizer(), colour_embeds()
    ref = segment(prov, emb, img, 64, 64, 64)
    for stride in (1, 7, 32, 63):
        got = segment(prov, emb, img, 64, 64, stride)
        assert np.array_equal(got.class_scores, ref.class_scores) and np.array_equal(got.labels, ref.labels)


def test_segment_colour_blocks_and_output_size():
    img = np.zeros((48, 96, 3), np.uint8)
    img[:, :32] = (255, 0, 0)
    img[:, 32:64] = (0, 255, 0)
    img[:, 64:] = (0, 0, 255)
    res = segment(HandcraftedFeaturizer(), colour_embeds(), img, 48, 48, 16)
    assert res.labels.shape == (48, 96)
    assert (res.labels[:, 4:28] == 0).all() and (res.labels[:, 36:60] == 1).all() and (res.labels[:, 68:92] == 2).all()


def test_segment_resizes_then_restores():
    img = np.zeros((40, 40, 3), np.uint8)
    img[:, :20] = (255, 0, 0)
    img[:, 20:] = (0, 0, 255)
    res = segment(HandcraftedFeaturizer(), colour_embeds(), img, 64, 64, 32)
    assert res.labels.shape == (40, 40)
    assert (res.labels[:, :14] == 0).all() and (res.labels[:, 26:] == 2).all()


def test_segment_rejects_tiny_image():
    from simzss.autodiff import ShapeError

    with pytest.raises(ShapeError):
        segment(HandcraftedFeaturizer(), colour_embeds(), np.zeros((4, 4, 3), np.uint8))


def test_segment_features_matches_patch_argmax():
    rng = np.random.default_rng(1)
    rep = VisionRepr(rng.normal(size=(4, 32)).astype(np.float32), np.zeros(32, np.float32), (2, 2), 8)
    res = segment_features(rep, colour_embeds(), (2, 2))
    assert np.array_equal(res.labels, np.argmax(patch_scores(rep, colour_embeds()), axis=0))


# ------------------------------------------------------------ background


def random_result(rng, c=3, h=6, w=7):
    return scores_to_result(rng.uniform(-1, 1, size=(c, h, w)))


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(-1, 1), st.floats(-1, 1))
def test_background_monotone_in_theta(seed, a, b):
    res = random_result(np.random.default_rng(seed))
    lo, hi = sorted((a, b))
    bg_lo = apply_background(res, lo).labels == res.background_id
    bg_hi = apply_background(res, hi).labels == res.background_id
    assert np.all(bg_hi[bg_lo])


def test_theta_extremes():
    res = scores_to_result(np.random.default_rng(2).uniform(-0.99, 0.99, size=(3, 5, 5)))
    assert np.array_equal(apply_background(res, -1.0).labels, res.labels)
    assert (apply_background(res, 1.0).labels == 3).all()
    with pytest.raises(ValueError):
        apply_background(res, 1.5)


def test_theta_grid():
    g = theta_grid()
    assert len(g) == 20 and g[0] == 0.0 and g[-1] == 0.95 and g[1] == 0.05


def test_sweep_prefers_smaller_theta_on_ties():
    scores = np.full((2, 2, 2), 0.9)
    res = scores_to_result(scores)
    mask = np.ones((2, 2), np.uint8)
    best, curve = sweep_theta([res], [mask], [0.0, 0.5, 0.95])
    assert curve[0.0] == curve[0.5] == 1.0 and best == 0.0


def test_sweep_finds_separating_threshold():
    scores = np.zeros((1, 2, 2))
    scores[0, 0] = 0.8
    scores[0, 1] = 0.2
    mask = np.array([[1, 1], [0, 0]], np.uint8)
    best, curve = sweep_theta([scores_to_result(scores)], [mask])
    assert curve[best] == 1.0 and 0.2 < best <= 0.8


# --------------------------------------------------------------- metrics


def test_miou_hand_example():
    pred = np.array([[0, 0], [1, 1]])
    gt = np.array([[0, 1], [1, 1]])
    r = miou(pred, gt, 2)
    assert r.iou == [0.5, pytest.approx(2 / 3)]
    assert r.miou == pytest.approx((0.5 + 2 / 3) / 2)


def test_miou_third():
    r = miou(np.array([0, 0, 0]), np.array([0, 1, 1]), 2)
    assert r.iou[0] == pytest.approx(1 / 3) and r.iou[1] == 0.0


def test_miou_skips_absent_classes_and_ignores():
    r = miou(np.array([0, 0, 2]), np.array([0, IGNORE, 0]), 3)
    assert r.iou[1] is None and r.ignored == 1 and r.miou == pytest.approx(0.25)


def test_single_class_perfect_and_wrong():
    assert miou(np.zeros(5, int), np.zeros(5, int), 4).miou == 1.0
    assert miou(np.ones(5, int), np.zeros(5, int), 4).miou == 0.0


@given(arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 4)))
def test_miou_self_is_one(a):
    assert miou(a, a, 5).miou == 1.0


def test_accumulator_sums_images():
    acc = ConfusionAccumulator(2)
    acc.update(np.array([0]), np.array([0]))
    acc.update(np.array([1]), np.array([0]))
    assert acc.matrix.tolist() == [[1, 1], [0, 0]]
    with pytest.raises(ValueError):
        acc.update(np.array([2]), np.array([0]))


def test_mask_conventions():
    m = np.array([0, 1, 3], np.uint8)
    assert gt_foreground(m).tolist() == [IGNORE, 0, 2]
    assert gt_with_background(m, 8).tolist() == [8, 0, 2]


# ------------------------------------------------------------ embeddings


@pytest.fixture(scope="module")
def text_model():
    vocab = train_bpe(["a photo of a circle.", "a square and a star"], 30)
    enc = TextEncoder(TextEncoderConfig(vocab.size, 16, 1, 2, 32), np.random.default_rng(0))
    return vocab, enc, Projection.init(16, 32, np.random.default_rng(1))


def test_embeddings_unit_norm_and_duplicates(text_model):
    vocab, enc, g = text_model
    emb = embed_classes(enc, g, vocab, ["circle", "square", "circle"], load_templates())
    np.testing.assert_allclose(np.linalg.norm(emb.embeddings, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(emb.embeddings[0], emb.embeddings[2])


def test_single_template_equals_single_encode(text_model):
    from simzss.text import tokenize

    vocab, enc, g = text_model
    emb = embed_classes(enc, g, vocab, ["star"], ["a photo of a {}."])
    v = g(enc.encode(tokenize(vocab, "a photo of a star.")).global_).data.astype(np.float64)
    np.testing.assert_allclose(emb.embeddings[0], v / np.linalg.norm(v), atol=1e-6)


def test_templates_files():
    assert len(load_templates()) == 7
    assert len(load_templates(full=True)) == 80


def test_classify_uses_global_vector():
    img = np.zeros((16, 16, 3), np.uint8)
    img[..., 1] = 255
    pred, scores = classify(HandcraftedFeaturizer(), colour_embeds(), img)
    assert pred == 1 and scores.shape == (3,)
