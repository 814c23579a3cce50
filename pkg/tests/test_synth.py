import hashlib
import json
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skimage.measure import label

from simzss.synth import (
    DEFAULT_CLASSES,
    SHAPES,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_class_names,
    load_manifest,
    shape_mask,
    single_object,
)
from simzss.text import BpeVocab, ConceptBank, PosLexicon, extract_concepts, train_bpe


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_same_seed_and_id_bit_identical():
    a, b = generate_scene(SceneSpec(), 3, 17), generate_scene(SceneSpec(), 3, 17)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask) and a.caption == b.caption
    c = generate_scene(SceneSpec(), 3, 18)
    assert not np.array_equal(a.image, c.image)


@pytest.mark.parametrize("i", range(20))
def test_single_object_scene(i):
    s = generate_scene(single_object(SceneSpec()), 0, i)
    assert len(np.unique(s.mask)) == 2 and len(s.objects) == 1
    bank = ConceptBank.load()
    words = [w.strip(".") for w in s.caption.split()]
    assert sum(bank.lookup(w) is not None for w in words if w in SHAPES) == 1


def test_mask_matches_rendered_objects():
    for i in range(50):
        s = generate_scene(SceneSpec(), 1, i)
        assert set(np.unique(s.mask[s.mask > 0]) - 1) == set(s.objects)
        for c in set(s.objects):
            assert (s.image[s.mask == c + 1] == DEFAULT_CLASSES[c].rgb).all()


@pytest.fixture(scope="module")
def text_tools():
    corpus = [generate_scene(SceneSpec(), 0, i).caption for i in range(300)]
    return train_bpe(corpus, 200), PosLexicon.load(), ConceptBank.load()


def test_caption_concepts_equal_mask_classes_on_1000_scenes(text_tools):
    vocab, lex, bank = text_tools
    names = SceneSpec().concept_names()
    for i in range(1000):
        s = generate_scene(SceneSpec(), 7, i)
        got = {bank.concepts[c.concept_id] for c in extract_concepts(vocab, lex, bank, s.caption).concepts}
        present = {names[int(v) - 1] for v in np.unique(s.mask) if v > 0}
        assert got == present, (s.caption, got, present)


def test_hard_mode_concepts_are_colour_shape(text_tools):
    from simzss.pipeline import ExperimentConfig, build_text_tools

    spec = replace(SceneSpec(), hard_mode=True)
    tools = build_text_tools(ExperimentConfig(num_merges=100), ["a red circle."], spec.concept_names())
    vocab, lex, bank = tools.vocab, tools.lexicon, tools.bank
    for i in range(200):
        s = generate_scene(spec, 2, i)
        got = {bank.concepts[c.concept_id] for c in extract_concepts(vocab, lex, bank, s.caption).concepts}
        present = {spec.concept_names()[int(v) - 1] for v in np.unique(s.mask) if v > 0}
        assert got == present, s.caption


def test_class_frequency_near_uniform():
    counts = Counter()
    for i in range(2000):
        counts.update(set(generate_scene(SceneSpec(), 0, i).objects))
    mean = sum(counts.values()) / 8
    assert len(counts) == 8
    assert all(abs(c - mean) <= 0.2 * mean for c in counts.values()), counts


def test_impossible_placement_rejected():
    with pytest.raises(ValueError):
        generate_scene(replace(SceneSpec(), max_size=80), 0, 0)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(SHAPES), st.integers(6, 30))
def test_shape_masks_fit_and_are_non_trivial(shape, size):
    m = shape_mask(shape, size)
    assert m.shape == (size, size) and m.any()
    assert m.sum() <= size * size


def test_objects_never_overlap():
    for i in range(100):
        s = generate_scene(replace(SceneSpec(), max_objects=5, min_size=8, max_size=14), 4, i)
        # a one-pixel gap separates boxes, so every object is its own connected component
        assert label(s.mask > 0, connectivity=2).max() == len(s.objects)


def test_dataset_manifest_and_rerun_identical(tmp_path):
    m = generate_dataset(SceneSpec(), tmp_path / "a", 2, 1, 1, seed=5)
    lines = m.read_text().splitlines()
    assert len(lines) == 4
    recs = [json.loads(x) for x in lines]
    assert [r["split"] for r in recs] == ["train", "train", "val", "test"]
    assert len({r["id"] for r in recs}) == 4
    assert set(recs[0]) == {"id", "image_path", "mask_path", "caption", "split"}
    generate_dataset(SceneSpec(), tmp_path / "b", 2, 1, 1, seed=5)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    test = load_manifest(m, "test")
    assert len(test) == 1 and test[0].image.shape == (64, 64, 3) and test[0].mask.shape == (64, 64)
    assert load_class_names(tmp_path / "a") == SceneSpec().concept_names()


def test_extra_split(tmp_path):
    m = generate_dataset(SceneSpec(), tmp_path, 1, 0, 0, seed=0, extra_splits={"single": (3, single_object(SceneSpec()))})
    single = load_manifest(m, "single")
    assert len(single) == 3 and all(len(np.unique(r.mask)) == 2 for r in single)


def test_negative_counts_rejected(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(SceneSpec(), tmp_path, -1, 0, 0, seed=0)
