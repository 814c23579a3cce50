"""End-to-end wiring: dataset -> tokenizer -> training -> zero-shot evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import HandcraftedFeaturizer, PrecomputedFeatures, TextEncoderConfig, TinyFrozenViT, VisionProvider, VisionRepr
from .evaluation import (
    ClassEmbeddings,
    ConfusionAccumulator,
    SegmentationResult,
    embed_classes,
    gt_foreground,
    gt_with_background,
    apply_background,
    classify_repr,
    load_templates,
    segment,
    segment_features,
    sweep_theta,
)
from .synth import Record
from .text import BpeVocab, ConceptBank, PosLexicon, extract_concepts, train_bpe
from .trainer import TrainConfig, TrainItem, TrainState, train

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seed: int = 0
    # data
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_single: int = 200
    # vision provider
    provider: str = "handcrafted"
    patch_size: int = 8
    d_v: int = 32
    vit_weights: str = ""
    features: str = ""
    # text
    num_merges: int = 300
    width: int = 32
    layers: int = 2
    heads: int = 4
    context: int = 64
    bank: str = ""
    lexicon: str = ""
    # optimisation
    epochs: int = 5
    # desk calibration: batch 256 leaves 40 steps over 2000 scenes and learns nothing;
    # the peak rate is still lr * batch / 256
    batch_size: int = 32
    lr: float = 3e-2
    warmup: float = 0.1
    weight_decay: float = 0.2
    lam: float = 0.05
    tau: float = 0.1
    # inference
    templates: str = ""
    shorter_side: int = 64
    window: int = 64
    stride: int = 32
    theta: float = -1.0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            warmup=self.warmup,
            weight_decay=self.weight_decay,
            seed=self.seed,
            lam=self.lam,
            tau=self.tau,
        )

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}

    def as_dict(self) -> dict:
        return asdict(self)


def make_provider(cfg: ExperimentConfig) -> VisionProvider:
    if cfg.provider == "handcrafted":
        return HandcraftedFeaturizer(cfg.patch_size, cfg.d_v)
    if cfg.provider == "tinyvit":
        if not cfg.vit_weights:
            raise ValueError("provider tinyvit needs vit_weights")
        return TinyFrozenViT.load(cfg.vit_weights)
    if cfg.provider == "precomputed":
        if not cfg.features:
            raise ValueError("provider precomputed needs features")
        return PrecomputedFeatures(cfg.features, cfg.patch_size)
    raise ValueError(f"unknown provider {cfg.provider!r}")


class CachedProvider:
    """Memoizes frozen features by image id; arrays pass through to the wrapped provider."""

    def __init__(self, base: VisionProvider):
        self.base = base
        self.cache: dict[int | str, VisionRepr] = {}

    @property
    def patch_size(self) -> int:
        return self.base.patch_size

    @property
    def d_v(self) -> int:
        return self.base.d_v

    def add(self, key, image) -> VisionRepr:
        if key not in self.cache:
            source = key if isinstance(self.base, PrecomputedFeatures) else image
            self.cache[key] = self.base.encode_image(source)
        return self.cache[key]

    def encode_image(self, image) -> VisionRepr:
        if isinstance(image, (int, str, np.integer)):
            return self.cache[int(image) if isinstance(image, np.integer) else image]
        return self.base.encode_image(image)

    def fingerprint(self) -> str:
        return self.base.fingerprint()


@dataclass
class TextTools:
    vocab: BpeVocab
    lexicon: PosLexicon
    bank: ConceptBank


def build_text_tools(cfg: ExperimentConfig, captions: Sequence[str], class_names: Sequence[str]) -> TextTools:
    templates = load_templates(cfg.templates or None)
    corpus = list(captions) + [t.replace("{}", n) for t in templates for n in class_names]
    lexicon = PosLexicon.load(cfg.lexicon or None)
    bank = ConceptBank.load(cfg.bank or None)
    # multi-word class names ("red circle") are kept whole by tagging their modifiers as nouns
    modifiers = {w: "NOUN" for n in class_names for w in n.split()[:-1]}
    if modifiers:
        lexicon = lexicon.with_words(modifiers)
        bank = ConceptBank([*bank.concepts, *class_names])
    return TextTools(train_bpe(corpus, cfg.num_merges), lexicon, bank)


def make_items(records: Sequence[Record], tools: TextTools, provider: CachedProvider) -> list[TrainItem]:
    items = []
    for r in records:
        provider.add(r.id, r.image)
        cap = extract_concepts(tools.vocab, tools.lexicon, tools.bank, r.caption)
        items.append(TrainItem(r.id, r.id, cap))
    return items


def new_state(cfg: ExperimentConfig, vocab: BpeVocab, d_v: int) -> TrainState:
    enc = TextEncoderConfig(vocab.size, cfg.width, cfg.layers, cfg.heads, cfg.context)
    return TrainState.init(enc, d_v, cfg.seed)


def run_training(
    cfg: ExperimentConfig,
    train_records: Sequence[Record],
    class_names: Sequence[str],
    provider: CachedProvider,
    out_dir: str | Path | None = None,
    tools: TextTools | None = None,
) -> tuple[TrainState, TextTools, list[dict]]:
    tools = tools or build_text_tools(cfg, [r.caption for r in train_records], class_names)
    items = make_items(train_records, tools, provider)
    state = new_state(cfg, tools.vocab, provider.d_v)
    history = train(state, items, cfg.train_config(), provider, out_dir)
    if out_dir is not None:
        tools.vocab.save(Path(out_dir) / "vocab.szbpe")
    return state, tools, history


def class_embeddings(cfg: ExperimentConfig, state: TrainState, tools: TextTools, class_names: Sequence[str]) -> ClassEmbeddings:
    return embed_classes(state.encoder, state.proj, tools.vocab, class_names, load_templates(cfg.templates or None))


def predict(cfg: ExperimentConfig, provider: CachedProvider, embeds: ClassEmbeddings, record: Record) -> SegmentationResult:
    if isinstance(provider.base, PrecomputedFeatures):
        return segment_features(provider.add(record.id, record.image), embeds, record.mask.shape)
    return segment(provider, embeds, record.image, cfg.shorter_side, cfg.window, cfg.stride)


def foreground_miou(results: Sequence[SegmentationResult], records: Sequence[Record], num_classes: int):
    acc = ConfusionAccumulator(num_classes)
    for res, r in zip(results, records):
        acc.update(res.labels, gt_foreground(r.mask))
    return acc.report()


def background_miou(results: Sequence[SegmentationResult], records: Sequence[Record], num_classes: int, theta: float):
    acc = ConfusionAccumulator(num_classes + 1, None)
    for res, r in zip(results, records):
        acc.update(apply_background(res, theta).labels, gt_with_background(r.mask, num_classes))
    return acc.report()


def choose_theta(results: Sequence[SegmentationResult], records: Sequence[Record]) -> tuple[float, dict[float, float]]:
    return sweep_theta(results, [r.mask for r in records])


def classification_accuracy(provider: CachedProvider, embeds: ClassEmbeddings, records: Sequence[Record]) -> float:
    """Single-object scenes: the label is the only non-background mask value."""
    correct = 0
    for r in records:
        labels = np.unique(r.mask[r.mask > 0])
        if labels.size != 1:
            raise ValueError(f"scene {r.id} is not single-object")
        pred, _ = classify_repr(provider.add(r.id, r.image), embeds)
        correct += int(pred == int(labels[0]) - 1)
    return correct / max(len(records), 1)
