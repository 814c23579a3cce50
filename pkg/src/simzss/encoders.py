"""Trainable causal text transformer and frozen vision feature providers."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from skimage.transform import resize as _sk_resize

from . import autodiff as ad
from .autodiff import ParameterError, ShapeError, Tensor
from .formats import index_features, read_tensor_table, write_tensor_table
from .text import TokenizedCaption

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- text


@dataclass
class TextEncoderConfig:
    vocab_size: int
    width: int = 32
    layers: int = 2
    heads: int = 4
    context: int = 64
    mlp_ratio: int = 4


@dataclass
class TextRepr:
    dense: Tensor  # n_t x d_t
    global_: Tensor  # d_t, the [EOS] row


@dataclass
class TextBatch:
    """Packed encoder output for several captions."""

    dense: Tensor  # (sum of lengths) x d_t
    lengths: list[int]
    offsets: list[int]
    captions: list[TokenizedCaption]

    @property
    def eos_rows(self) -> list[int]:
        return [o + n - 1 for o, n in zip(self.offsets, self.lengths)]

    def global_(self) -> Tensor:
        return ad.gather_rows(self.dense, self.eos_rows)

    def repr(self, i: int) -> TextRepr:
        rows = list(range(self.offsets[i], self.offsets[i] + self.lengths[i]))
        dense = ad.gather_rows(self.dense, rows)
        return TextRepr(dense, ad.reshape(ad.gather_rows(self.dense, [rows[-1]]), (self.dense.shape[1],)))


def truncate_caption(caption: TokenizedCaption, context: int) -> TokenizedCaption:
    """Keep the first ``context - 1`` tokens and re-append [EOS]; drop concepts that fall off."""
    if caption.n_tokens <= context:
        return caption
    keep = context - 1
    ids = caption.ids[:keep] + [caption.ids[-1]]
    spans = caption.spans[:keep] + [caption.spans[-1]]
    concepts = []
    for c in caption.concepts:
        idx = [i for i in c.token_indices if i < keep]
        if idx:
            concepts.append(type(c)(c.concept_id, c.text, c.word_spans, idx))
    return TokenizedCaption(caption.text, ids, spans, concepts, truncated=True)


class TextEncoder:
    """CLIP-style pre-LN causal transformer at toy scale.

    Parameters live in ``self.params`` (name -> leaf Tensor); the global
    representation of a caption is the final-layer-normed [EOS] row.
    """

    def __init__(self, config: TextEncoderConfig, rng: np.random.Generator | None = None, params: dict[str, Tensor] | None = None):
        self.config = config
        self.truncations = 0
        if params is not None:
            self.params = params
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        d, hidden = c.width, c.width * c.mlp_ratio

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value, np.float32), requires_grad=True)

        p: dict[str, Tensor] = {"token_embedding": normal(c.vocab_size, d), "positional_embedding": normal(c.context, d)}
        for i in range(c.layers):
            pre = f"blocks.{i}."
            p[pre + "ln_1.weight"], p[pre + "ln_1.bias"] = const(1.0, d), const(0.0, d)
            for nm in ("q", "k", "v", "out"):
                p[pre + f"attn.{nm}.weight"] = normal(d, d)
                p[pre + f"attn.{nm}.bias"] = const(0.0, d)
            p[pre + "ln_2.weight"], p[pre + "ln_2.bias"] = const(1.0, d), const(0.0, d)
            p[pre + "mlp.fc.weight"], p[pre + "mlp.fc.bias"] = normal(hidden, d), const(0.0, hidden)
            p[pre + "mlp.proj.weight"], p[pre + "mlp.proj.bias"] = normal(d, hidden), const(0.0, d)
        p["ln_final.weight"], p["ln_final.bias"] = const(1.0, d), const(0.0, d)
        for name, t in p.items():
            t.name = name
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def prepare(self, captions: Sequence[TokenizedCaption]) -> list[TokenizedCaption]:
        out = []
        for cap in captions:
            if cap.n_tokens > self.config.context:
                self.truncations += 1
                log.warning("caption truncated from %d to %d tokens: %.40r", cap.n_tokens, self.config.context, cap.text)
                cap = truncate_caption(cap, self.config.context)
            out.append(cap)
        return out

    def forward(self, captions: Sequence[TokenizedCaption]) -> TextBatch:
        caps = self.prepare(captions)
        p, c = self.params, self.config
        lengths = [cap.n_tokens for cap in caps]
        offsets = list(np.cumsum([0] + lengths[:-1]))
        ids = [i for cap in caps for i in cap.ids]
        positions = [j for n in lengths for j in range(n)]
        x = ad.embedding(p["token_embedding"], ids) + ad.gather_rows(p["positional_embedding"], positions)
        for i in range(c.layers):
            pre = f"blocks.{i}."
            h = ad.layer_norm(x, p[pre + "ln_1.weight"], p[pre + "ln_1.bias"])
            q = ad.linear(h, p[pre + "attn.q.weight"], p[pre + "attn.q.bias"])
            k = ad.linear(h, p[pre + "attn.k.weight"], p[pre + "attn.k.bias"])
            v = ad.linear(h, p[pre + "attn.v.weight"], p[pre + "attn.v.bias"])
            a = ad.attention(q, k, v, lengths, c.heads, causal=True)
            x = x + ad.linear(a, p[pre + "attn.out.weight"], p[pre + "attn.out.bias"])
            h = ad.layer_norm(x, p[pre + "ln_2.weight"], p[pre + "ln_2.bias"])
            h = ad.gelu(ad.linear(h, p[pre + "mlp.fc.weight"], p[pre + "mlp.fc.bias"]))
            x = x + ad.linear(h, p[pre + "mlp.proj.weight"], p[pre + "mlp.proj.bias"])
        x = ad.layer_norm(x, p["ln_final.weight"], p["ln_final.bias"])
        return TextBatch(x, lengths, [int(o) for o in offsets], caps)

    def encode(self, caption: TokenizedCaption) -> TextRepr:
        return self.forward([caption]).repr(0)


def encode_text(encoder: TextEncoder, caption: TokenizedCaption) -> TextRepr:
    return encoder.encode(caption)


# ----------------------------------------------------------------- vision


@dataclass
class VisionRepr:
    dense: np.ndarray  # n_v x d_v, row r * cols + c is patch (r, c)
    global_: np.ndarray  # d_v
    grid: tuple[int, int]
    patch_size: int

    @property
    def n_v(self) -> int:
        return self.dense.shape[0]


class VisionProvider(Protocol):
    d_v: int
    patch_size: int

    def encode_image(self, image) -> VisionRepr: ...

    def fingerprint(self) -> str: ...


def to_float_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)


def _patchify(img: np.ndarray, p: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < p or w < p or h % p or w % p:
        raise ShapeError(f"image of size {h}x{w} is not divisible into {p}x{p} patches")
    rows, cols = h // p, w // p
    return img.reshape(rows, p, cols, p, -1).transpose(0, 2, 1, 3, 4)


def handcrafted_features(image: np.ndarray, patch_size: int = 8, d_v: int = 32) -> VisionRepr:
    """Per-patch colour, texture, position and edge-orientation descriptor.

    Layout: mean RGB (3), RGB std (3), patch-centre position (row, col) in
    (0, 1) (2), magnitude-weighted gradient-orientation histogram with 4 bins
    over [0, pi) (4), then zeros up to ``d_v``. Gradients are taken inside the
    patch only, so each row depends on its own pixels and grid position.
    """
    if d_v < 12:
        raise ParameterError(f"handcrafted features need d_v >= 12, got {d_v}")
    img = to_float_image(image).astype(np.float64)
    patches = _patchify(img, patch_size)  # rows, cols, p, p, 3
    rows, cols, p = patches.shape[0], patches.shape[1], patch_size
    flat = patches.reshape(rows, cols, p * p, 3)
    mean = flat.mean(axis=2)
    std = flat.std(axis=2)
    rr, cc = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols, indexing="ij")
    gray = patches.mean(axis=4)
    gx = gray[:, :, :-1, 1:] - gray[:, :, :-1, :-1]
    gy = gray[:, :, 1:, :-1] - gray[:, :, :-1, :-1]
    mag = np.sqrt(gx**2 + gy**2)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / (np.pi / 4)).astype(int), 3)
    hist = np.zeros((rows, cols, 4))
    for b in range(4):
        hist[..., b] = np.where(bins == b, mag, 0.0).sum(axis=(2, 3))
    hist /= max((p - 1) ** 2, 1)
    feats = np.zeros((rows, cols, d_v))
    feats[..., 0:3] = mean
    feats[..., 3:6] = std
    feats[..., 6] = rr
    feats[..., 7] = cc
    feats[..., 8:12] = hist
    dense = feats.reshape(rows * cols, d_v).astype(np.float32)
    glob = dense.astype(np.float64).mean(axis=0).astype(np.float32)
    return VisionRepr(dense, glob, (rows, cols), patch_size)


@dataclass
class HandcraftedFeaturizer:
    patch_size: int = 8
    d_v: int = 32

    def encode_image(self, image) -> VisionRepr:
        return handcrafted_features(image, self.patch_size, self.d_v)

    def fingerprint(self) -> str:
        return hashlib.sha256(f"handcrafted:{self.patch_size}:{self.d_v}".encode()).hexdigest()


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (no anti-aliasing), any trailing channels."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[:2] == (out_h, out_w):
        return arr.copy()
    shape = (out_h, out_w) + arr.shape[2:]
    return _sk_resize(arr, shape, order=1, mode="edge", anti_aliasing=False, preserve_range=True)


@dataclass
class TinyFrozenViT:
    """Small bidirectional ViT whose weights come from an SZCK file and never train."""

    weights: dict[str, np.ndarray]
    patch_size: int
    heads: int = 4
    layers: int = 2
    source: str | None = None
    d_v: int = field(init=False)

    def __post_init__(self):
        self.d_v = int(self.weights["patch_embed.weight"].shape[0])
        for arr in self.weights.values():
            arr.setflags(write=False)

    @staticmethod
    def random_weights(seed: int, patch_size: int = 8, width: int = 32, layers: int = 2, grid: int = 8) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        d, pin = width, patch_size * patch_size * 3

        def n(*s, std=0.02):
            return rng.normal(0, std, size=s).astype(np.float32)

        w = {
            "patch_embed.weight": n(d, pin, std=1 / math.sqrt(pin)),
            "patch_embed.bias": np.zeros(d, np.float32),
            "cls_token": n(d),
            "pos_embed": n(grid * grid + 1, d),
            "meta.config": np.array([patch_size, layers, grid], np.float32),
        }
        for i in range(layers):
            pre = f"blocks.{i}."
            for nm in ("ln_1", "ln_2"):
                w[pre + nm + ".weight"] = np.ones(d, np.float32)
                w[pre + nm + ".bias"] = np.zeros(d, np.float32)
            for nm in ("q", "k", "v", "out"):
                w[pre + f"attn.{nm}.weight"] = n(d, d, std=1 / math.sqrt(d))
                w[pre + f"attn.{nm}.bias"] = np.zeros(d, np.float32)
            w[pre + "mlp.fc.weight"] = n(4 * d, d, std=1 / math.sqrt(d))
            w[pre + "mlp.fc.bias"] = np.zeros(4 * d, np.float32)
            w[pre + "mlp.proj.weight"] = n(d, 4 * d, std=1 / math.sqrt(4 * d))
            w[pre + "mlp.proj.bias"] = np.zeros(d, np.float32)
        w["ln_final.weight"] = np.ones(d, np.float32)
        w["ln_final.bias"] = np.zeros(d, np.float32)
        return w

    @classmethod
    def create(cls, path: str | Path, seed: int, **kw) -> TinyFrozenViT:
        write_tensor_table(path, cls.random_weights(seed, **kw))
        return cls.load(path)

    @classmethod
    def load(cls, path: str | Path, heads: int = 4) -> TinyFrozenViT:
        w = read_tensor_table(path)
        patch, layers, _ = (int(x) for x in w["meta.config"])
        return cls(w, patch, heads=heads, layers=layers, source=str(path))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(self.weights[k].tobytes())
        return h.hexdigest()

    def _pos(self, rows: int, cols: int) -> np.ndarray:
        pos = self.weights["pos_embed"]
        g = int(round(math.sqrt(pos.shape[0] - 1)))
        grid = pos[1:].reshape(g, g, -1)
        if (rows, cols) != (g, g):
            grid = resize_bilinear(grid, rows, cols).astype(np.float32)
        return np.concatenate([pos[:1], grid.reshape(rows * cols, -1)], axis=0)

    def encode_image(self, image) -> VisionRepr:
        img = to_float_image(image)
        patches = _patchify(img, self.patch_size)
        rows, cols = patches.shape[:2]
        w = {k: Tensor(v) for k, v in self.weights.items()}
        with ad.no_grad():
            x = ad.linear(Tensor(patches.reshape(rows * cols, -1)), w["patch_embed.weight"], w["patch_embed.bias"])
            x = ad.concat_rows([ad.reshape(w["cls_token"], (1, self.d_v)), x])
            x = x + Tensor(self._pos(rows, cols))
            n = rows * cols + 1
            for i in range(self.layers):
                pre = f"blocks.{i}."
                h = ad.layer_norm(x, w[pre + "ln_1.weight"], w[pre + "ln_1.bias"])
                qkv = [ad.linear(h, w[pre + f"attn.{m}.weight"], w[pre + f"attn.{m}.bias"]) for m in "qkv"]
                a = ad.attention(*qkv, [n], self.heads, causal=False)
                x = x + ad.linear(a, w[pre + "attn.out.weight"], w[pre + "attn.out.bias"])
                h = ad.layer_norm(x, w[pre + "ln_2.weight"], w[pre + "ln_2.bias"])
                h = ad.gelu(ad.linear(h, w[pre + "mlp.fc.weight"], w[pre + "mlp.fc.bias"]))
                x = x + ad.linear(h, w[pre + "mlp.proj.weight"], w[pre + "mlp.proj.bias"])
            x = ad.layer_norm(x, w["ln_final.weight"], w["ln_final.bias"])
        out = x.data
        return VisionRepr(out[1:].copy(), out[0].copy(), (rows, cols), self.patch_size)


class PrecomputedFeatures:
    """Memory-mapped SZSF feature file; images are addressed by id string."""

    def __init__(self, path: str | Path, patch_size: int = 8):
        self.path = Path(path)
        self.n_v, self.d_v, self.offsets = index_features(self.path)
        self.patch_size = patch_size
        side = int(round(math.sqrt(self.n_v)))
        self.grid = (side, side) if side * side == self.n_v else (1, self.n_v)
        self._mm = np.memmap(self.path, dtype=np.uint8, mode="r")

    def encode_image(self, image_id) -> VisionRepr:
        key = str(image_id)
        if key not in self.offsets:
            raise KeyError(f"image id {key!r} not in {self.path}")
        start = self.offsets[key]
        nbytes = 4 * (self.n_v * self.d_v + self.d_v)
        block = np.frombuffer(self._mm[start : start + nbytes].tobytes(), dtype="<f4").astype(np.float32)
        return VisionRepr(block[: self.n_v * self.d_v].reshape(self.n_v, self.d_v), block[self.n_v * self.d_v :], self.grid, self.patch_size)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()


def encode_image(provider: VisionProvider, image) -> VisionRepr:
    return provider.encode_image(image)
