"""Synthetic scenes: flat colored shapes on noisy gray, with exact masks and captions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from skimage.draw import polygon as draw_polygon

from .netpbm import write_pgm, write_ppm

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "star", "hexagon")


@dataclass(frozen=True)
class ObjectClass:
    shape: str
    color: str
    rgb: tuple[int, int, int]

    def concept(self, hard: bool = False) -> str:
        return f"{self.color} {self.shape}" if hard else self.shape


DEFAULT_CLASSES = (
    ObjectClass("circle", "red", (230, 30, 30)),
    ObjectClass("square", "green", (30, 180, 40)),
    ObjectClass("triangle", "blue", (30, 60, 230)),
    ObjectClass("cross", "yellow", (240, 220, 30)),
    ObjectClass("diamond", "magenta", (220, 40, 220)),
    ObjectClass("ring", "cyan", (30, 210, 220)),
    ObjectClass("star", "orange", (245, 140, 20)),
    ObjectClass("hexagon", "purple", (120, 40, 190)),
)

CAPTION_TEMPLATES = (
    "{objs}.",
    "a photo of {objs}.",
    "a picture of {objs}.",
    "an image showing {objs}.",
    "there is {objs} on a gray background.",
    "{objs} on a plain background.",
    "a drawing of {objs}.",
    "a bad photo of {objs}.",
    "itap of {objs}.",
    "art of {objs}.",
    "{objs} in a video game.",
    "an origami of {objs}.",
)
CONNECTIVES = ("and", "next to", "above")
SIZE_WORDS = ("small", "large")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    classes: tuple[ObjectClass, ...] = DEFAULT_CLASSES
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12
    max_size: int = 24
    background_levels: tuple[int, ...] = (76, 107, 138, 168)
    noise_amplitude: int = 6
    templates: tuple[str, ...] = CAPTION_TEMPLATES
    color_word_prob: float = 0.5
    size_word_prob: float = 0.2
    hard_mode: bool = False

    def concept_names(self) -> list[str]:
        return [c.concept(self.hard_mode) for c in self.classes]

    def validate(self) -> None:
        if self.max_size > min(self.height, self.width):
            raise ValueError(f"objects up to {self.max_size}px do not fit a {self.height}x{self.width} canvas")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if not self.hard_mode and len({c.shape for c in self.classes}) != len(self.classes):
            raise ValueError("easy mode needs one shape per class (the shape is the concept)")


@dataclass
class Scene:
    id: int
    image: np.ndarray  # uint8 H x W x 3
    mask: np.ndarray  # uint8 H x W; 0 = background, c + 1 = class c
    caption: str
    objects: list[int] = field(default_factory=list)


def scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, scene_id])


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint of ``shape``."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - c, xx - c
    r = size / 2.0
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return np.ones((size, size), bool)
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.5 * r) ** 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "cross":
        arm = size / 6.0
        return (np.abs(dy) <= arm) | (np.abs(dx) <= arm)
    if shape in ("triangle", "star", "hexagon"):
        if shape == "triangle":
            rows = [size - 0.5, -0.5, size - 0.5]
            cols = [-0.5, c, size - 0.5]
        else:
            n = 5 if shape == "star" else 6
            pts = 2 * n if shape == "star" else n
            ang = -np.pi / 2 + np.arange(pts) * 2 * np.pi / pts
            rad = np.full(pts, r + 0.5)
            if shape == "star":
                rad[1::2] = 0.45 * r
            rows = list(c + rad * np.sin(ang))
            cols = list(c + rad * np.cos(ang))
        m = np.zeros((size, size), bool)
        rr, cc = draw_polygon(rows, cols, shape=(size, size))
        m[rr, cc] = True
        return m
    raise ValueError(f"unknown shape {shape!r}")


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _phrase(cls: ObjectClass, rng: np.random.Generator, spec: SceneSpec) -> str:
    words = []
    if rng.random() < spec.size_word_prob:
        words.append(SIZE_WORDS[int(rng.integers(len(SIZE_WORDS)))])
    if spec.hard_mode or rng.random() < spec.color_word_prob:
        words.append(cls.color)
    words.append(cls.shape)
    return f"{_article(words[0])} {' '.join(words)}"


def compose_caption(classes: Sequence[ObjectClass], rng: np.random.Generator, spec: SceneSpec) -> str:
    parts = [_phrase(c, rng, spec) for c in classes]
    objs = parts[0]
    for p in parts[1:]:
        objs += f" {CONNECTIVES[int(rng.integers(len(CONNECTIVES)))]} {p}"
    template = spec.templates[int(rng.integers(len(spec.templates)))]
    return template.format(objs=objs)


def generate_scene(spec: SceneSpec, seed: int, scene_id: int) -> Scene:
    """Render one scene; a pure function of ``(spec, seed, scene_id)``."""
    spec.validate()
    rng = scene_rng(seed, scene_id)
    h, w = spec.height, spec.width
    level = spec.background_levels[int(rng.integers(len(spec.background_levels)))]
    noise = rng.integers(-spec.noise_amplitude, spec.noise_amplitude + 1, size=(h, w, 1))
    image = np.clip(level + noise, 0, 255).astype(np.uint8).repeat(3, axis=2)
    mask = np.zeros((h, w), np.uint8)

    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple[int, int, int, int]] = []
    chosen: list[int] = []
    while len(chosen) < count:
        cls_id = int(rng.integers(len(spec.classes)))
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        for _ in range(100):
            y = int(rng.integers(0, h - size + 1))
            x = int(rng.integers(0, w - size + 1))
            box = (y - 1, x - 1, y + size + 1, x + size + 1)
            if all(box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1] for b in placed):
                break
        else:
            count -= 1
            continue
        placed.append((y, x, y + size, x + size))
        chosen.append(cls_id)
        m = shape_mask(spec.classes[cls_id].shape, size)
        image[y : y + size, x : x + size][m] = spec.classes[cls_id].rgb
        mask[y : y + size, x : x + size][m] = cls_id + 1

    caption = compose_caption([spec.classes[i] for i in chosen], rng, spec)
    return Scene(scene_id, image, mask, caption, chosen)


def generate_dataset(
    spec: SceneSpec,
    out_dir: str | Path,
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int,
    extra_splits: dict[str, tuple[int, SceneSpec]] | None = None,
) -> Path:
    """Write PPM images, PGM masks and a ``manifest.jsonl``; returns the manifest path.

    ``extra_splits`` maps a split name to (count, spec) for additional sets,
    e.g. single-object scenes for classification.
    """
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("scene counts must be >= 0")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    plan = [("train", n_train, spec), ("val", n_val, spec), ("test", n_test, spec)]
    for name, (n, sp) in (extra_splits or {}).items():
        plan.append((name, n, sp))
    records = []
    next_id = 0
    for split, n, sp in plan:
        for _ in range(n):
            scene = generate_scene(sp, seed, next_id)
            img = f"images/{next_id:06d}.ppm"
            msk = f"masks/{next_id:06d}.pgm"
            write_ppm(out / img, scene.image)
            write_pgm(out / msk, scene.mask)
            records.append({"id": next_id, "image_path": img, "mask_path": msk, "caption": scene.caption, "split": split})
            next_id += 1
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    meta = {
        "seed": seed,
        "classes": [{"shape": c.shape, "color": c.color, "rgb": list(c.rgb)} for c in spec.classes],
        "class_names": spec.concept_names(),
        "hard_mode": spec.hard_mode,
        "height": spec.height,
        "width": spec.width,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return manifest


def single_object(spec: SceneSpec) -> SceneSpec:
    return replace(spec, min_objects=1, max_objects=1)


@dataclass
class Record:
    id: int
    image: np.ndarray
    mask: np.ndarray
    caption: str
    split: str


def load_manifest(path: str | Path, split: str | None = None) -> list[Record]:
    from .netpbm import read_pgm, read_ppm

    path = Path(path)
    root = path.parent
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        if split is not None and r["split"] != split:
            continue
        out.append(Record(r["id"], read_ppm(root / r["image_path"]), read_pgm(root / r["mask_path"]), r["caption"], r["split"]))
    return out


def load_class_names(dataset_dir: str | Path) -> list[str]:
    return json.loads((Path(dataset_dir) / "dataset.json").read_text(encoding="utf-8"))["class_names"]
