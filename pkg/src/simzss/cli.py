"""``simzss`` command-line driver.

Every subcommand reads an optional flat ``key=value`` file via ``--config`` and
accepts ``--<key> <value>`` overrides for any key (dashes and underscores are
interchangeable). Unknown keys are rejected. Failures print one JSON object on
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import resize_bilinear
from .evaluation import IGNORE, ConfusionAccumulator, gt_foreground, gt_with_background
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm
from .pipeline import (
    CachedProvider,
    ExperimentConfig,
    TextTools,
    background_miou,
    choose_theta,
    class_embeddings,
    classification_accuracy,
    foreground_miou,
    make_provider,
    predict,
    run_training,
)
from .synth import SceneSpec, generate_dataset, load_class_names, load_manifest, single_object
from .text import BpeVocab, ConceptBank, PosLexicon, extract_concepts
from .trainer import load_checkpoint

log = logging.getLogger("simzss")

ALIASES = {"lambda": "lam"}


@dataclass
class RunConfig(ExperimentConfig):
    data: str = "data"
    out: str = "runs/default"
    checkpoint: str = ""
    split: str = "test"
    single_split: str = "single"
    hard_mode: bool = False
    background: bool = False
    auto_theta: bool = False
    theta_split: str = "val"
    predictions: str = ""
    overlays: str = ""
    captions: str = ""
    vocab: str = ""
    image: str = ""
    resolutions: str = "64"
    log_level: str = "WARNING"


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str, kind: type):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def _canonical(key: str) -> str:
    k = key.strip().replace("-", "_")
    return ALIASES.get(k, k)


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[_canonical(k)] = v.strip()
    return out


def resolve_config(config_path: str | None, overrides: Sequence[str]) -> RunConfig:
    """File values first, then ``--key value`` pairs; types follow the RunConfig defaults."""
    types = {f.name: type(f.default) for f in fields(RunConfig)}
    raw: dict[str, str] = read_config_file(config_path) if config_path else {}
    items = list(overrides)
    i = 0
    while i < len(items):
        tok = items[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"flag {tok} needs a value")
            val = items[i + 1]
            i += 2
        raw[_canonical(key)] = val
    unknown = sorted(set(raw) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    values = {k: _parse_value(k, v, types[k]) for k, v in raw.items()}
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> dict:
    spec = SceneSpec(hard_mode=cfg.hard_mode)
    manifest = generate_dataset(
        spec, cfg.data, cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed,
        extra_splits={cfg.single_split: (cfg.n_single, single_object(spec))},
    )
    write_json(Path(cfg.data) / "config.json", {"config": asdict(cfg)})
    return {"manifest": str(manifest), "scenes": cfg.n_train + cfg.n_val + cfg.n_test + cfg.n_single}


def cmd_train(cfg: RunConfig) -> dict:
    records = load_manifest(Path(cfg.data) / "manifest.jsonl", "train")
    if not records:
        raise ValueError(f"no training scenes in {cfg.data}")
    names = load_class_names(cfg.data)
    provider = CachedProvider(make_provider(cfg))
    before = provider.fingerprint()
    state, _, history = run_training(cfg, records, names, provider, cfg.out)
    result = {
        "steps": state.step,
        "final": history[-1] if history else None,
        "checkpoint": str(Path(cfg.out) / "final.szck"),
        "provider_fingerprint": before,
        "provider_unchanged": provider.fingerprint() == before,
        "config": asdict(cfg),
    }
    write_json(Path(cfg.out) / "train.json", result)
    return result


def _load_model(cfg: RunConfig):
    ckpt = Path(cfg.checkpoint or Path(cfg.out) / "final.szck")
    vocab_path = Path(cfg.vocab) if cfg.vocab else ckpt.parent / "vocab.szbpe"
    state = load_checkpoint(ckpt)
    tools = TextTools(BpeVocab.load(vocab_path), PosLexicon.load(cfg.lexicon or None), ConceptBank.load(cfg.bank or None))
    return state, tools


def _oracle_predictions(cfg: RunConfig, records, num_classes: int) -> dict:
    """Score label maps read from ``cfg.predictions`` (dataset mask convention)."""
    pred_dir = Path(cfg.predictions)
    manifest = {json.loads(l)["id"]: json.loads(l) for l in (Path(cfg.data) / "manifest.jsonl").read_text().splitlines() if l.strip()}
    n = num_classes + 1
    acc = ConfusionAccumulator(n, None if cfg.background else IGNORE)
    for r in records:
        pred = read_pgm(pred_dir / Path(manifest[r.id]["mask_path"]).name).astype(np.int64)
        pred = np.where(pred == 0, num_classes, pred - 1)
        gt = gt_with_background(r.mask, num_classes) if cfg.background else gt_foreground(r.mask)
        acc.update(pred, gt)
    rep = acc.report()
    if not cfg.background:
        # background predictions count as errors but the extra row is not a class
        valid = [v for v in rep.iou[:num_classes] if v is not None]
        rep.iou = rep.iou[:num_classes]
        rep.miou = float(np.mean(valid)) if valid else 0.0
    return rep.to_json(load_class_names(cfg.data) + (["background"] if cfg.background else []))


PALETTE = np.array([(230, 30, 30), (30, 180, 40), (30, 60, 230), (240, 220, 30), (220, 40, 220), (30, 210, 220), (245, 140, 20), (120, 40, 190)], np.uint8)


def overlay(image: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    colors = np.vstack([PALETTE[np.arange(num_classes) % len(PALETTE)], [[0, 0, 0]]])
    tint = colors[np.clip(labels, 0, num_classes)]
    return ((image.astype(np.uint16) + tint.astype(np.uint16)) // 2).astype(np.uint8)


def cmd_eval_seg(cfg: RunConfig) -> dict:
    records = load_manifest(Path(cfg.data) / "manifest.jsonl", cfg.split)
    names = load_class_names(cfg.data)
    if cfg.predictions:
        return {"mode": "oracle", "background": cfg.background, "report": _oracle_predictions(cfg, records, len(names)), "config": asdict(cfg)}
    state, tools = _load_model(cfg)
    provider = CachedProvider(make_provider(cfg))
    embeds = class_embeddings(cfg, state, tools, names)
    results = [predict(cfg, provider, embeds, r) for r in records]
    out: dict = {"mode": "background" if cfg.background else "foreground", "split": cfg.split}
    if cfg.background:
        theta = cfg.theta
        if cfg.auto_theta:
            val = load_manifest(Path(cfg.data) / "manifest.jsonl", cfg.theta_split)
            theta, curve = choose_theta([predict(cfg, provider, embeds, r) for r in val], val)
            out["theta_curve"] = {f"{k:.2f}": v for k, v in curve.items()}
        out["theta"] = theta
        out["report"] = background_miou(results, records, len(names), theta).to_json(names + ["background"])
    else:
        out["report"] = foreground_miou(results, records, len(names)).to_json(names)
    if cfg.overlays:
        odir = Path(cfg.overlays)
        odir.mkdir(parents=True, exist_ok=True)
        for r, res in zip(records, results):
            labels = res.labels
            if cfg.background:
                from .evaluation import apply_background

                labels = apply_background(res, out["theta"]).labels
            write_pgm(odir / f"{r.id:06d}.pgm", labels)
            write_ppm(odir / f"{r.id:06d}.ppm", overlay(r.image, labels, len(names)))
    out["config"] = asdict(cfg)
    return out


def cmd_eval_cls(cfg: RunConfig) -> dict:
    records = load_manifest(Path(cfg.data) / "manifest.jsonl", cfg.single_split)
    names = load_class_names(cfg.data)
    state, tools = _load_model(cfg)
    provider = CachedProvider(make_provider(cfg))
    embeds = class_embeddings(cfg, state, tools, names)
    return {"split": cfg.single_split, "n": len(records), "accuracy": classification_accuracy(provider, embeds, records), "config": asdict(cfg)}


def concepts_jsonl(captions: Sequence[str], tools: TextTools) -> str:
    lines = []
    for cap in captions:
        tc = extract_concepts(tools.vocab, tools.lexicon, tools.bank, cap)
        rec = {
            "caption": cap,
            "concepts": [{"concept": c.text, "id": c.concept_id, "word_spans": [list(s) for s in c.word_spans], "tokens": c.token_indices} for c in tc.concepts],
        }
        lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    return "".join(lines)


def cmd_concepts(cfg: RunConfig) -> dict:
    if not cfg.captions or not cfg.vocab:
        raise ConfigError("concepts needs --captions and --vocab")
    captions = [ln for ln in Path(cfg.captions).read_text(encoding="utf-8").splitlines() if ln.strip()]
    tools = TextTools(BpeVocab.load(cfg.vocab), PosLexicon.load(cfg.lexicon or None), ConceptBank.load(cfg.bank or None))
    text = concepts_jsonl(captions, tools)
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    Path(cfg.out).write_text(text, encoding="utf-8")
    return {"captions": len(captions), "output": cfg.out}


# ---------------------------------------------------------------- PCA view


def pca3(z: np.ndarray, iters: int = 5000, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Top-3 principal projections of the rows of ``z`` and their explained variances.

    Orthogonalized subspace iteration on the covariance, finished with a
    Rayleigh-Ritz step. Each component is signed so that its largest-magnitude
    coordinate is positive.
    """
    x = np.asarray(z, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"pca3 needs at least 3 rows, got shape {x.shape}")
    x = x - x.mean(axis=0)
    cov = x.T @ x / x.shape[0]
    d = cov.shape[0]
    k = min(3, d)
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(d, k)))
    for _ in range(iters):
        q_new, _ = np.linalg.qr(cov @ q)
        # subspace distance via projector difference
        if np.linalg.norm(q_new @ (q_new.T @ q) - q) < tol:
            q = q_new
            break
        q = q_new
    vals, vecs = np.linalg.eigh(q.T @ cov @ q)
    order = np.argsort(vals)[::-1]
    comps = q @ vecs[:, order]
    for j in range(k):
        c = comps[:, j]
        if c[np.argmax(np.abs(c))] < 0:
            comps[:, j] = -c
    variances = np.clip(vals[order], 0.0, None)
    proj = x @ comps
    if k < 3:
        proj = np.hstack([proj, np.zeros((x.shape[0], 3 - k))])
        variances = np.concatenate([variances, np.zeros(3 - k)])
    return proj, variances


def pca_image(proj: np.ndarray, grid: tuple[int, int], scale: int) -> np.ndarray:
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    norm = (proj - lo) / np.where(hi > lo, hi - lo, 1.0)
    img = (norm.reshape(grid[0], grid[1], 3) * 255).round().astype(np.uint8)
    return np.kron(img, np.ones((scale, scale, 1), np.uint8))


def cmd_visualize(cfg: RunConfig) -> dict:
    if not cfg.image:
        raise ConfigError("visualize needs --image")
    image = read_ppm(cfg.image)
    provider = make_provider(cfg)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = image.shape[:2]
    outputs = []
    for res in [int(r) for r in cfg.resolutions.split(",") if r.strip()]:
        rh, rw = (res, max(1, round(w * res / h))) if h <= w else (max(1, round(h * res / w)), res)
        img = image if (rh, rw) == (h, w) else np.clip(resize_bilinear(image.astype(np.float64), rh, rw).round(), 0, 255).astype(np.uint8)
        rep = provider.encode_image(img)
        proj, var = pca3(rep.dense)
        path = out_dir / f"pca_{res}.ppm"
        write_ppm(path, pca_image(proj, rep.grid, rep.patch_size))
        outputs.append({"resolution": res, "path": str(path), "grid": list(rep.grid), "explained_variance": var.tolist()})
    result = {"outputs": outputs, "config": asdict(cfg)}
    write_json(out_dir / "visualize.json", result)
    return result


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval-seg": cmd_eval_seg,
    "eval-cls": cmd_eval_cls,
    "concepts": cmd_concepts,
    "visualize": cmd_visualize,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="simzss", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="flat key=value file")
    args, rest = parser.parse_known_args(argv)
    try:
        cfg = resolve_config(args.config, rest)
        logging.basicConfig(level=cfg.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        result = COMMANDS[args.command](cfg)
    except Exception as e:  # noqa: BLE001 - single machine-readable line for every failure
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}) + "\n")
        return 2 if isinstance(e, (ConfigError, FileNotFoundError)) else 1
    if args.command in ("eval-seg", "eval-cls"):
        write_json(Path(cfg.out) / f"{args.command}.json", result)
    sys.stdout.write(json.dumps({k: v for k, v in result.items() if k != "config"}, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
