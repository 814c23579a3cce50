"""Mini-batch training: AdamW, warmup + cosine schedule, checkpoints, JSONL metrics."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .alignment import (
    LossConfig,
    Projection,
    assemble_concept_batch_packed,
    build_classifier,
    clamp_logit_scale,
    concept_loss,
    global_loss,
    new_logit_scale,
    total_loss,
)
from .autodiff import Tensor
from .encoders import TextEncoder, TextEncoderConfig, VisionProvider
from .formats import bytes_to_f32, f32_to_bytes, read_tensor_table, write_tensor_table
from .text import TokenizedCaption

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 256
    lr: float = 2e-3
    warmup: float = 0.1
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    seed: int = 0
    lam: float = 0.05
    tau: float = 0.1
    checkpoint_every: int = 0
    grad_clip: float = 0.0
    use_local: bool = True

    def __post_init__(self):
        if not 0 <= self.warmup < 1:
            raise ValueError(f"warmup fraction must be in [0, 1), got {self.warmup}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr > 0 and self.lr != 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        LossConfig(self.lam, self.tau)


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to ``lr * batch / 256``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = config.lr * config.batch_size / 256
    warm = int(round(config.warmup * total_steps))
    if step < warm:
        return peak * step / warm
    if total_steps == warm:
        return peak
    progress = (step - warm) / (total_steps - warm)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


def _decays(name: str, p: Tensor) -> bool:
    return p.ndim >= 2 and "ln" not in name and "bias" not in name and name != "logit_scale"


@dataclass
class TrainState:
    step: int
    encoder: TextEncoder
    proj: Projection
    logit_scale: Tensor
    rng: np.random.Generator
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def init(cls, enc_config: TextEncoderConfig, d_v: int, seed: int, proj_bias: bool = True) -> TrainState:
        init_rng = np.random.default_rng([seed, 1])
        encoder = TextEncoder(enc_config, init_rng)
        proj = Projection.init(enc_config.width, d_v, init_rng, bias=proj_bias)
        state = cls(0, encoder, proj, new_logit_scale(), np.random.default_rng([seed, 2]))
        for name, p in state.parameters().items():
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        return state

    def parameters(self) -> dict[str, Tensor]:
        out = {f"text.{k}": v for k, v in self.encoder.parameters().items()}
        out.update(self.proj.parameters())
        out["logit_scale"] = self.logit_scale
        return out


def adamw_update(state: TrainState, lr: float, config: TrainConfig) -> None:
    """One decoupled-weight-decay Adam step over every parameter, in place."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    params = state.parameters()
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    if config.grad_clip > 0:
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if norm > config.grad_clip:
            factor = np.float32(config.grad_clip / norm)
            grads = {n: g * factor for n, g in grads.items()}
    c1 = np.float32(1 - b1**t)
    c2 = np.float32(1 - b2**t)
    lr32 = np.float32(lr)
    for name, p in params.items():
        g = grads[name].astype(np.float32)
        m, v = state.moments[name]
        m *= np.float32(b1)
        m += np.float32(1 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1 - b2) * g * g
        if _decays(name, p):
            p.data *= np.float32(1) - lr32 * np.float32(config.weight_decay)
        p.data -= lr32 * (m / c1) / (np.sqrt(v / c2) + np.float32(config.adam_eps))
        p.grad = None
    clamp_logit_scale(state.logit_scale)


@dataclass
class TrainItem:
    id: int
    image: np.ndarray
    caption: TokenizedCaption


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, ids: Sequence[int], values: dict[str, float]):
        super().__init__(f"non-finite loss at step {step}: {values}; batch ids {list(ids)}")
        self.step, self.ids, self.values = step, list(ids), values


def train_step(
    state: TrainState,
    batch: Sequence[TrainItem],
    config: TrainConfig,
    provider: VisionProvider,
    total_steps: int,
) -> dict:
    """Forward, backward and AdamW update for one batch; returns the metrics record."""
    if not batch:
        raise ValueError("empty batch")
    ms = {}
    t0 = time.perf_counter()
    vision = [provider.encode_image(item.image) for item in batch]
    Z_bar_v = np.stack([v.global_ for v in vision])
    t1 = time.perf_counter()
    text = state.encoder.forward([item.caption for item in batch])
    t2 = time.perf_counter()
    concepts = assemble_concept_batch_packed(text.dense, text.offsets, text.captions, vision, state.proj, config.tau)
    t3 = time.perf_counter()
    L_g = global_loss(Z_bar_v, text.global_(), state.proj, state.logit_scale)
    L_l = concept_loss(concepts, build_classifier(concepts)) if concepts is not None else None
    lam = config.lam if config.use_local else 0.0
    L_tot = total_loss(L_g, L_l, lam)
    t4 = time.perf_counter()
    values = {"loss_g": float(L_g.data), "loss_l": float(L_l.data) if L_l is not None else None, "loss_tot": float(L_tot.data)}
    if not all(math.isfinite(v) for v in values.values() if v is not None):
        raise NonFiniteLoss(state.step, [item.id for item in batch], values)
    lr = lr_at(config, state.step, total_steps)
    ad.backward(L_tot)
    adamw_update(state, lr, config)
    t5 = time.perf_counter()
    ms = {"ms_vision": t1 - t0, "ms_text": t2 - t1, "ms_concepts": t3 - t2, "ms_losses": t4 - t3, "ms_update": t5 - t4}
    record = {
        "step": state.step,
        "lr": lr,
        **values,
        "b_tilde": concepts.b_tilde if concepts is not None else 0,
        "k": concepts.k if concepts is not None else 0,
        **{k: round(v * 1000, 3) for k, v in ms.items()},
    }
    state.step += 1
    return record


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def train(
    state: TrainState,
    items: Sequence[TrainItem],
    config: TrainConfig,
    provider: VisionProvider,
    out_dir: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
    max_steps: int | None = None,
) -> list[dict]:
    """Run ``config.epochs`` epochs (or ``max_steps``); writes metrics and checkpoints to ``out_dir``."""
    per_epoch = steps_per_epoch(len(items), config.batch_size)
    total = config.epochs * per_epoch
    fingerprint = provider.fingerprint()
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = (out / "metrics.jsonl").open("a" if state.step else "w", encoding="utf-8")
    history = []
    try:
        while state.step < total and (max_steps is None or len(history) < max_steps):
            epoch, pos = divmod(state.step, per_epoch)
            if pos == 0 or not hasattr(state, "_order"):
                state._order = state.rng.permutation(len(items))  # type: ignore[attr-defined]
            idx = state._order[pos * config.batch_size : (pos + 1) * config.batch_size]  # type: ignore[attr-defined]
            rec = train_step(state, [items[i] for i in idx], config, provider, total)
            rec["epoch"] = epoch
            history.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec) + "\n")
                metrics_file.flush()
            if on_step is not None:
                on_step(rec)
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                check_frozen(provider, fingerprint)
                save_checkpoint(state, out / f"step_{state.step:06d}.szck", config)
        if out is not None:
            check_frozen(provider, fingerprint)
            save_checkpoint(state, out / "final.szck", config)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return history


class FrozenViolation(RuntimeError):
    pass


def check_frozen(provider: VisionProvider, fingerprint: str) -> None:
    if provider.fingerprint() != fingerprint:
        raise FrozenViolation("vision provider weights changed during training")


# -------------------------------------------------------------- checkpoints


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(state: TrainState, path: str | Path, config: TrainConfig | None = None, extra: dict | None = None) -> None:
    meta = {
        "step": state.step,
        "rng": _rng_state_json(state.rng),
        "order": getattr(state, "_order", np.zeros(0, np.int64)).tolist(),
        "encoder": asdict(state.encoder.config),
        "d_v": state.proj.d_v,
        "proj_bias": state.proj.bias is not None,
        "train": asdict(config) if config is not None else None,
        "extra": extra or {},
    }
    tensors: dict[str, np.ndarray] = {"__meta__": bytes_to_f32(json.dumps(meta, sort_keys=True).encode("utf-8"))}
    for name, p in state.parameters().items():
        m, v = state.moments[name]
        tensors[f"param/{name}"] = p.data
        tensors[f"adam_m/{name}"] = m
        tensors[f"adam_v/{name}"] = v
    write_tensor_table(path, tensors)


def read_checkpoint_meta(path: str | Path) -> dict:
    return json.loads(f32_to_bytes(read_tensor_table(path)["__meta__"]).decode("utf-8"))


def load_checkpoint(path: str | Path, like: TrainState | None = None) -> TrainState:
    """Restore a TrainState; with ``like``, every tensor must match its shape."""
    table = read_tensor_table(path)
    if "__meta__" not in table:
        raise ValueError(f"{path}: checkpoint has no metadata entry")
    meta = json.loads(f32_to_bytes(table["__meta__"]).decode("utf-8"))
    if like is None:
        like = TrainState.init(TextEncoderConfig(**meta["encoder"]), meta["d_v"], 0, meta["proj_bias"])
    params = like.parameters()
    for name, p in params.items():
        for prefix in ("param/", "adam_m/", "adam_v/"):
            key = prefix + name
            if key not in table:
                raise KeyError(f"{path}: checkpoint lacks tensor {key!r}")
            if table[key].shape != p.shape:
                raise ad.ShapeError(f"{path}: tensor {key!r} has shape {table[key].shape}, model expects {p.shape}")
    extra = sorted(k for k in table if k.startswith("param/") and k[6:] not in params)
    if extra:
        raise ad.ShapeError(f"{path}: unexpected tensors {extra}")
    for name, p in params.items():
        p.data = table[f"param/{name}"].copy()
        p.grad = None
        like.moments[name] = (table[f"adam_m/{name}"].copy(), table[f"adam_v/{name}"].copy())
    like.step = int(meta["step"])
    like.rng = np.random.default_rng()
    like.rng.bit_generator.state = meta["rng"]
    if meta.get("order"):
        like._order = np.asarray(meta["order"], dtype=np.int64)  # type: ignore[attr-defined]
    return like
