"""Cross-modal concept pairing and the global + concept-level consistency losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParameterError, ShapeError, Tensor
from .encoders import TextRepr, VisionRepr
from .text import TokenizedCaption

LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)


@dataclass
class LossConfig:
    lam: float = 0.05
    tau: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")


@dataclass
class Projection:
    """Linear map from text space (d_t) to the frozen visual space (d_v)."""

    weight: Tensor  # d_v x d_t
    bias: Tensor | None

    @classmethod
    def init(cls, d_t: int, d_v: int, rng: np.random.Generator, bias: bool = True) -> Projection:
        w = Tensor(rng.normal(0.0, d_t**-0.5, size=(d_v, d_t)).astype(np.float32), requires_grad=True, name="proj.weight")
        b = Tensor(np.zeros(d_v, np.float32), requires_grad=True, name="proj.bias") if bias else None
        return cls(w, b)

    @property
    def d_t(self) -> int:
        return self.weight.shape[1]

    @property
    def d_v(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {"proj.weight": self.weight}
        if self.bias is not None:
            out["proj.bias"] = self.bias
        return out

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return ad.reshape(self(ad.reshape(x, (1, x.shape[0]))), (self.d_v,))
        if x.shape[1] != self.d_t:
            raise ShapeError(f"projection expects width {self.d_t}, got {x.shape}")
        return ad.linear(x, self.weight, self.bias)


def new_logit_scale() -> Tensor:
    return Tensor(np.array(LOGIT_SCALE_INIT, np.float32), requires_grad=True, name="logit_scale")


def clamp_logit_scale(logit_scale: Tensor) -> None:
    np.minimum(logit_scale.data, np.float32(LOGIT_SCALE_MAX), out=logit_scale.data)


# ----------------------------------------------------------- single concept


def text_concept_repr(z_t: Tensor, token_indices: Sequence[int]) -> Tensor:
    """Mean of the dense text rows a concept spans."""
    if len(token_indices) == 0:
        raise ContractError("concept spans no tokens")
    return ad.reshape(ad.mean_rows(z_t, [token_indices]), (z_t.shape[1],))


def project_text(g: Projection, c_t: Tensor) -> Tensor:
    return g(c_t)


def pool_visual_concept(z_v: Tensor, c_tilde: Tensor, tau: float) -> Tensor:
    """Softmax(z_v c / tau)-weighted average of the patch rows."""
    if c_tilde.shape != (z_v.shape[1],):
        raise ShapeError(f"query of shape {c_tilde.shape} does not match patches {z_v.shape}")
    sims = ad.matmul(z_v, ad.reshape(c_tilde, (c_tilde.shape[0], 1)))
    s = ad.softmax(sims, axis=0, temperature=tau)
    return ad.reshape(ad.matmul(ad.transpose(z_v), s), (z_v.shape[1],))


def pool_visual_concepts(z_v: np.ndarray, owner: Sequence[int], c_tilde: Tensor, tau: float) -> Tensor:
    """Batched similarity pooling against frozen patches.

    ``z_v`` is (b x n_v x d_v); row ``j`` of ``c_tilde`` queries the patches
    of image ``owner[j]``. Gradients flow to ``c_tilde`` only.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    Z = np.asarray(z_v, dtype=np.float64)
    own = np.asarray(owner, dtype=np.int64)
    if Z.ndim != 3 or c_tilde.ndim != 2 or c_tilde.shape != (own.size, Z.shape[2]):
        raise ShapeError(f"pooling shapes: patches {Z.shape}, queries {c_tilde.shape}, owners {own.size}")
    Zs = Z[own]  # b~ x n_v x d_v
    sims = np.einsum("jnd,jd->jn", Zs, c_tilde.data.astype(np.float64)) / tau
    sims -= sims.max(axis=1, keepdims=True)
    s = np.exp(sims)
    s /= s.sum(axis=1, keepdims=True)
    out = np.einsum("jn,jnd->jd", s, Zs)

    def backward(g):
        ds = np.einsum("jnd,jd->jn", Zs, g.astype(np.float64))
        dsims = s * (ds - np.sum(ds * s, axis=1, keepdims=True))
        ad._acc(c_tilde, np.einsum("jn,jnd->jd", dsims, Zs) / tau)

    return ad._node(out.astype(c_tilde.dtype), (c_tilde,), backward, "pool_visual_concepts")


# ---------------------------------------------------------------- batches


@dataclass
class ConceptBatch:
    C_t: Tensor  # b~ x d_t
    C_tilde: Tensor  # b~ x d_v, g(C_t)
    C_v: Tensor  # b~ x d_v
    q: np.ndarray  # b~ ints in [0, k)
    k: int
    provenance: list[tuple[int, int]] = field(default_factory=list)  # (pair index, bank id)

    @property
    def b_tilde(self) -> int:
        return int(self.q.size)


def dense_reindex(bank_ids: Sequence[int]) -> tuple[np.ndarray, list[int]]:
    """Map bank ids to 0..k-1 in order of first appearance."""
    order: dict[int, int] = {}
    q = [order.setdefault(int(b), len(order)) for b in bank_ids]
    return np.asarray(q, dtype=np.int64), list(order)


def assemble_concept_batch_packed(
    text_dense: Tensor,
    offsets: Sequence[int],
    captions: Sequence[TokenizedCaption],
    vision: Sequence[VisionRepr],
    g: Projection,
    tau: float,
) -> ConceptBatch | None:
    """Concept pairs for a packed text batch; ``None`` when no caption has a concept."""
    index_sets, owners, prov = [], [], []
    for i, cap in enumerate(captions):
        for c in cap.concepts:
            index_sets.append([offsets[i] + t for t in c.token_indices])
            owners.append(i)
            prov.append((i, c.concept_id))
    if not index_sets:
        return None
    C_t = ad.mean_rows(text_dense, index_sets)
    C_tilde = g(C_t)
    Z = np.stack([v.dense for v in vision])
    C_v = pool_visual_concepts(Z, owners, C_tilde, tau)
    q, _ = dense_reindex([b for _, b in prov])
    return ConceptBatch(C_t, C_tilde, C_v, q, int(q.max()) + 1, prov)


def assemble_concept_batch(
    pairs: Sequence[tuple[VisionRepr, TextRepr, TokenizedCaption]],
    g: Projection,
    tau: float,
) -> ConceptBatch | None:
    """Same as the packed variant, starting from per-pair representations."""
    if not pairs:
        return None
    dense = ad.concat_rows([t.dense for _, t, _ in pairs])
    offsets = list(np.cumsum([0] + [t.dense.shape[0] for _, t, _ in pairs[:-1]]))
    return assemble_concept_batch_packed(dense, [int(o) for o in offsets], [c for _, _, c in pairs], [v for v, _, _ in pairs], g, tau)


# ------------------------------------------------------------------ losses


def global_logits(Z_v: np.ndarray | Tensor, Z_t: Tensor, g: Projection, logit_scale: Tensor) -> Tensor:
    """``exp(logit_scale) * norm(g(Z_t)) norm(Z_v)^T``; rows are captions, columns images."""
    zv = Z_v if isinstance(Z_v, Tensor) else Tensor(np.asarray(Z_v, dtype=Z_t.dtype))
    if zv.shape[0] != Z_t.shape[0]:
        raise ShapeError(f"{Z_t.shape[0]} captions vs {zv.shape[0]} images")
    sims = ad.matmul(ad.l2_normalize_rows(g(Z_t)), ad.transpose(ad.l2_normalize_rows(zv)))
    return ad.scale(sims, ad.exp(logit_scale))


def global_loss(Z_v, Z_t: Tensor, g: Projection, logit_scale: Tensor) -> Tensor:
    """Symmetric InfoNCE: mean of caption->image and image->caption cross-entropies."""
    s = global_logits(Z_v, Z_t, g, logit_scale)
    target = np.arange(s.shape[0])
    return ad.scale(ad.add(ad.cross_entropy(s, target), ad.cross_entropy(ad.transpose(s), target)), 0.5)


def build_classifier(concepts: ConceptBatch, g: Projection | None = None) -> Tensor:
    """Sum the projected text concepts that share a batch concept index."""
    q, k = concepts.q, concepts.k
    if k < 1 or set(np.unique(q).tolist()) != set(range(k)):
        raise ContractError(f"concept indices must cover 0..{k - 1} densely")
    projected = g(concepts.C_t) if g is not None else concepts.C_tilde
    return ad.scatter_add_rows(projected, q, k)


def concept_logits(C_v: Tensor, h: Tensor) -> Tensor:
    return ad.matmul(ad.l2_normalize_rows(C_v), ad.transpose(ad.l2_normalize_rows(h)))


def concept_loss(concepts: ConceptBatch, h: Tensor) -> Tensor:
    """Cross-entropy of each pooled visual concept against the batch classifier."""
    if h.shape != (concepts.k, concepts.C_v.shape[1]):
        raise ShapeError(f"classifier {h.shape} vs k={concepts.k}, d_v={concepts.C_v.shape[1]}")
    return ad.cross_entropy(concept_logits(concepts.C_v, h), concepts.q)


def total_loss(L_g: Tensor, L_l: Tensor | None, lam: float) -> Tensor:
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    if L_l is None or lam == 0:
        return L_g
    return ad.add(L_g, ad.scale(L_l, lam))
