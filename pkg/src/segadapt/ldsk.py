"""Prototype-guided self-supervision on the target domain: class prototypes
estimated from the EMA memory model, a feature-similarity reference
distribution, and the symmetric / agreement-filtered losses built on it.

Everything here runs at feature resolution (h, w), not image resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch

from .edik import EPS, pseudo_label, pseudo_label_indices
from .errors import NumericError, ParameterError


@dataclass
class PrototypeSet:
    """Per-class feature centroids for one image (or a running store).

    vectors: (C, D); rows of absent classes are zero.
    present: (C,) bool mask of classes with at least one assigned pixel.
    """

    vectors: torch.Tensor
    present: torch.Tensor

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]


class PrototypeMode(str, Enum):
    """Prototype refresh policy across the adaptation run.

    DYNAMIC: recompute from the current memory features on every visit.
    STATIC: compute once per image on first visit, frozen afterwards.
    MOMENTUM: one global per-class store, k <- 0.99 k + 0.01 k_new.
    """

    DYNAMIC = "dynamic"
    STATIC = "static"
    MOMENTUM = "momentum"


def estimate_prototypes(f_m: torch.Tensor, p_m: torch.Tensor) -> PrototypeSet:
    """Mean memory feature per predicted class for one image.

    f_m: (D, h, w) memory features; p_m: (C, h, w) memory probabilities at
    the same resolution.  Classes the memory model never predicts in this
    image are marked absent and get a zero vector.
    """
    if f_m.dim() != 3 or p_m.dim() != 3 or f_m.shape[1:] != p_m.shape[1:]:
        raise ParameterError(
            f"expected aligned (D, h, w) and (C, h, w), got {tuple(f_m.shape)} vs {tuple(p_m.shape)}")
    if not torch.isfinite(f_m).all():
        raise NumericError("feature map contains non-finite values")
    c = p_m.shape[0]
    with torch.no_grad():
        idx = pseudo_label_indices(p_m).reshape(-1)           # (h*w,)
        feats = f_m.reshape(f_m.shape[0], -1).t()             # (h*w, D)
        onehot = torch.zeros(c, idx.numel(), dtype=feats.dtype)
        onehot[idx, torch.arange(idx.numel())] = 1.0
        counts = onehot.sum(dim=1)                            # (C,)
        sums = onehot @ feats                                 # (C, D)
        present = counts > 0
        vectors = sums / counts.clamp(min=1.0).unsqueeze(1)
        vectors[~present] = 0.0
    return PrototypeSet(vectors=vectors, present=present)


def reference_distribution(f_t: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """Similarity of target features to prototypes, normalised over present
    classes; (C, h, w).

    Negative inner products clamp to 0 (features are post-ReLU, so this is a
    formality).  Pixels with zero similarity to every present prototype fall
    back to uniform-over-present; absent classes always get probability 0.
    Gradients flow through f_t; prototypes are treated as constants.
    """
    if f_t.dim() != 3:
        raise ParameterError(f"expected (D, h, w) target features, got {tuple(f_t.shape)}")
    n_present = int(protos.present.sum())
    if n_present == 0:
        raise ParameterError("prototype set has no present classes")
    vectors = protos.vectors.detach().to(f_t.dtype)
    present = protos.present.to(f_t.dtype).view(-1, 1, 1)
    sims = torch.einsum("cd,dhw->chw", vectors, f_t)
    sims = sims.clamp_min(0.0) * present
    denom = sims.sum(dim=0, keepdim=True)
    covered = denom > 0
    safe = torch.where(covered, denom, torch.ones_like(denom))
    fallback = (present / n_present).expand_as(sims)
    return torch.where(covered, sims / safe, fallback)


def reference_labels(p_ref: torch.Tensor) -> torch.Tensor:
    """One-hot argmax of the reference distribution (shared tie rule)."""
    return pseudo_label(p_ref)


def loss_ps(p_t: torch.Tensor, y_t: torch.Tensor, p_ref: torch.Tensor,
            y_ref: torch.Tensor) -> torch.Tensor:
    """Symmetric cross-supervision between model and reference distributions.

    Mean over pixels of CE(p_t, y_ref) + CE(p_ref, y_t).  The second term is
    the path that pulls target features toward the prototypes.
    """
    term1 = -(y_ref.detach() * torch.log(p_t + EPS)).sum(dim=-3)
    term2 = -(y_t.detach() * torch.log(p_ref + EPS)).sum(dim=-3)
    return (term1 + term2).mean()


def loss_pe(p_t: torch.Tensor, y_t: torch.Tensor, y_ref: torch.Tensor) -> torch.Tensor:
    """Cross-entropy on pixels where model and reference labels agree.

    Disagreeing pixels contribute 0 but stay in the denominator, so the loss
    shrinks as agreement drops.
    """
    agree = (y_t.detach() * y_ref.detach()).sum(dim=-3)
    ce = -(y_ref.detach() * torch.log(p_t + EPS)).sum(dim=-3)
    return (agree * ce).mean()


@dataclass
class PrototypeStore:
    """Stateful prototype provider implementing the three refresh policies."""

    mode: PrototypeMode
    num_classes: int
    feature_dim: int
    momentum: float = 0.99
    _static_cache: dict = field(default_factory=dict)
    _running: torch.Tensor | None = None
    _seen: torch.Tensor | None = None

    def __post_init__(self):
        self.mode = PrototypeMode(self.mode)
        if self.mode is PrototypeMode.MOMENTUM:
            self._running = torch.zeros(self.num_classes, self.feature_dim)
            self._seen = torch.zeros(self.num_classes, dtype=torch.bool)

    def get(self, image_id: str, f_m: torch.Tensor, p_m: torch.Tensor) -> PrototypeSet:
        if self.mode is PrototypeMode.STATIC and image_id in self._static_cache:
            return self._static_cache[image_id]
        fresh = estimate_prototypes(f_m, p_m)
        if self.mode is PrototypeMode.DYNAMIC:
            return fresh
        if self.mode is PrototypeMode.STATIC:
            self._static_cache[image_id] = fresh
            return fresh
        # MOMENTUM: blend newly observed classes into the global store
        with torch.no_grad():
            upd = fresh.present
            run = self._running.to(fresh.vectors.dtype)
            run[upd] = self.momentum * run[upd] + (1.0 - self.momentum) * fresh.vectors[upd]
            self._running = run
            self._seen |= upd
        return PrototypeSet(vectors=self._running.clone(), present=self._seen.clone())
