"""Self-supervision signals extracted from the frozen source model:
pseudo-labels, per-pixel importance weights, and the two losses they drive
(importance-weighted cross-entropy and prediction entropy).

All functions accept probability maps with the class axis at dim 1, either
(C, H, W) or batched (N, C, H, W), and return matching rank.
"""

from __future__ import annotations

import warnings
from enum import Enum

import torch
import torch.nn.functional as F

from .errors import NumericError, ParameterError

EPS = 1e-8  # inside every log; keeps hard one-hot targets finite


class ImportanceMode(str, Enum):
    """How per-pixel weights are derived from source probabilities.

    IAPC: 1 - p2/p1 (relative margin between the top two classes).
    RPL: constant 1 (plain pseudo-label retraining).
    FPL: p1 (confidence-weighted).
    SPL: 1 - p2 (absolute margin to the runner-up).
    """

    IAPC = "iapc"
    RPL = "rpl"
    FPL = "fpl"
    SPL = "spl"


def _batched(p: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if p.dim() == 3:
        return p.unsqueeze(0), True
    if p.dim() == 4:
        return p, False
    raise ParameterError(f"expected (C, H, W) or (N, C, H, W), got {tuple(p.shape)}")


def _check_probs(p: torch.Tensor) -> None:
    if not torch.isfinite(p).all():
        raise NumericError("probability map contains non-finite values")


def pseudo_label(p: torch.Tensor) -> torch.Tensor:
    """One-hot argmax along the class axis; ties go to the lowest class id.

    Output is detached: pseudo-labels are training targets, never a gradient
    path.
    """
    q, squeeze = _batched(p)
    _check_probs(q)
    with torch.no_grad():
        idx = q.argmax(dim=1)
        oh = F.one_hot(idx, num_classes=q.shape[1]).movedim(-1, 1).to(p.dtype)
    return oh[0] if squeeze else oh


def pseudo_label_indices(p: torch.Tensor) -> torch.Tensor:
    """Argmax class ids (same tie rule as `pseudo_label`)."""
    q, squeeze = _batched(p)
    with torch.no_grad():
        idx = q.argmax(dim=1)
    return idx[0] if squeeze else idx


def importance_map(p: torch.Tensor, mode: ImportanceMode = ImportanceMode.IAPC) -> torch.Tensor:
    """Per-pixel weight in [0, 1] from a probability map; shape (..., H, W).

    The IAPC weight is exact at its boundary cases: 0 on a top-two tie and
    1 iff the runner-up probability is 0, so the division is left bare (a
    smoothing epsilon would break both identities).  Degenerate inputs with
    a non-positive maximum raise instead.
    """
    mode = ImportanceMode(mode)
    q, squeeze = _batched(p)
    _check_probs(q)
    if q.shape[1] < 2:
        raise ParameterError("importance needs at least 2 classes")
    with torch.no_grad():
        if mode is ImportanceMode.RPL:
            w = torch.ones(q.shape[0], *q.shape[2:], dtype=q.dtype, device=q.device)
        else:
            top2 = torch.topk(q, k=2, dim=1).values
            p1, p2 = top2[:, 0], top2[:, 1]
            if mode is ImportanceMode.IAPC:
                if (p1 <= 0).any():
                    raise NumericError("IAPC importance undefined: max probability <= 0")
                w = 1.0 - p2 / p1
            elif mode is ImportanceMode.FPL:
                w = p1
            else:  # SPL
                w = 1.0 - p2
    return w[0] if squeeze else w


def loss_ia(p_t: torch.Tensor, y_hat: torch.Tensor, w: torch.Tensor,
            ignore: torch.Tensor | None = None) -> torch.Tensor:
    """Importance-weighted cross-entropy against source pseudo-labels.

    Mean over valid pixels of w * CE(p_t, y_hat); `ignore` is an optional
    boolean mask of pixels excluded from both the sum and the count.
    """
    q, _ = _batched(p_t)
    y, _ = _batched(y_hat)
    wmap = w if w.dim() == q.dim() - 1 else w.unsqueeze(0)
    ce = -(y.detach() * torch.log(q + EPS)).sum(dim=1)
    weighted = wmap.detach() * ce
    return _masked_mean(weighted, ignore)


def loss_im(p_t: torch.Tensor, ignore: torch.Tensor | None = None) -> torch.Tensor:
    """Mean per-pixel prediction entropy (minimising it sharpens predictions)."""
    q, _ = _batched(p_t)
    ent = -(q * torch.log(q + EPS)).sum(dim=1)
    return _masked_mean(ent, ignore)


def _masked_mean(per_pixel: torch.Tensor, ignore: torch.Tensor | None) -> torch.Tensor:
    if ignore is None:
        return per_pixel.mean()
    valid = ~ignore
    if valid.dim() == per_pixel.dim() - 1:
        valid = valid.unsqueeze(0)
    n = int(valid.sum())
    if n == 0:
        warnings.warn("all pixels ignored; loss is 0", RuntimeWarning, stacklevel=3)
        return per_pixel.sum() * 0.0
    return (per_pixel * valid).sum() / n
