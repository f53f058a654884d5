"""Source pretraining and source-free adaptation loops.

Adaptation never reads target labels: the loop consumes ImageSample.image
and ImageSample.id only, so it runs unchanged on an images-only dataset
view.  The source model is frozen throughout and its parameter hash is
asserted unchanged at the end of every run.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .data_synth import IGNORE, photometric_augment
from .edik import ImportanceMode, importance_map, loss_ia, loss_im, pseudo_label
from .errors import NonFiniteLossError, ParameterError
from .ldsk import (
    PrototypeMode,
    PrototypeStore,
    loss_pe,
    loss_ps,
    reference_distribution,
    reference_labels,
)
from .segmodel import (
    ArchSpec,
    ModelTriplet,
    SegmentationModel,
    build_model,
    copy_params,
    ema_update,
    params_sha256,
)

LOSS_NAMES = ("ia", "pe", "ps", "im")


@dataclass
class AdaptationConfig:
    """Hyper-parameters of a source-free adaptation run.

    Loss weights follow the reference setting (ia 0.2, pe 0.5, ps 0.01,
    im 2.0); a weight of exactly 0 disables that loss entirely.
    """

    lambda_ia: float = 0.2
    lambda_pe: float = 0.5
    lambda_ps: float = 0.01
    lambda_im: float = 2.0
    alpha_ema: float = 1e-4
    lr: float = 1e-4
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 6
    iterations: int = 500
    crop: int | None = None
    seed: int = 0
    importance_mode: ImportanceMode = ImportanceMode.IAPC
    prototype_mode: PrototypeMode = PrototypeMode.DYNAMIC
    ema_enabled: bool = True
    augment_strength: float = 0.25

    def __post_init__(self):
        self.importance_mode = ImportanceMode(self.importance_mode)
        self.prototype_mode = PrototypeMode(self.prototype_mode)
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_ia", "lambda_pe", "lambda_ps", "lambda_im"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.alpha_ema <= 1.0:
            raise ParameterError(f"alpha_ema must be in [0, 1], got {self.alpha_ema}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ParameterError(f"iterations must be >= 0, got {self.iterations}")
        if self.crop is not None and self.crop < 8:
            raise ParameterError(f"crop must be >= 8 or None, got {self.crop}")
        if not 0.0 <= self.augment_strength <= 1.0:
            raise ParameterError(
                f"augment_strength must be in [0, 1], got {self.augment_strength}")

    def loss_weights(self) -> dict[str, float]:
        return {"ia": self.lambda_ia, "pe": self.lambda_pe,
                "ps": self.lambda_ps, "im": self.lambda_im}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["importance_mode"] = self.importance_mode.value
        d["prototype_mode"] = self.prototype_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PretrainConfig:
    """Supervised source-training hyper-parameters."""

    lr: float = 2.5e-4
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 6
    iterations: int = 2000
    crop: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.iterations < 1 or self.batch_size < 1:
            raise ParameterError("lr must be > 0, iterations and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def poly_lr(base_lr: float, step: int, total: int, power: float) -> float:
    """base_lr * (1 - step/total)^power; step 0 returns base_lr exactly."""
    if not 0 <= step < total:
        raise ParameterError(f"step {step} outside [0, {total})")
    return base_lr * (1.0 - step / total) ** power


@dataclass
class TrainLog:
    """Per-iteration loss curve; wall_time is informational and excluded
    from reproducibility comparisons."""

    columns: tuple = ("step", "loss_ia", "loss_pe", "loss_ps", "loss_im",
                      "loss_total", "lr", "wall_time")
    rows: list = field(default_factory=list)

    def append(self, step, losses: dict, total: float, lr: float, wall: float) -> None:
        self.rows.append((step, losses.get("ia", 0.0), losses.get("pe", 0.0),
                          losses.get("ps", 0.0), losses.get("im", 0.0),
                          total, lr, wall))

    def loss_rows(self) -> list[tuple]:
        """Everything except wall_time, for determinism comparisons."""
        return [r[:-1] for r in self.rows]

    def to_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(",".join(self.columns) + "\n")
            for r in self.rows:
                f.write(",".join(f"{v:.8g}" if isinstance(v, float) else str(v)
                                 for v in r) + "\n")


def total_loss(components: dict[str, torch.Tensor | float],
               weights: dict[str, float],
               iteration: int | None = None) -> torch.Tensor | float:
    """Weighted sum of loss components; aborts on any non-finite component."""
    total = 0.0
    for name in LOSS_NAMES:
        if name not in weights:
            continue
        value = components.get(name, 0.0)
        scalar = float(value) if not torch.is_tensor(value) else float(value.detach())
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, iteration)
        total = total + weights[name] * value
    if torch.is_tensor(total) and not torch.isfinite(total.detach()):
        raise NonFiniteLossError("total", iteration)
    return total


class _BatchSampler:
    """Epoch-shuffled index stream; deterministic for (n, seed)."""

    def __init__(self, n: int, seed: int):
        if n < 1:
            raise ParameterError("dataset is empty")
        self.n = n
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        self.order = []

    def next_batch(self, size: int) -> list[int]:
        out = []
        while len(out) < size:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(int(self.order.pop(0)))
        return out


def _stack_images(images: list[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.ascontiguousarray(im.transpose(2, 0, 1)) for im in images])
    return torch.from_numpy(arr).to(dtype)


def _crop_window(shape, crop, rng) -> tuple[slice, slice]:
    h, w = shape[:2]
    if crop is None or (crop >= h and crop >= w):
        return slice(None), slice(None)
    ch, cw = min(crop, h), min(crop, w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return slice(top, top + ch), slice(left, left + cw)


def pretrain_source(samples, arch: ArchSpec, config: PretrainConfig | None = None,
                    log: TrainLog | None = None) -> SegmentationModel:
    """Supervised training on the labelled source domain (SGD, poly decay)."""
    config = config or PretrainConfig()
    config.validate()
    if not samples:
        raise ParameterError("cannot pretrain on an empty dataset")
    if any(s.label is None for s in samples):
        raise ParameterError("pretraining needs labelled samples")
    model = build_model(arch, seed=config.seed)
    model.train()
    dtype = next(model.parameters()).dtype
    opt = torch.optim.SGD(model.parameters(), lr=config.lr,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    sampler = _BatchSampler(len(samples), config.seed)
    crop_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(8,)))
    for t in range(config.iterations):
        lr = poly_lr(config.lr, t, config.iterations, config.lr_power)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = sampler.next_batch(config.batch_size)
        images, labels = [], []
        for i in idx:
            ys, xs = _crop_window(samples[i].image.shape, config.crop, crop_rng)
            images.append(samples[i].image[ys, xs])
            labels.append(samples[i].label[ys, xs])
        x = _stack_images(images, dtype)
        y = torch.from_numpy(np.stack(labels)).long()
        logits = model(x).logits
        loss = F.cross_entropy(logits, y, ignore_index=IGNORE)
        if not torch.isfinite(loss.detach()):
            raise NonFiniteLossError("cross_entropy", t)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None:
            log.append(t, {}, float(loss.detach()), lr, time.time())
    model.eval()
    return model


def adapt(source: SegmentationModel, samples, config: AdaptationConfig | None = None,
          log: TrainLog | None = None) -> SegmentationModel:
    """Source-free adaptation of a copy of `source` to unlabelled samples.

    Returns the adapted target model.  `samples` only needs images and ids;
    labels, if present, are never read.  With every loss weight at 0 the
    returned model is parameter-identical to the source.
    """
    config = config or AdaptationConfig()
    config.validate()
    if not samples:
        raise ParameterError("cannot adapt on an empty dataset")
    source_hash = params_sha256(source)
    triplet = ModelTriplet.from_source(source)
    target, memory = triplet.target, triplet.memory
    dtype = next(target.parameters()).dtype

    weights = {k: v for k, v in config.loss_weights().items() if v > 0.0}
    use_edik = "ia" in weights or "im" in weights
    use_ldsk = "ps" in weights or "pe" in weights
    if not weights:
        warnings.warn("all loss weights are 0; adaptation is a no-op", RuntimeWarning)

    torch.manual_seed(config.seed)
    opt = torch.optim.SGD(target.parameters(), lr=config.lr,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    sampler = _BatchSampler(len(samples), config.seed)
    crop_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(8,)))
    aug_root = np.random.SeedSequence(config.seed, spawn_key=(9,))
    store = PrototypeStore(config.prototype_mode, source.arch.num_classes,
                           source.arch.feature_dim)

    for t in range(config.iterations):
        lr = poly_lr(config.lr, t, config.iterations, config.lr_power)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = sampler.next_batch(config.batch_size)
        clean, augmented, ids = [], [], []
        for slot, i in enumerate(idx):
            ys, xs = _crop_window(samples[i].image.shape, config.crop, crop_rng)
            img = samples[i].image[ys, xs]
            clean.append(img)
            aug_seed = np.random.SeedSequence(
                entropy=aug_root.entropy, spawn_key=aug_root.spawn_key + (t, slot))
            augmented.append(photometric_augment(
                img, config.augment_strength, seed=aug_seed.generate_state(1)[0]))
            ids.append(samples[i].id)
        x_clean = _stack_images(clean, dtype)
        x_aug = _stack_images(augmented, dtype)

        components: dict[str, torch.Tensor] = {}
        if weights:
            out_t = target(x_aug)

            if use_edik:
                p_t_full = torch.softmax(out_t.logits, dim=1)
                with torch.no_grad():
                    p_src = torch.softmax(triplet.source(x_clean).logits, dim=1)
                    y_hat = pseudo_label(p_src)
                    w_map = importance_map(p_src, config.importance_mode)
                if "ia" in weights:
                    components["ia"] = loss_ia(p_t_full, y_hat, w_map)
                if "im" in weights:
                    components["im"] = loss_im(p_t_full)

            if use_ldsk:
                with torch.no_grad():
                    out_m = memory(x_clean)
                    p_m_feat = torch.softmax(out_m.head_logits, dim=1)
                p_t_feat = torch.softmax(out_t.head_logits, dim=1)
                p_refs = []
                for b in range(len(idx)):
                    protos = store.get(ids[b], out_m.features[b], p_m_feat[b])
                    p_refs.append(reference_distribution(out_t.features[b], protos))
                p_ref = torch.stack(p_refs)
                y_ref = reference_labels(p_ref)
                y_t = pseudo_label(p_t_feat)
                if "ps" in weights:
                    components["ps"] = loss_ps(p_t_feat, y_t, p_ref, y_ref)
                if "pe" in weights:
                    components["pe"] = loss_pe(p_t_feat, y_t, y_ref)

            loss = total_loss(components, weights, iteration=t)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_val = float(loss.detach())
        else:
            total_val = 0.0

        if config.ema_enabled:
            ema_update(memory, target, config.alpha_ema)
        else:
            copy_params(memory, target)

        if log is not None:
            log.append(t, {k: float(v.detach()) for k, v in components.items()},
                       total_val, lr, time.time())

    if params_sha256(source) != source_hash:
        raise AssertionError("source model changed during adaptation")
    target.eval()
    return target
