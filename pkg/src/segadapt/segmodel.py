"""Compact fully-convolutional segmentation model plus the model plumbing
used throughout adaptation: EMA updates, checkpoints, feature export.

GroupNorm is used instead of BatchNorm on purpose: the EMA (memory) model
must be a pure parameter average of the student, and BatchNorm running
buffers would break that contract.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import struct
from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, NumericError, ParameterError

_MAGIC = b"SEGADPT1"
_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; stored in checkpoints so loads are self-contained."""

    num_classes: int
    in_channels: int = 3
    feature_dim: int = 32
    stride: int = 4  # fixed by the two stride-2 blocks below; recorded for tooling

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


class ModelOutput(NamedTuple):
    features: torch.Tensor     # (N, D, h, w), post-ReLU so non-negative
    head_logits: torch.Tensor  # (N, C, h, w), classifier at feature resolution
    logits: torch.Tensor       # (N, C, H, W), bilinear upsample of head_logits


class SegmentationModel(nn.Module):
    """Encoder (stride 4) -> feature map -> 1x1 classifier -> upsampled logits."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        if arch.num_classes < 2:
            raise ParameterError(f"num_classes must be >= 2, got {arch.num_classes}")
        self.arch = arch

        def block(cin, cout, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(4, cout),
                nn.ReLU(inplace=True),
            )

        self.encoder = nn.Sequential(
            block(arch.in_channels, 24, 1),
            block(24, 48, 2),
            block(48, 48, 2),
            block(48, arch.feature_dim, 1),
        )
        self.head = nn.Conv2d(arch.feature_dim, arch.num_classes, 1)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        if x.dim() != 4 or x.shape[1] != self.arch.in_channels:
            raise ParameterError(
                f"expected input (N, {self.arch.in_channels}, H, W), got {tuple(x.shape)}")
        feats = self.encoder(x)
        head = self.head(feats)
        logits = F.interpolate(head, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return ModelOutput(features=feats, head_logits=head, logits=logits)


def build_model(arch: ArchSpec, seed: int = 0) -> SegmentationModel:
    """Construct a model with seed-reproducible initialisation."""
    torch.manual_seed(seed)
    return SegmentationModel(arch)


def clone_model(model: SegmentationModel) -> SegmentationModel:
    return copy.deepcopy(model)


def freeze(model: SegmentationModel) -> SegmentationModel:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@dataclass
class ModelTriplet:
    """Frozen source, trainable target, and EMA memory model."""

    source: SegmentationModel
    target: SegmentationModel
    memory: SegmentationModel

    @classmethod
    def from_source(cls, source: SegmentationModel) -> "ModelTriplet":
        target = clone_model(source)
        memory = freeze(clone_model(source))
        freeze(source)
        target.train()
        for p in target.parameters():
            p.requires_grad_(True)
        return cls(source=source, target=target, memory=memory)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax for numpy arrays; rejects non-finite input."""
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@torch.no_grad()
def predict(model: SegmentationModel, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run one (H, W, 3) float image; returns (features hxwxD, logits HxWxC)."""
    if image.ndim != 3 or image.shape[2] != model.arch.in_channels:
        raise ParameterError(f"expected (H, W, {model.arch.in_channels}) image, got {image.shape}")
    was_training = model.training
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)
    out = model(x)
    if was_training:
        model.train()
    feats = out.features[0].permute(1, 2, 0).numpy().astype(np.float32)
    logits = out.logits[0].permute(1, 2, 0).numpy().astype(np.float32)
    return feats, logits


def predict_probs(model: SegmentationModel, image: np.ndarray) -> np.ndarray:
    """(H, W, C) softmax probabilities for one image."""
    _, logits = predict(model, image)
    return softmax_np(logits.astype(np.float64), axis=-1)


def _check_same_arch(a: SegmentationModel, b: SegmentationModel) -> None:
    sa, sb = a.state_dict(), b.state_dict()
    if list(sa.keys()) != list(sb.keys()) or any(
            sa[k].shape != sb[k].shape for k in sa):
        raise ParameterError("models have different architectures")


@torch.no_grad()
def ema_update(memory: SegmentationModel, target: SegmentationModel, alpha: float) -> None:
    """In-place memory <- (1 - alpha) * memory + alpha * target."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    _check_same_arch(memory, target)
    for pm, pt in zip(memory.parameters(), target.parameters()):
        pm.mul_(1.0 - alpha).add_(pt, alpha=alpha)


@torch.no_grad()
def copy_params(dst: SegmentationModel, src: SegmentationModel) -> None:
    _check_same_arch(dst, src)
    for pd, ps in zip(dst.parameters(), src.parameters()):
        pd.copy_(ps)


def params_sha256(model: SegmentationModel) -> str:
    """Hash of all parameter bytes in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().numpy()).tobytes())
    return h.hexdigest()


def save_checkpoint(path: str, model: SegmentationModel, step: int = 0,
                    config_hash: str = "") -> None:
    """Binary checkpoint: magic, version, JSON header, raw float32 parameter blobs.

    The header records the architecture and a parameter manifest, so a load
    needs nothing but the file.  Serialisation is canonical (sorted keys,
    fixed order), making checkpoint bytes a fingerprint of the model.
    """
    state = model.state_dict()
    manifest = [{"name": k, "shape": list(t.shape)} for k, t in state.items()]
    header = json.dumps({
        "arch": model.arch.to_dict(),
        "step": step,
        "config_hash": config_hash,
        "params": manifest,
    }, sort_keys=True).encode()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(header)))
        f.write(header)
        for t in state.values():
            f.write(np.ascontiguousarray(t.detach().numpy().astype(np.float32)).tobytes())


def load_checkpoint(path: str) -> tuple[SegmentationModel, dict]:
    """Load a checkpoint; returns (model, header info)."""
    if not os.path.isfile(path):
        raise CheckpointError(f"no such checkpoint: '{path}'")
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"'{path}' is not a segadapt checkpoint (bad magic)")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(f.read(header_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header in '{path}': {e}") from e
        arch = ArchSpec.from_dict(header["arch"])
        model = SegmentationModel(arch)
        state = model.state_dict()
        new_state = {}
        for entry in header["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in state:
                raise CheckpointError(f"unknown parameter '{name}' in '{path}'")
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * 4)
            if len(buf) != n * 4:
                raise CheckpointError(f"truncated checkpoint '{path}' at parameter '{name}'")
            arr = np.frombuffer(buf, dtype=np.float32).reshape(shape)
            new_state[name] = torch.from_numpy(arr.copy())
        if set(new_state) != set(state):
            raise CheckpointError(f"parameter manifest mismatch in '{path}'")
    model.load_state_dict(new_state)
    return model, header


def export_features(model: SegmentationModel, samples, out_dir: str,
                    limit: int | None = None) -> list[str]:
    """Dump per-image feature maps as raw .bin plus a .json shape sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for s in samples[:limit]:
        feats, _ = predict(model, s.image)
        bin_path = os.path.join(out_dir, s.id + ".bin")
        with open(bin_path, "wb") as f:
            f.write(np.ascontiguousarray(feats).tobytes())
        with open(os.path.join(out_dir, s.id + ".json"), "w") as f:
            json.dump({"shape": list(feats.shape), "dtype": "float32",
                       "order": "C", "layout": "hwd"}, f, sort_keys=True)
            f.write("\n")
        written.append(bin_path)
    return written
