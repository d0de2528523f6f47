"""Grad-CAM channel importance, guidance-sample selection and top-k kernel selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import tensor as T
from .model import ModelSpec, Params, ShapeError, forward
from .tensor import RngStream

GuidanceSet = list[tuple[torch.Tensor, int]]


@dataclass(frozen=True)
class ChannelImportance:
    layer_id: str
    alpha: np.ndarray
    selected: tuple[int, ...]


@dataclass(frozen=True)
class Heatmap:
    raw: np.ndarray  # ReLU'd map at input resolution, before normalisation
    values: np.ndarray  # max-normalised to [0, 1]


def select_guidance(images: torch.Tensor, labels: torch.Tensor, stream: RngStream) -> GuidanceSet:
    """One uniformly drawn sample per class present in the shard, in class order."""
    if len(labels) == 0:
        raise ValueError("cannot select guidance samples from an empty shard")
    rng = stream.generator()
    lab = labels.numpy()
    out: GuidanceSet = []
    for c in np.unique(lab):
        idx = np.flatnonzero(lab == c)
        i = int(idx[rng.integers(len(idx))])
        out.append((images[i], int(c)))
    return out


def _probe(params: Params, spec: ModelSpec, layer_id: str, image: torch.Tensor, label: int):
    """Feature map H (K, m, n) at ``layer_id`` and d y_c / d H."""
    if layer_id not in spec.conv_layers():
        raise ShapeError(f"layer {layer_id!r} is not convolutional")
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"label {label} out of range")
    captured = {}

    def hook(lid, h):
        if lid != layer_id:
            return h
        leaf = h.detach().requires_grad_(True)
        captured["h"] = leaf
        return leaf

    detached = {k: v.detach() for k, v in params.items()}
    logits = forward(detached, spec, image.unsqueeze(0), hook=hook)
    h = captured["h"]
    (g,) = T.grad(logits[0, label], [h])
    return h.detach()[0], g[0]


def gradcam_alpha(params: Params, spec: ModelSpec, layer_id: str, image: torch.Tensor, label: int) -> np.ndarray:
    """Spatially averaged gradient of the class logit over each channel's feature map."""
    _, g = _probe(params, spec, layer_id, image, label)
    return g.mean(dim=(1, 2)).numpy()


def num_selected(n: int, r: float) -> int:
    if not 0 < r <= 1:
        raise ValueError(f"channel fraction must be in (0, 1], got {r}")
    # tolerance absorbs binary-fraction error in products like 100 * 0.29
    return max(1, math.floor(n * r + 1e-9))


def top_channels(scores: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest scores, ties going to the lower index, returned sorted."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return tuple(sorted(order[:k]))


def sik_select(params: Params, spec: ModelSpec, layer_id: str, guidance: GuidanceSet, r: float) -> ChannelImportance:
    if not guidance:
        raise ValueError("empty guidance set")
    alphas = [gradcam_alpha(params, spec, layer_id, img, lab) for img, lab in guidance]
    score = np.mean(alphas, axis=0)
    return ChannelImportance(layer_id, score, top_channels(score, num_selected(len(score), r)))


def gradcam_heatmap(params: Params, spec: ModelSpec, layer_id: str, image: torch.Tensor, label: int) -> Heatmap:
    h, g = _probe(params, spec, layer_id, image, label)
    alpha = g.mean(dim=(1, 2))
    cam = torch.relu((alpha[:, None, None] * h).sum(0))
    size = tuple(image.shape[-2:])
    if tuple(cam.shape) != size:
        cam = F.interpolate(cam[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]
    raw = cam.clamp_min(0.0).numpy()
    peak = raw.max()
    values = raw / peak if peak > 0 else np.zeros_like(raw)
    return Heatmap(raw, values)
