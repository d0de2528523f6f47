"""Frequency-domain perturbation of selected convolution kernels.

Each selected kernel slice receives standard Gaussian noise that is moved to
the frequency domain, restricted to high-frequency bins by a radial mask,
scaled by the per-layer factor beta and added to the slice's spectrum before
transforming back and keeping the real part.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np
import torch

from . import tensor as T
from .interpret import ChannelImportance
from .model import ModelSpec, Params
from .tensor import RngStream


def calibrate(epsilon: float, delta: float, sensitivity: float, num_layers: int) -> tuple[float, float, float]:
    """Gaussian-mechanism scale: returns ``(b, zeta, beta)``.

    b = sqrt(2 ln(1.25/delta)), zeta = b * sensitivity / epsilon and
    beta = min(1, zeta / num_layers). ``epsilon=inf`` gives zero noise.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if not sensitivity > 0:
        raise ValueError(f"sensitivity must be > 0, got {sensitivity}")
    if num_layers < 1:
        raise ValueError("need at least one target layer")
    b = math.sqrt(2.0 * math.log(1.25 / delta))
    zeta = b * sensitivity / epsilon
    beta = min(1.0, zeta / num_layers)
    return b, zeta, beta


@dataclass(frozen=True)
class PerturbationConfig:
    epsilon: float = 5.0
    delta: float = 1e-5
    sensitivity: float = 1.0
    mask_radius: float = 0.5
    channel_fraction: float = 0.1
    target_layers: tuple[str, ...] | None = None  # None: every conv layer
    hermitian_noise: bool = False
    radius_mode: Literal["absolute", "fractional"] = "absolute"
    beta_override: float | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.target_layers is not None:
            object.__setattr__(self, "target_layers", tuple(str(t) for t in self.target_layers))
            if not self.target_layers:
                raise ValueError("target_layers must be non-empty")
        if not 0 < self.channel_fraction <= 1:
            raise ValueError("channel_fraction must be in (0, 1]")
        if self.mask_radius < 0:
            raise ValueError("mask_radius must be non-negative")
        if self.radius_mode not in ("absolute", "fractional"):
            raise ValueError(f"unknown radius_mode {self.radius_mode!r}")
        if self.beta_override is not None and not 0 <= self.beta_override <= 1:
            raise ValueError("beta_override must be in [0, 1]")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        calibrate(self.epsilon, self.delta, self.effective_sensitivity, 1)

    @property
    def effective_sensitivity(self) -> float:
        return self.clip_norm if self.clip_norm is not None else self.sensitivity

    def targets(self, spec: ModelSpec) -> tuple[str, ...]:
        convs = spec.conv_layers()
        if not convs:
            raise ValueError("the model has no convolutional layer to perturb")
        if self.target_layers is None:
            return tuple(convs)
        for t in self.target_layers:
            if t not in convs:
                raise ValueError(f"target layer {t!r} is not a conv layer of the model")
        return self.target_layers

    def zeta(self) -> float:
        return calibrate(self.epsilon, self.delta, self.effective_sensitivity, 1)[1]

    def beta(self, spec: ModelSpec) -> float:
        if self.beta_override is not None:
            return self.beta_override
        return calibrate(self.epsilon, self.delta, self.effective_sensitivity, len(self.targets(spec)))[2]


def build_mask(h: int, w: int, radius: float) -> np.ndarray:
    """High-pass binary mask laid out like an unshifted DFT.

    Built in centred coordinates, where bin (u, v) passes iff
    (u - h/2)^2 + (v - w/2)^2 >= radius^2, then inverse-shifted so the DC
    bin sits at index (0, 0).
    """
    if h < 1 or w < 1:
        raise ValueError("mask dimensions must be >= 1")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    u = np.arange(h)[:, None]
    v = np.arange(w)[None, :]
    centred = (u - h / 2) ** 2 + (v - w / 2) ** 2 >= radius**2
    return np.fft.ifftshift(centred).astype(np.float64)


def effective_radius(cfg: PerturbationConfig, h: int, w: int) -> float:
    if cfg.radius_mode == "fractional":
        return cfg.mask_radius * min(h, w) / 2
    return cfg.mask_radius


def hermitian_mask(mask: np.ndarray) -> np.ndarray:
    """Largest sub-mask invariant under (u, v) -> (-u, -v); keeps masked real noise real."""
    flipped = np.roll(mask[::-1, ::-1], (1, 1), axis=(0, 1))
    return mask * flipped


def spectral_perturbation(noise: torch.Tensor, beta: float, mask: np.ndarray) -> torch.Tensor:
    """Complex spatial perturbation idft2(beta * mask * dft2(noise)), before the real-part projection."""
    m = torch.from_numpy(np.asarray(mask, dtype=np.float64))
    if tuple(m.shape) != tuple(noise.shape):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match slice {tuple(noise.shape)}")
    return T.idft2(T.dft2(noise) * m * beta)


def perturb_channel(
    kernel: torch.Tensor,
    beta: float,
    mask: np.ndarray,
    stream: RngStream,
    hermitian: bool = False,
) -> torch.Tensor:
    """Re(idft2(dft2(kernel) + beta * mask * dft2(noise))) for one (H, W) slice.

    Evaluated as kernel + Re(idft2(beta * mask * dft2(noise))), which is the
    same by linearity and leaves the kernel bit-exact when beta is 0.
    """
    if tuple(np.shape(mask)) != tuple(kernel.shape):
        raise ValueError(f"mask shape {np.shape(mask)} does not match slice {tuple(kernel.shape)}")
    if beta == 0:
        return kernel.clone()
    if hermitian:
        mask = hermitian_mask(mask)
    noise = T.gaussian(stream, kernel.shape)
    return kernel + spectral_perturbation(noise, beta, mask).real


def apply_tip(
    params: Params,
    spec: ModelSpec,
    cfg: PerturbationConfig,
    importance: Mapping[str, ChannelImportance],
    stream: RngStream,
) -> Params:
    """Perturb every input-channel slice of the selected kernels in each target layer.

    Noise for slice (layer, kernel, channel) comes from its own derived
    stream, so the result does not depend on iteration order.
    """
    targets = cfg.targets(spec)
    missing = [t for t in targets if t not in importance]
    if missing:
        raise ValueError(f"no channel importance for target layers {missing}")
    beta = cfg.beta(spec)
    out = {k: v.clone() for k, v in params.items()}
    for lid in targets:
        weight = out[f"{lid}.weight"]
        n_out, n_in, h, w = weight.shape
        imp = importance[lid]
        if len(imp.alpha) != n_out or any(not 0 <= k < n_out for k in imp.selected):
            raise ValueError(f"importance for layer {lid} does not match its {n_out} kernels")
        mask = build_mask(h, w, effective_radius(cfg, h, w))
        for k in imp.selected:
            for c in range(n_in):
                s = stream.child(f"tip/{lid}/{k}/{c}")
                weight[k, c] = perturb_channel(weight[k, c], beta, mask, s, cfg.hermitian_noise)
    return out
