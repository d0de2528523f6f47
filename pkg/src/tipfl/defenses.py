"""Defenses applied to a client's trained parameters before upload."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import torch

from . import tensor as T
from .interpret import GuidanceSet, sik_select
from .model import ModelSpec, Params
from .spectral import PerturbationConfig, apply_tip
from .tensor import RngStream

Kind = Literal["none", "dp", "apg", "tip"]


@dataclass(frozen=True)
class DefensePolicy:
    kind: Kind = "none"
    shared: PerturbationConfig = field(default_factory=PerturbationConfig)
    apg_target_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in ("none", "dp", "apg", "tip"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind == "apg" and not 0 < self.apg_target_fraction <= 1:
            raise ValueError("apg_target_fraction must be in (0, 1]")

    @property
    def needs_guidance(self) -> bool:
        return self.kind in ("apg", "tip")


def _weight_names(params: Params) -> list[str]:
    return [k for k in params if k.endswith(".weight")]


def _noise(stream: RngStream, name: str, shape, scale: float) -> torch.Tensor:
    return scale * T.gaussian(stream.child(f"noise/{name}"), shape)


def apply_defense(
    policy: DefensePolicy,
    params: Params,
    spec: ModelSpec,
    guidance: GuidanceSet | None,
    stream: RngStream,
) -> Params:
    """Return the parameters the client uploads. Biases are never perturbed."""
    if policy.kind == "none":
        return {k: v.clone() for k, v in params.items()}
    if policy.needs_guidance and not guidance:
        raise ValueError(f"defense {policy.kind!r} needs guidance samples")
    cfg = policy.shared
    out = {k: v.clone() for k, v in params.items()}

    if policy.kind == "dp":
        zeta = cfg.zeta()
        for name in _weight_names(out):
            out[name] = out[name] + _noise(stream, name, out[name].shape, zeta)
        return out

    targets = cfg.targets(spec)
    if policy.kind == "tip":
        importance = {lid: sik_select(params, spec, lid, guidance, cfg.channel_fraction) for lid in targets}
        return apply_tip(params, spec, cfg, importance, stream)

    # apg: spatial noise on the important kernels of target layers, full noise elsewhere
    zeta = cfg.zeta()
    for name in _weight_names(out):
        lid = name[: -len(".weight")]
        if lid in targets:
            imp = sik_select(params, spec, lid, guidance, policy.apg_target_fraction)
            w = out[name]
            for k in imp.selected:
                w[k] = w[k] + _noise(stream, f"{name}/{k}", w[k].shape, zeta)
        else:
            out[name] = out[name] + _noise(stream, name, out[name].shape, zeta)
    return out
