"""Attack and interpretability experiments shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import torch

from . import metrics
from .attack import AttackConfig, TargetResult, attack_target
from .data import Dataset
from .defenses import DefensePolicy, apply_defense
from .fl import worker_count
from .interpret import Heatmap, gradcam_heatmap, select_guidance
from .model import ModelSpec, Params
from .tensor import RngStream

log = logging.getLogger(__name__)

EXPLAIN_HEADER = ("sample_id", "defense", "mse", "psnr", "ssim")


def run_attacks(
    params: Params,
    spec: ModelSpec,
    targets: Dataset,
    policies: Sequence[DefensePolicy],
    atk: AttackConfig,
    client_lr: float,
    seed: int,
) -> list[TargetResult]:
    """Invert every target under every policy; streams depend only on (seed, target)."""
    jobs = [(i, p) for i in range(len(targets)) for p in policies]

    def one(job):
        i, policy = job
        stream = RngStream(seed, client=i, purpose="attack-target")
        return attack_target(
            params, spec, targets.images[i], int(targets.labels[i]), i, policy, atk, client_lr, stream
        )

    torch.set_num_threads(1)
    with ThreadPoolExecutor(max_workers=min(worker_count(), max(len(jobs), 1))) as pool:
        return list(pool.map(one, jobs))


@dataclass
class ExplainRow:
    sample_id: int
    defense: str
    mse: float
    psnr: float
    ssim: float
    reference: Heatmap
    heatmap: Heatmap

    def row(self) -> tuple:
        return (self.sample_id, self.defense, self.mse, self.psnr, self.ssim)


def defended_models(
    params: Params,
    spec: ModelSpec,
    guidance_source: Dataset,
    policies: Sequence[DefensePolicy],
    seed: int,
) -> dict[str, Params]:
    """One-shot application of each policy to the same trained model."""
    guidance = select_guidance(guidance_source.images, guidance_source.labels, RngStream(seed, purpose="explain/guidance"))
    return {
        p.kind: apply_defense(p, params, spec, guidance, RngStream(seed, purpose=f"explain/{p.kind}"))
        for p in policies
    }


def run_explain(
    params: Params,
    spec: ModelSpec,
    samples: Dataset,
    guidance_source: Dataset,
    policies: Sequence[DefensePolicy],
    k: int,
    seed: int,
    layer: str | None = None,
    skip_empty_reference: bool = True,
) -> list[ExplainRow]:
    """Grad-CAM heatmaps of each defended model compared against the undefended one.

    Samples are taken in dataset order. With ``skip_empty_reference`` a sample
    whose undefended heatmap is identically zero is passed over, since it has
    no localisation to preserve.
    """
    layer = layer or spec.conv_layers()[-1]
    models = defended_models(params, spec, guidance_source, policies, seed)
    rows: list[ExplainRow] = []
    taken = 0
    for i in range(len(samples)):
        if taken == k:
            break
        x, y = samples.images[i], int(samples.labels[i])
        ref = gradcam_heatmap(params, spec, layer, x, y)
        if skip_empty_reference and ref.raw.max() == 0:
            continue
        taken += 1
        a = ref.values * metrics.MAX
        for p in policies:
            h = gradcam_heatmap(models[p.kind], spec, layer, x, y)
            b = h.values * metrics.MAX
            rows.append(ExplainRow(i, p.kind, metrics.mse(a, b), metrics.psnr(a, b), metrics.ssim(a, b), ref, h))
    if taken < k:
        log.warning("only %d of %d requested samples have a non-empty reference heatmap", taken, k)
    return rows
