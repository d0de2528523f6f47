"""Gradient-inversion attacks: recover inputs by matching observed gradients."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np
import torch

from . import metrics
from . import tensor as T
from .defenses import DefensePolicy, apply_defense
from .model import ModelSpec, Params, cross_entropy, forward, loss_and_grad
from .tensor import RngStream


class AttackError(RuntimeError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    distance: Literal["l2", "cosine"] = "l2"
    tv_weight: float = 0.0
    iterations: int = 1000
    optimizer: Literal["adam", "sign-adam"] = "adam"
    attack_lr: float = 0.1
    label_mode: Literal["known", "optimized"] = "known"
    batch_size: int = 1
    init: Literal["gaussian", "uniform"] = "uniform"
    lr_decay: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.distance not in ("l2", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.optimizer not in ("adam", "sign-adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.label_mode not in ("known", "optimized"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")
        if self.init not in ("gaussian", "uniform"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class Inversion:
    reconstruction: torch.Tensor  # clamped to [0, 1]
    final_distance: float
    history: list[float]  # best distance so far, one entry per iteration
    labels: torch.Tensor


@dataclass
class TargetResult:
    target_id: int
    defense: str
    distance_kind: str
    final_distance: float
    mse: float
    psnr: float
    ssim: float
    original: np.ndarray
    reconstruction: np.ndarray

    def row(self) -> tuple:
        return (self.target_id, self.defense, self.distance_kind, self.final_distance, self.mse, self.psnr, self.ssim)


@dataclass
class AttackReport:
    targets: list[TargetResult]
    config: dict = field(default_factory=dict)


ATTACK_HEADER = ("target_id", "defense", "distance_kind", "final_distance", "mse", "psnr", "ssim")


def observe_gradient(params: Params, spec: ModelSpec, batch: torch.Tensor, labels: torch.Tensor) -> Params:
    """The exact mean-loss gradient an honest-but-curious server would see."""
    return loss_and_grad(params, spec, batch, labels)[1]


def pseudo_gradient(global_params: Params, upload: Params, lr: float) -> Params:
    """(global - upload) / lr: the gradient implied by a single SGD step."""
    return {k: (global_params[k] - upload[k]) / lr for k in global_params}


def client_view(
    global_params: Params,
    spec: ModelSpec,
    batch: torch.Tensor,
    labels: torch.Tensor,
    lr: float,
    policy: DefensePolicy,
    stream: RngStream,
) -> Params:
    """Gradient the server reconstructs from one defended single-step client upload."""
    g = observe_gradient(global_params, spec, batch, labels)
    local = {k: global_params[k] - lr * g[k] for k in global_params}
    guidance = [(x, int(y)) for x, y in zip(batch, labels)] if policy.needs_guidance else None
    upload = apply_defense(policy, local, spec, guidance, stream)
    return pseudo_gradient(global_params, upload, lr)


def gradient_distance(ga: Sequence[torch.Tensor], gb: Sequence[torch.Tensor], kind: str = "l2") -> torch.Tensor:
    """l2: summed squared difference; cosine: 1 - <a, b> / (|a| |b|) over all tensors jointly."""
    ga, gb = list(ga), list(gb)
    if len(ga) != len(gb) or any(a.shape != b.shape for a, b in zip(ga, gb)):
        raise ValueError("gradient structures differ")
    if kind == "l2":
        return sum(((a - b) ** 2).sum() for a, b in zip(ga, gb))
    if kind == "cosine":
        dot = sum((a * b).sum() for a, b in zip(ga, gb))
        na = sum((a * a).sum() for a in ga)
        nb = sum((b * b).sum() for b in gb)
        if float(na.detach()) == 0 or float(nb.detach()) == 0:
            raise DegenerateInputError("cosine distance undefined for a zero gradient")
        return 1 - dot / (na.sqrt() * nb.sqrt())
    raise ValueError(f"unknown distance {kind!r}")


def total_variation(image: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV summed over channels (and batch for rank-4 input)."""
    if image.ndim not in (3, 4):
        raise ValueError(f"total_variation needs a (C,H,W) or (B,C,H,W) image, got rank {image.ndim}")
    dh = (image[..., 1:, :] - image[..., :-1, :]).abs().sum()
    dw = (image[..., :, 1:] - image[..., :, :-1]).abs().sum()
    return dh + dw


def invert(
    params: Params,
    spec: ModelSpec,
    observed: Params,
    true_labels: torch.Tensor | None,
    atk: AttackConfig,
    stream: RngStream,
) -> Inversion:
    """Optimise dummy inputs (and soft labels) so their gradient matches ``observed``."""
    if atk.label_mode == "known" and true_labels is None:
        raise ValueError("label_mode 'known' needs the true labels")
    b = atk.batch_size if true_labels is None else len(true_labels)
    shape = (b, *spec.input_shape)
    rng = stream.child("dummy").generator()
    x0 = rng.standard_normal(shape) if atk.init == "gaussian" else rng.uniform(0.0, 1.0, shape)
    x = torch.from_numpy(x0).requires_grad_(True)
    opt_vars = [x]
    label_logits = None
    if atk.label_mode == "optimized":
        label_logits = torch.from_numpy(rng.standard_normal((b, spec.num_classes))).requires_grad_(True)
        opt_vars.append(label_logits)

    names = list(params)
    weights = [params[k].detach().clone().requires_grad_(True) for k in names]
    target = [observed[k].detach() for k in names]
    wdict = dict(zip(names, weights))

    def objective():
        labels = true_labels if label_logits is None else torch.softmax(label_logits, dim=-1)
        loss = cross_entropy(forward(wdict, spec, x), labels)
        inner = T.grad(loss, weights, create_graph=True)
        dist = gradient_distance(inner, target, atk.distance)
        obj = dist + atk.tv_weight * total_variation(x) if atk.tv_weight else dist
        return obj, dist

    opt = torch.optim.Adam(opt_vars, lr=atk.attack_lr)
    milestones = [int(atk.iterations * f) for f in (3 / 8, 5 / 8, 7 / 8)] if atk.lr_decay else []
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=0.1)

    best = math.inf
    best_x = x.detach().clone()
    best_labels = None
    history: list[float] = []
    for it in range(atk.iterations):
        obj, dist = objective()
        d = float(dist.detach())
        if not math.isfinite(float(obj.detach())):
            raise AttackError(f"non-finite attack objective at iteration {it}")
        if d < best:
            best = d
            best_x = x.detach().clone()
            best_labels = None if label_logits is None else label_logits.detach().clone()
        history.append(best)
        grads = T.grad(obj, opt_vars)
        for v, g in zip(opt_vars, grads):
            v.grad = g.sign() if atk.optimizer == "sign-adam" else g
        opt.step()
        sched.step()
    # the last step's iterate has not been scored yet
    obj, dist = objective()
    dist = float(dist.detach())
    if math.isfinite(dist) and dist < best:
        best = dist
        best_x = x.detach().clone()
        best_labels = None if label_logits is None else label_logits.detach().clone()
        history[-1] = best
    if best_labels is None:
        labels = true_labels if true_labels is not None else torch.zeros(b, dtype=torch.long)
    else:
        labels = best_labels.argmax(-1)
    return Inversion(best_x.clamp(0.0, 1.0), best, history, labels)


def score(original: torch.Tensor, reconstruction: torch.Tensor) -> tuple[float, float, float]:
    """(mse, psnr, ssim) in the 0-255 domain for one (C, H, W) image pair."""
    a = metrics.to_metric_scale(original.detach().numpy())
    r = metrics.to_metric_scale(reconstruction.detach().numpy())
    return metrics.mse(a, r), metrics.psnr(a, r), metrics.ssim(a, r)


def attack_target(
    params: Params,
    spec: ModelSpec,
    image: torch.Tensor,
    label: int,
    target_id: int,
    policy: DefensePolicy,
    atk: AttackConfig,
    lr: float,
    stream: RngStream,
    defense_name: str | None = None,
) -> TargetResult:
    """Full pipeline for one target: defended upload, server-side inversion, scoring."""
    batch = image.unsqueeze(0)
    labels = torch.tensor([label])
    observed = client_view(params, spec, batch, labels, lr, policy, stream.child("client"))
    inv = invert(params, spec, observed, labels if atk.label_mode == "known" else None, atk, stream.child("attack"))
    rec = inv.reconstruction[0]
    m, p, s = score(image, rec)
    return TargetResult(
        target_id,
        defense_name or policy.kind,
        atk.distance,
        inv.final_distance,
        m,
        p,
        s,
        image.detach().numpy(),
        rec.numpy(),
    )


def config_snapshot(atk: AttackConfig) -> dict:
    return asdict(atk)
