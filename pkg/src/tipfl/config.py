"""Run-configuration schema (JSON), validated before any work is done."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import data as D
from .attack import AttackConfig
from .defenses import DefensePolicy
from .fl import FLRunConfig
from .model import ModelSpec, TrainConfig, linear_model, small_convnet
from .spectral import PerturbationConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    arch: Literal["small_convnet", "linear", "custom"] = "small_convnet"
    activation: Literal["sigmoid", "tanh", "relu"] = "sigmoid"
    layers: Optional[list[dict]] = None  # required for arch=custom
    init_scale: float = Field(1.0, gt=0)


class TrainSection(_Strict):
    learning_rate: float = Field(0.1, ge=0)
    batch_size: int = Field(16, ge=1)
    local_epochs: int = Field(2, ge=0)
    momentum: float = 0.0
    weight_decay: float = 0.0


class FederationSection(_Strict):
    num_clients: int = Field(10, ge=1)
    participation: float = Field(0.3, gt=0, le=1)
    rounds: int = Field(30, ge=1)
    partition: Literal["iid", "by-class"] = "iid"
    record_wall_time: bool = False


class DefenseSection(_Strict):
    kind: Literal["none", "dp", "apg", "tip"] = "none"
    epsilon: float = Field(5.0, gt=0)
    delta: float = Field(1e-5, gt=0, lt=1)
    sensitivity: float = Field(1.0, gt=0)
    mask_radius: float = Field(0.5, ge=0)
    channel_fraction: float = Field(0.1, gt=0, le=1)
    target_layers: Optional[list[str]] = None
    hermitian_noise: bool = False
    radius_mode: Literal["absolute", "fractional"] = "absolute"
    apg_target_fraction: float = Field(0.25, gt=0, le=1)
    beta: Optional[float] = Field(None, ge=0, le=1)
    clip_norm: Optional[float] = Field(None, gt=0)


class AttackSection(_Strict):
    distance: Literal["l2", "cosine"] = "l2"
    tv_weight: float = Field(0.0, ge=0)
    iterations: int = Field(1000, ge=1)
    optimizer: Literal["adam", "sign-adam"] = "adam"
    attack_lr: float = Field(0.1, gt=0)
    label_mode: Literal["known", "optimized"] = "known"
    batch_size: int = Field(1, ge=1)
    init: Literal["gaussian", "uniform"] = "uniform"
    lr_decay: bool = False
    defenses: Optional[list[Literal["none", "dp", "apg", "tip"]]] = None


class ExplainSection(_Strict):
    defenses: list[Literal["none", "dp", "apg", "tip"]] = ["dp", "apg", "tip"]
    layer: Optional[str] = None  # default: last conv layer
    skip_empty_reference: bool = True


class DataSection(_Strict):
    name: Literal["synthetic", "cifar10"] = "synthetic"
    path: Optional[str] = None
    num_classes: int = Field(4, ge=2)
    samples_per_class: int = Field(125, ge=1)
    image_size: int = Field(16, ge=2)
    noise: float = Field(0.1, ge=0)
    seed: int = 0
    subset: Optional[int] = Field(None, ge=2)
    test_size: int = Field(100, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    federation: FederationSection = FederationSection()
    defense: DefenseSection = DefenseSection()
    attack: AttackSection = AttackSection()
    explain: ExplainSection = ExplainSection()
    data: DataSection = DataSection()

    def snapshot(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    # builders for the core types

    def perturbation(self) -> PerturbationConfig:
        d = self.defense
        return PerturbationConfig(
            epsilon=d.epsilon,
            delta=d.delta,
            sensitivity=d.sensitivity,
            mask_radius=d.mask_radius,
            channel_fraction=d.channel_fraction,
            target_layers=tuple(d.target_layers) if d.target_layers is not None else None,
            hermitian_noise=d.hermitian_noise,
            radius_mode=d.radius_mode,
            beta_override=d.beta,
            clip_norm=d.clip_norm,
        )

    def policy(self, kind: str | None = None) -> DefensePolicy:
        return DefensePolicy(kind or self.defense.kind, self.perturbation(), self.defense.apg_target_fraction)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.learning_rate, t.batch_size, t.local_epochs, t.momentum, t.weight_decay)

    def fl_config(self) -> FLRunConfig:
        f = self.federation
        return FLRunConfig(
            f.num_clients, f.participation, f.rounds, self.train_config(), self.policy(), f.partition, self.seed, f.record_wall_time
        )

    def attack_config(self) -> AttackConfig:
        a = self.attack.model_dump(exclude={"defenses"})
        return AttackConfig(**a)

    def model_spec(self, dataset: D.Dataset) -> ModelSpec:
        c, h, w = dataset.images.shape[1:]
        if h != w:
            raise ConfigError("only square images are supported")
        m = self.model
        if m.arch == "small_convnet":
            return small_convnet(dataset.num_classes, h, c, m.activation)
        if m.arch == "linear":
            return linear_model(dataset.num_classes, h, c)
        if not m.layers:
            raise ConfigError("model.arch=custom needs model.layers")
        return ModelSpec.from_dict({"layers": m.layers, "num_classes": dataset.num_classes, "input_shape": [c, h, w]})

    def datasets(self) -> tuple[D.Dataset, D.Dataset]:
        """(train, test) splits; the test split is the last ``test_size`` samples."""
        d = self.data
        if d.name == "synthetic":
            full = D.make_synthetic(D.SyntheticSpec(d.num_classes, d.samples_per_class, d.image_size, d.noise, d.seed))
        else:
            if d.path is None:
                raise ConfigError("data.path is required for cifar10")
            full = D.load_cifar10(d.path)
            if d.subset is not None:
                full = full.subset(range(min(d.subset, len(full))))
        return full.split(d.test_size)


def load_config(path: str | os.PathLike, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    try:
        cfg = RunConfig.model_validate(raw)
        # surface cross-field errors (e.g. bad target layers) before any work starts
        cfg.fl_config()
        cfg.attack_config()
    except ValidationError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return cfg
