"""Small conv-nets as pure functions of an explicit parameter dict, plus local SGD."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import tensor as T
from .tensor import RngStream

Params = dict[str, torch.Tensor]
Hook = Callable[[str, torch.Tensor], torch.Tensor]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Conv2d:
    out_ch: int
    in_ch: int
    kh: int = 3
    kw: int = 3
    stride: int = 1
    pad: int = 0
    kind: Literal["conv2d"] = "conv2d"


@dataclass(frozen=True)
class Activation:
    fn: Literal["sigmoid", "tanh", "relu"] = "sigmoid"
    kind: Literal["activation"] = "activation"


@dataclass(frozen=True)
class AvgPool:
    k: int = 2
    kind: Literal["avg_pool"] = "avg_pool"


@dataclass(frozen=True)
class Dense:
    out: int
    inp: int
    kind: Literal["dense"] = "dense"


@dataclass(frozen=True)
class ResidualBlock:
    """conv3x3 -> act -> conv3x3, identity skip, then act."""

    channels: int
    fn: Literal["sigmoid", "tanh", "relu"] = "sigmoid"
    kind: Literal["residual"] = "residual"


Layer = Union[Conv2d, Activation, AvgPool, Dense, ResidualBlock]
_LAYER_TYPES = {c.kind: c for c in (Conv2d, Activation, AvgPool, Dense, ResidualBlock)}
_ACT = {"sigmoid": torch.sigmoid, "tanh": torch.tanh, "relu": torch.relu}


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]
    num_classes: int
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.param_shapes()  # validates composition

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            if kind not in _LAYER_TYPES:
                raise ShapeError(f"unknown layer kind {kind!r}")
            layers.append(_LAYER_TYPES[kind](**entry))
        return cls(tuple(layers), int(d["num_classes"]), tuple(d["input_shape"]))

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {
            "layers": [asdict(layer) for layer in self.layers],
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter name -> shape, walking the layer list and checking that shapes compose."""
        shapes: dict[str, tuple[int, ...]] = {}
        shape: tuple[int, ...] = self.input_shape
        dense_seen = 0
        for i, layer in enumerate(self.layers):
            lid = str(i)
            if dense_seen and not isinstance(layer, Activation):
                raise ShapeError(f"layer {i}: only activations may follow the final dense layer")
            if isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise ShapeError(f"layer {i}: conv expects {layer.in_ch} input channels, got {shape}")
                h = (shape[1] + 2 * layer.pad - layer.kh) // layer.stride + 1
                w = (shape[2] + 2 * layer.pad - layer.kw) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {i}: conv output would be empty")
                shapes[f"{lid}.weight"] = (layer.out_ch, layer.in_ch, layer.kh, layer.kw)
                shapes[f"{lid}.bias"] = (layer.out_ch,)
                shape = (layer.out_ch, h, w)
            elif isinstance(layer, ResidualBlock):
                if len(shape) != 3 or shape[0] != layer.channels:
                    raise ShapeError(f"layer {i}: residual block expects {layer.channels} channels, got {shape}")
                for sub in ("conv1", "conv2"):
                    shapes[f"{lid}.{sub}.weight"] = (layer.channels, layer.channels, 3, 3)
                    shapes[f"{lid}.{sub}.bias"] = (layer.channels,)
            elif isinstance(layer, AvgPool):
                if len(shape) != 3 or shape[1] < layer.k or shape[2] < layer.k:
                    raise ShapeError(f"layer {i}: cannot pool {shape} with k={layer.k}")
                shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
            elif isinstance(layer, Dense):
                flat = math.prod(shape)
                if flat != layer.inp:
                    raise ShapeError(f"layer {i}: dense expects {layer.inp} inputs, got {flat}")
                shapes[f"{lid}.weight"] = (layer.out, layer.inp)
                shapes[f"{lid}.bias"] = (layer.out,)
                shape = (layer.out,)
                dense_seen += 1
            elif not isinstance(layer, Activation):
                raise ShapeError(f"layer {i}: unknown layer {layer!r}")
        if dense_seen != 1:
            raise ShapeError(f"expected exactly one dense layer, found {dense_seen}")
        if shape != (self.num_classes,):
            raise ShapeError(f"final output {shape} does not match {self.num_classes} classes")
        return shapes

    def conv_layers(self) -> list[str]:
        """Ids of every convolution, in forward order (residual convs as ``i.conv1``/``i.conv2``)."""
        ids = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                ids.append(str(i))
            elif isinstance(layer, ResidualBlock):
                ids += [f"{i}.conv1", f"{i}.conv2"]
        return ids

    def conv_out_channels(self, layer_id: str) -> int:
        if layer_id not in self.conv_layers():
            raise ShapeError(f"layer {layer_id!r} is not convolutional")
        return self.param_shapes()[f"{layer_id}.weight"][0]


def small_convnet(num_classes: int, image_size: int = 32, in_ch: int = 3, act: str = "sigmoid") -> ModelSpec:
    """conv(3->8) -> act -> conv(8->16) -> act -> avgpool(2) -> dense."""
    half = image_size // 2
    return ModelSpec(
        (
            Conv2d(8, in_ch, 3, 3, 1, 1),
            Activation(act),
            Conv2d(16, 8, 3, 3, 1, 1),
            Activation(act),
            AvgPool(2),
            Dense(num_classes, 16 * half * half),
        ),
        num_classes,
        (in_ch, image_size, image_size),
    )


def linear_model(num_classes: int, image_size: int, in_ch: int = 3) -> ModelSpec:
    return ModelSpec(
        (Dense(num_classes, in_ch * image_size * image_size),),
        num_classes,
        (in_ch, image_size, image_size),
    )


def init_params(spec: ModelSpec, stream: RngStream, scale: float = 1.0) -> Params:
    """Uniform(-s/sqrt(fan_in), s/sqrt(fan_in)) for every weight and bias."""
    rng = stream.generator()
    params: Params = {}
    shapes = spec.param_shapes()
    for name, shape in shapes.items():
        wshape = shapes[name.rsplit(".", 1)[0] + ".weight"]
        fan_in = math.prod(wshape[1:])
        bound = scale / math.sqrt(fan_in)
        params[name] = torch.from_numpy(rng.uniform(-bound, bound, size=shape))
    return params


def zeros_like_params(spec: ModelSpec) -> Params:
    return {name: torch.zeros(shape, dtype=T.DTYPE) for name, shape in spec.param_shapes().items()}


def clone_params(params: Params) -> Params:
    return {k: v.detach().clone() for k, v in params.items()}


def check_params(params: Params, spec: ModelSpec) -> None:
    expected = spec.param_shapes()
    if list(params) != list(expected):
        raise ShapeError(f"parameter names {list(params)} do not match spec {list(expected)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: shape {tuple(params[name].shape)} != {shape}")


def forward(params: Params, spec: ModelSpec, batch: torch.Tensor, hook: Hook | None = None) -> torch.Tensor:
    """Logits ``(B, num_classes)``.

    ``hook(layer_id, H)`` is called with the rectified feature map of every
    convolution (the output of the activation directly after it, or the raw
    conv output when none follows) and may return a replacement tensor.
    """
    if batch.ndim != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {tuple(batch.shape)} does not match (B, {spec.input_shape})")
    h = batch
    layers = spec.layers
    pending: str | None = None
    for i, layer in enumerate(layers):
        lid = str(i)
        if isinstance(layer, Conv2d):
            h = F.conv2d(h, params[f"{lid}.weight"], params[f"{lid}.bias"], stride=layer.stride, padding=layer.pad)
            pending = lid
            if i + 1 < len(layers) and isinstance(layers[i + 1], Activation):
                continue
        elif isinstance(layer, Activation):
            h = _ACT[layer.fn](h)
        elif isinstance(layer, AvgPool):
            h = F.avg_pool2d(h, layer.k)
        elif isinstance(layer, Dense):
            h = F.linear(h.reshape(h.shape[0], -1), params[f"{lid}.weight"], params[f"{lid}.bias"])
        elif isinstance(layer, ResidualBlock):
            act = _ACT[layer.fn]
            inner = act(F.conv2d(h, params[f"{lid}.conv1.weight"], params[f"{lid}.conv1.bias"], padding=1))
            if hook is not None:
                inner = hook(f"{lid}.conv1", inner)
            h = act(h + F.conv2d(inner, params[f"{lid}.conv2.weight"], params[f"{lid}.conv2.bias"], padding=1))
            pending = f"{lid}.conv2"
        if pending is not None and hook is not None:
            h = hook(pending, h)
        pending = None
    return h


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy; ``labels`` are class ids or per-row probability vectors."""
    if labels.ndim == 2:
        return -(labels * F.log_softmax(logits, dim=-1)).sum(-1).mean()
    return F.cross_entropy(logits, labels)


def _check_labels(labels: torch.Tensor, spec: ModelSpec) -> None:
    if labels.ndim == 1 and labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= spec.num_classes):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")


def loss_and_grad(params: Params, spec: ModelSpec, batch: torch.Tensor, labels: torch.Tensor) -> tuple[float, Params]:
    _check_labels(labels, spec)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = cross_entropy(forward(leaves, spec, batch), labels)
    grads = T.grad(loss, list(leaves.values()))
    return float(loss.detach()), {k: g.detach() for k, g in zip(leaves, grads)}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    local_epochs: int = 2
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.local_epochs < 0:
            raise ValueError("batch_size must be >= 1 and local_epochs >= 0")
        if self.momentum != 0 or self.weight_decay != 0:
            raise ValueError("only plain SGD is supported (momentum and weight decay must be 0)")


def local_train(
    params: Params,
    spec: ModelSpec,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    stream: RngStream,
) -> Params:
    """Plain mini-batch SGD for ``cfg.local_epochs`` passes; returns new parameters."""
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty shard")
    w = clone_params(params)
    if cfg.learning_rate == 0:
        return w
    for epoch in range(cfg.local_epochs):
        order = stream.child(f"shuffle{epoch}").generator().permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            _, g = loss_and_grad(w, spec, images[idx], labels[idx])
            w = {k: w[k] - cfg.learning_rate * g[k] for k in w}
    return w


@torch.no_grad()
def evaluate(params: Params, spec: ModelSpec, images: torch.Tensor, labels: torch.Tensor, batch: int = 256) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) over a dataset."""
    correct = 0
    total_loss = 0.0
    for start in range(0, len(labels), batch):
        x, y = images[start : start + batch], labels[start : start + batch]
        logits = forward(params, spec, x)
        total_loss += float(F.cross_entropy(logits, y, reduction="sum"))
        correct += int((logits.argmax(-1) == y).sum())
    n = max(len(labels), 1)
    return correct / n, total_loss / n


def flat_params(params: Params) -> np.ndarray:
    return T.flatten_all(params.values()).numpy()
