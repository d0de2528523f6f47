"""Numeric substrate: float64 tensors, autodiff with an op allowlist, unitary DFT, seeded streams.

Tensors are plain ``torch.Tensor`` objects in float64. Gradients come from
torch autograd, but every graph is walked before differentiation so that only
the op set used by the workbench models can appear in it.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64
CDTYPE = torch.complex128

torch.set_default_dtype(DTYPE)


class UnsupportedOpError(RuntimeError):
    """Raised when a traced graph contains an op outside the supported set."""

    def __init__(self, op: str):
        super().__init__(f"unsupported op in graph: {op}")
        self.op = op


# Backward node names torch emits for the supported ops (add, mul, matmul, conv2d,
# sigmoid, tanh, relu, mean, sum, softmax-cross-entropy, reshape, avg-pool) plus
# the elementary glue they expand into.
_ALLOWED_NODES = frozenset(
    {
        "AccumulateGrad",
        "AddBackward0",
        "AddBackward1",
        "SubBackward0",
        "SubBackward1",
        "RsubBackward1",
        "NegBackward0",
        "MulBackward0",
        "MulBackward1",
        "DivBackward0",
        "DivBackward1",
        "PowBackward0",
        "AbsBackward0",
        "SqrtBackward0",
        "MmBackward0",
        "MvBackward0",
        "AddmmBackward0",
        "TBackward0",
        "ConvolutionBackward0",
        "ConvolutionBackwardBackward0",
        "SigmoidBackward0",
        "SigmoidBackwardBackward0",
        "TanhBackward0",
        "TanhBackwardBackward0",
        "ReluBackward0",
        "ThresholdBackward0",
        "ThresholdBackwardBackward0",
        "MeanBackward0",
        "MeanBackward1",
        "SumBackward0",
        "SumBackward1",
        "LogSoftmaxBackward0",
        "LogSoftmaxBackwardDataBackward0",
        "SoftmaxBackward0",
        "SoftmaxBackwardDataBackward0",
        "NllLossBackward0",
        "NllLossBackwardBackward0",
        "ViewBackward0",
        "ReshapeAliasBackward0",
        "UnsafeViewBackward0",
        "ExpandBackward0",
        "SqueezeBackward0",
        "SqueezeBackward1",
        "UnsqueezeBackward0",
        "AvgPool2DBackward0",
        "AvgPool2DBackwardBackward0",
        "CloneBackward0",
        "CatBackward0",
        "SliceBackward0",
        "SelectBackward0",
        "PermuteBackward0",
        "TransposeBackward0",
        "DotBackward0",
    }
)


def check_graph(out: torch.Tensor) -> None:
    """Walk the autograd graph behind ``out`` and reject unsupported ops."""
    seen: set[int] = set()
    stack = [out.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        name = type(node).__name__
        if name not in _ALLOWED_NODES:
            raise UnsupportedOpError(name)
        stack.extend(child for child, _ in node.next_functions)


def tensor(data, shape: Sequence[int] | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


def grad(
    f: Callable[[], torch.Tensor] | torch.Tensor,
    wrt: Sequence[torch.Tensor],
    create_graph: bool = False,
) -> list[torch.Tensor]:
    """Reverse-mode gradient of a scalar ``f`` with respect to each tensor in ``wrt``.

    ``f`` is either an already-built scalar or a thunk that builds it. Inputs
    that do not influence ``f`` get a zero gradient of matching shape.
    """
    out = f() if callable(f) else f
    if out.numel() != 1:
        raise ValueError(f"grad needs a scalar output, got shape {tuple(out.shape)}")
    if out.grad_fn is None:
        return [torch.zeros_like(t) for t in wrt]
    check_graph(out)
    gs = torch.autograd.grad(
        out, list(wrt), create_graph=create_graph, allow_unused=True
    )
    return [torch.zeros_like(t) if g is None else g for t, g in zip(wrt, gs)]


def grad2(
    inner: Callable[[], torch.Tensor],
    outer: Callable[[list[torch.Tensor]], torch.Tensor],
    params: Sequence[torch.Tensor],
    wrt: Sequence[torch.Tensor],
) -> list[torch.Tensor]:
    """Gradient of ``outer(d inner / d params)`` with respect to ``wrt``.

    The inner gradient is traced with its own graph kept alive, so the outer
    scalar can be differentiated back through it (double backprop). relu has a
    zero second derivative almost everywhere; sigmoid/tanh nets carry full
    curvature.
    """
    params = list(params)
    inner_grads = grad(inner, params, create_graph=True)
    value = outer(inner_grads)
    return grad(value, wrt)


@dataclass(frozen=True)
class RngStream:
    """Counter-derived random stream keyed by ``(seed, round, client, purpose)``.

    Distinct keys give independent numpy generators, so results never depend
    on which worker draws first.
    """

    seed: int
    round: int = 0
    client: int = 0
    purpose: str = ""

    def child(self, purpose: str, *, round: int | None = None, client: int | None = None) -> "RngStream":
        tag = f"{self.purpose}/{purpose}" if self.purpose else purpose
        return RngStream(
            self.seed,
            self.round if round is None else round,
            self.client if client is None else client,
            tag,
        )

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(self.purpose.encode()).digest()
        tag = int.from_bytes(digest[:8], "little")
        ss = np.random.SeedSequence(
            entropy=self.seed & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(self.round, self.client, tag),
        )
        return np.random.Generator(np.random.PCG64(ss))


def gaussian(stream: RngStream, shape: Sequence[int]) -> torch.Tensor:
    """I.i.d. standard normal tensor; identical streams give identical tensors."""
    return torch.from_numpy(stream.generator().standard_normal(tuple(shape)))


def _dft_matrix(n: int, inverse: bool = False) -> torch.Tensor:
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    # exact integer phase reduction keeps large k*j products well conditioned
    phase = (np.outer(k, k) % n) * (2.0 * math.pi / n)
    m = np.exp(sign * 1j * phase) / math.sqrt(n)
    return torch.from_numpy(m)


def dft2(grid: torch.Tensor) -> torch.Tensor:
    """Unitary 2-D DFT of an ``(H, W)`` grid, computed as a direct separable sum."""
    if grid.ndim != 2 or min(grid.shape) < 1:
        raise ValueError(f"dft2 expects a non-empty 2-D grid, got shape {tuple(grid.shape)}")
    h, w = grid.shape
    x = grid.to(CDTYPE)
    return _dft_matrix(h) @ x @ _dft_matrix(w).T


def idft2(grid: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`dft2` (also unitary)."""
    if grid.ndim != 2 or min(grid.shape) < 1:
        raise ValueError(f"idft2 expects a non-empty 2-D grid, got shape {tuple(grid.shape)}")
    h, w = grid.shape
    x = grid.to(CDTYPE)
    return _dft_matrix(h, inverse=True) @ x @ _dft_matrix(w, inverse=True).T


def energy(x: torch.Tensor) -> float:
    return float((x.abs() ** 2).sum())


def flatten_all(tensors: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.cat([t.reshape(-1) for t in tensors])
