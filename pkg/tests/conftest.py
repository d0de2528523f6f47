import numpy as np
import pytest
import torch

from tipfl.model import Activation, AvgPool, Conv2d, Dense, ModelSpec, init_params
from tipfl.tensor import RngStream


def fd_grad(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    out = torch.zeros_like(x)
    flat, g = x.view(-1), out.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def tiny_sigmoid_net(num_classes: int = 3, size: int = 4, in_ch: int = 1) -> ModelSpec:
    """conv(in->2, 3x3, pad 1) -> sigmoid -> avgpool(2) -> dense; well under 500 parameters."""
    half = size // 2
    return ModelSpec(
        (Conv2d(2, in_ch, 3, 3, 1, 1), Activation("sigmoid"), AvgPool(2), Dense(num_classes, 2 * half * half)),
        num_classes,
        (in_ch, size, size),
    )


def random_params(spec: ModelSpec, seed: int = 0, scale: float = 1.0):
    return init_params(spec, RngStream(seed, purpose="test-init"), scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
