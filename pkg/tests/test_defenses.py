import numpy as np
import pytest
import torch

from tipfl.defenses import DefensePolicy, apply_defense
from tipfl.model import linear_model, small_convnet
from tipfl.spectral import PerturbationConfig
from tipfl.tensor import RngStream

from conftest import random_params


def _guidance(spec, rng, n=3):
    return [(torch.from_numpy(rng.uniform(size=spec.input_shape)), c) for c in range(n)]


def test_none_is_bitwise_identity():
    spec = small_convnet(3, image_size=8)
    params = random_params(spec)
    out = apply_defense(DefensePolicy("none"), params, spec, None, RngStream(0))
    assert all(torch.equal(params[k], out[k]) for k in params)
    assert all(out[k] is not params[k] for k in params)


def test_dp_noise_variance_matches_zeta():
    spec = linear_model(10, 100, in_ch=1)  # 100,000 weights
    params = random_params(spec)
    policy = DefensePolicy("dp")
    out = apply_defense(policy, params, spec, None, RngStream(3))
    diff = (out["0.weight"] - params["0.weight"]).numpy()
    zeta = policy.shared.zeta()
    assert diff.size == 100_000
    assert diff.var() == pytest.approx(zeta**2, rel=0.05)
    assert torch.equal(out["0.bias"], params["0.bias"])


def test_tip_with_zero_beta_is_identity(rng):
    spec = small_convnet(3, image_size=8)
    params = random_params(spec)
    policy = DefensePolicy("tip", PerturbationConfig(beta_override=0.0))
    out = apply_defense(policy, params, spec, _guidance(spec, rng), RngStream(0))
    assert all(torch.equal(params[k], out[k]) for k in params)


def test_tip_touches_only_selected_kernels(rng):
    spec = small_convnet(3, image_size=8)
    params = random_params(spec)
    policy = DefensePolicy("tip", PerturbationConfig(channel_fraction=0.25))
    out = apply_defense(policy, params, spec, _guidance(spec, rng), RngStream(0))
    for name in params:
        changed = [k for k in range(params[name].shape[0]) if not torch.equal(params[name][k], out[name][k])]
        if name == "0.weight":
            assert len(changed) == 2  # floor(8 * 0.25)
        elif name == "2.weight":
            assert len(changed) == 4  # floor(16 * 0.25)
        else:
            assert changed == [], name


def test_apg_targets_and_rest():
    rng = np.random.default_rng(0)
    spec = small_convnet(3, image_size=8)
    params = random_params(spec)
    policy = DefensePolicy("apg", PerturbationConfig(target_layers=("2",)), apg_target_fraction=0.25)
    out = apply_defense(policy, params, spec, _guidance(spec, rng), RngStream(0))
    changed = [k for k in range(16) if not torch.equal(params["2.weight"][k], out["2.weight"][k])]
    assert len(changed) == 4
    # non-target weights all noised, biases untouched
    assert (out["0.weight"] != params["0.weight"]).all()
    assert (out["5.weight"] != params["5.weight"]).all()
    for name in params:
        if name.endswith(".bias"):
            assert torch.equal(params[name], out[name])


@pytest.mark.parametrize("kind", ["none", "dp", "apg", "tip"])
def test_shapes_preserved_and_deterministic(kind, rng):
    spec = small_convnet(3, image_size=8)
    params = random_params(spec)
    g = _guidance(spec, rng)
    a = apply_defense(DefensePolicy(kind), params, spec, g, RngStream(5))
    b = apply_defense(DefensePolicy(kind), params, spec, g, RngStream(5))
    assert list(a) == list(params)
    assert all(a[k].shape == params[k].shape and torch.equal(a[k], b[k]) for k in a)


def test_guidance_required():
    spec = small_convnet(3, image_size=8)
    with pytest.raises(ValueError):
        apply_defense(DefensePolicy("tip"), random_params(spec), spec, None, RngStream(0))


def test_unknown_kind():
    with pytest.raises(ValueError):
        DefensePolicy("laplace")
