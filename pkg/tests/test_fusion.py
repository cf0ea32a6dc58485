import logging
import math

import numpy as np
import pytest
import torch

from latentview.diffusion import NoiseSchedule
from latentview.exceptions import NumericalError
from latentview.fusion import FusionConfig, fuse_strategy_a, fuse_strategy_b, noise_coefficient, select_best
from latentview.metrics import get_metric
from latentview.priors import ZeroPrior


class ConstPrior:
    latent_shape = (4, 4, 4)
    num_train_steps = 1000
    identity = "const"

    def __init__(self, value=1.0):
        self.value = value

    def predict_noise(self, z, t):
        return torch.full_like(z, self.value)


def schedule_with(abar, t=600):
    ab = np.linspace(0.9999, 0.001, 1000)
    ab[t] = abar
    ab[:t] = np.maximum(ab[:t], abar)
    ab[t + 1:] = np.minimum(ab[t + 1:], abar)
    return NoiseSchedule.from_alpha_bars(ab)


def test_coefficients():
    s = schedule_with(0.36)
    assert noise_coefficient(s, FusionConfig()) == pytest.approx(0.8)
    assert noise_coefficient(s, FusionConfig(coefficient_sign="plus")) == pytest.approx(math.sqrt(1.36))


def test_strategy_a_examples():
    s = schedule_with(0.36)
    mu = torch.randn(4, 4, 4)
    assert torch.equal(fuse_strategy_a(mu, torch.zeros_like(mu), ZeroPrior((4, 4, 4)), s, FusionConfig()), mu)
    out = fuse_strategy_a(mu, torch.randn(4, 4, 4), ConstPrior(1.0), s, FusionConfig())
    assert torch.allclose(out - mu, torch.full_like(mu, 0.8), atol=1e-6)
    forced = fuse_strategy_a(mu, torch.randn(4, 4, 4), ConstPrior(1.0), s, FusionConfig(zero_noise=True))
    assert torch.equal(forced, mu)
    batched = fuse_strategy_a(mu[None].repeat(2, 1, 1, 1), torch.zeros(2, 4, 4, 4), ConstPrior(1.0), s, FusionConfig())
    assert batched.shape == (2, 4, 4, 4)


def test_strategy_a_errors():
    s = NoiseSchedule()
    with pytest.raises(ValueError):
        fuse_strategy_a(torch.zeros(4, 4, 4), torch.zeros(4, 4, 3), ConstPrior(), s, FusionConfig())
    with pytest.raises(NumericalError):
        fuse_strategy_a(torch.zeros(4, 4, 4), torch.zeros(4, 4, 4), ConstPrior(float("inf")), s, FusionConfig())


def test_strategy_b_examples():
    s = schedule_with(0.36)
    mu, z = torch.randn(4, 4, 4), torch.randn(4, 4, 4)
    assert torch.equal(fuse_strategy_b(mu, torch.zeros_like(mu), s, FusionConfig()), mu)
    c = noise_coefficient(s, FusionConfig())
    assert torch.equal(fuse_strategy_b(mu, z, s, FusionConfig()) - mu, (mu + c * z) - mu)
    plus = fuse_strategy_b(torch.zeros(4, 4, 4), torch.ones(4, 4, 4), s, FusionConfig(coefficient_sign="plus"))
    assert torch.allclose(plus, torch.full((4, 4, 4), 1.1662), atol=1e-4)
    with pytest.raises(ValueError):
        fuse_strategy_b(mu, torch.zeros(4, 2, 2), s, FusionConfig())


def test_strategies_differ():
    s = NoiseSchedule()
    mu, sigma, z = torch.randn(4, 4, 4), torch.randn(4, 4, 4), torch.randn(4, 4, 4)
    a = fuse_strategy_a(mu, sigma, ConstPrior(0.5), s, FusionConfig())
    b = fuse_strategy_b(mu, z, s, FusionConfig())
    assert not torch.equal(a, b)
    assert torch.isfinite(a).all() and torch.isfinite(b).all()


def test_config_validation():
    assert FusionConfig("both").strategies == ("A", "B")
    assert FusionConfig("B").strategies == ("B",)
    with pytest.raises(ValueError):
        FusionConfig("c")
    with pytest.raises(ValueError):
        FusionConfig(coefficient_sign="times")


def test_select_best(rng, caplog):
    ref = rng.random((16, 16, 3))
    noisy = np.clip(ref + rng.normal(0, 0.1, ref.shape), 0, 1)
    assert select_best([(noisy, "A")], ref)[1] == "A"
    assert select_best([(noisy, "A"), (ref, "B")], ref, get_metric("mse"))[1] == "B"
    assert select_best([(ref, "B"), (ref.copy(), "A")], ref)[1] == "A"
    with caplog.at_level(logging.WARNING):
        assert select_best([(noisy, "A"), (ref, "B")], ref, "lpips-missing")[1] == "B"
    assert "falling back" in caplog.text
    with pytest.raises(ValueError):
        select_best([], ref)
