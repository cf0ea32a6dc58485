"""Recombine a predicted mean latent with reference-view noise before sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from ._validation import check_finite, check_same_shape
from .diffusion import DEFAULT_T_STAR, NoiseSchedule
from .metrics import get_metric

log = logging.getLogger(__name__)

STRATEGY_ORDER = ("A", "B")


@dataclass
class FusionConfig:
    strategy: str = "both"          # "a", "b" or "both"
    coefficient_sign: str = "minus"  # "minus": sqrt(1 - abar); "plus": sqrt(1 + abar)
    t_star: int = DEFAULT_T_STAR
    selector: str = "psnr"
    zero_noise: bool = False         # force eps = 0 in strategy A

    def __post_init__(self):
        self.strategy = self.strategy.lower()
        if self.strategy not in ("a", "b", "both"):
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        if self.coefficient_sign not in ("minus", "plus"):
            raise ValueError(f"coefficient_sign must be 'minus' or 'plus', got {self.coefficient_sign!r}")

    @property
    def strategies(self):
        return STRATEGY_ORDER if self.strategy == "both" else (self.strategy.upper(),)


def noise_coefficient(schedule: NoiseSchedule, cfg: FusionConfig) -> float:
    a = schedule.coef(cfg.t_star)
    return math.sqrt(1.0 - a) if cfg.coefficient_sign == "minus" else math.sqrt(1.0 + a)


def fuse_strategy_a(mu_hat, sigma_ref, prior, schedule: NoiseSchedule, cfg: FusionConfig):
    """``mu_hat + c * eps``, where ``eps`` is the prior's noise estimate for ``mu_hat + sigma_ref``."""
    check_same_shape(mu_hat, sigma_ref, ("mu_hat", "sigma_ref"))
    if cfg.zero_noise:
        return mu_hat.clone()
    batched = mu_hat.ndim == 4
    z_noisy = mu_hat + sigma_ref
    with torch.no_grad():
        eps = prior.predict_noise(z_noisy if batched else z_noisy[None], cfg.t_star)
    eps = check_finite(eps if batched else eps[0], "strategy A noise estimate").to(mu_hat.dtype)
    return mu_hat + noise_coefficient(schedule, cfg) * eps


def fuse_strategy_b(mu_hat, z_ref_inv, schedule: NoiseSchedule, cfg: FusionConfig):
    """``mu_hat + c * z_ref_inv`` with the reference's full inverted latent."""
    check_same_shape(mu_hat, z_ref_inv, ("mu_hat", "z_ref_inv"))
    return mu_hat + noise_coefficient(schedule, cfg) * z_ref_inv


def select_best(candidates, reference, selector="psnr"):
    """Return the ``(image, tag)`` closest to ``reference`` under ``selector``.

    Ties go to strategy A. An unregistered selector falls back to PSNR.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    if len(candidates) == 1:
        return candidates[0]
    try:
        metric = get_metric(selector) if isinstance(selector, str) else selector
    except KeyError:
        log.warning("selector %r unavailable; falling back to psnr", selector)
        metric = get_metric("psnr")
    rank = {t: i for i, t in enumerate(STRATEGY_ORDER)}
    ordered = sorted(candidates, key=lambda c: rank.get(c[1], len(rank)))
    best, best_d = None, None
    for img, tag in ordered:
        d = metric.distance(img, reference)
        if best is None or d < best_d:
            best, best_d = (img, tag), d
    return best
