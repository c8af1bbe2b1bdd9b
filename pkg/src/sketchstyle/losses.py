"""Reconstruction and adversarial losses.

Conventions:
  * L1 terms are means over pixels and channels, so the guide weights do not
    depend on resolution.
  * Discriminator scores arrive raw; they are squashed with the logistic
    function here and every log argument is clamped to [1e-7, 1].
  * The style target for the AC head is the z-scored hint passed through the
    same logistic function, so scores and targets share (0, 1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import torch

from .arch import ConfigError, GeneratorOutput

LOG_CLAMP = 1e-7
RGB_TO_LUMA = (0.299, 0.587, 0.114)
LOSS_MODES = ("acgan", "dcgan")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3      # guide decoder 1
    beta: float = 0.9       # guide decoder 2
    lam: float = 100.0      # weight of the L1 objective against the GAN term

    def validate(self) -> "LossWeights":
        for name in ("alpha", "beta", "lam"):
            v = getattr(self, name)
            if not v >= 0:
                raise ConfigError(f"loss weight {name} must be >= 0 (got {v})")
        return self


class L1Terms(NamedTuple):
    final: torch.Tensor
    guide1: torch.Tensor
    guide2: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {f"l1_{k}": float(v.detach()) for k, v in self._asdict().items()}


class GanTerms(NamedTuple):
    d_loss: torch.Tensor
    g_loss: torch.Tensor


def grayscale(image: torch.Tensor) -> torch.Tensor:
    """Rec.601 luma. Channel axis is dim -3: (3, H, W) -> (1, H, W), (N, 3, H, W) -> (N, 1, H, W)."""
    if image.dim() < 3 or image.shape[-3] != 3:
        raise ValueError(f"grayscale expects 3 channels on dim -3, got shape {tuple(image.shape)}")
    r, g, b = image.unbind(dim=-3)
    return (RGB_TO_LUMA[0] * r + RGB_TO_LUMA[1] * g + RGB_TO_LUMA[2] * b).unsqueeze(-3)


def _mae(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def l1_composite(outputs: GeneratorOutput, target: torch.Tensor, weights: LossWeights,
                 grayscale_guide1: bool = True) -> L1Terms:
    """Final-output L1 plus alpha/beta-weighted guide L1 terms.

    With `grayscale_guide1` the first guide is compared to the luma of the
    target, otherwise to the target itself. Missing guide outputs contribute 0.
    """
    final = _mae(outputs.final, target, "final output")
    zero = final.new_zeros(())
    g1 = g2 = zero
    if outputs.guide1 is not None:
        g1 = _mae(outputs.guide1, grayscale(target) if grayscale_guide1 else target, "guide 1")
    if outputs.guide2 is not None:
        g2 = _mae(outputs.guide2, target, "guide 2")
    return L1Terms(final, g1, g2, final + weights.alpha * g1 + weights.beta * g2)


def _log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, LOG_CLAMP, 1.0))


def acgan_loss(d_real_raw: torch.Tensor, d_fake_raw: torch.Tensor, v_real: torch.Tensor) -> GanTerms:
    """AC-GAN style loss with a feature-vector head.

    ``value = mean log(D(y) + 1 - s(V(y))) + mean log(1 - D(G))`` where D is the
    squashed score and s the logistic squash of the normalized hint. The
    discriminator minimizes ``-value``; the generator minimizes ``-mean log D(G)``.
    """
    if d_real_raw.shape != v_real.shape:
        raise ValueError(f"score shape {tuple(d_real_raw.shape)} != style target shape {tuple(v_real.shape)}")
    if d_fake_raw.shape[-1] != v_real.shape[-1]:
        raise ValueError(f"fake score width {d_fake_raw.shape[-1]} != style width {v_real.shape[-1]}")
    target = torch.sigmoid(v_real)
    real_term = _log(torch.sigmoid(d_real_raw) + 1.0 - target).mean()
    d_fake = torch.sigmoid(d_fake_raw)
    fake_term = _log(1.0 - d_fake).mean()
    return GanTerms(-(real_term + fake_term), -_log(d_fake).mean())


def dcgan_loss(d_real_raw: torch.Tensor, d_fake_raw: torch.Tensor) -> GanTerms:
    d_real = torch.sigmoid(d_real_raw)
    d_fake = torch.sigmoid(d_fake_raw)
    d_loss = -(_log(d_real).mean() + _log(1.0 - d_fake).mean())
    return GanTerms(d_loss, -_log(d_fake).mean())


def generator_gan_loss(d_fake_raw: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term; identical for both loss modes."""
    return -_log(torch.sigmoid(d_fake_raw)).mean()


def gan_loss(mode: str, d_real_raw, d_fake_raw, v_real=None) -> GanTerms:
    if mode == "acgan":
        return acgan_loss(d_real_raw, d_fake_raw, v_real)
    if mode == "dcgan":
        return dcgan_loss(d_real_raw, d_fake_raw)
    raise ValueError(f"unknown loss mode {mode!r}")


def generator_objective(l1, g_gan, weights: LossWeights):
    return g_gan + weights.lam * l1
