"""Loss mathematics for variational rain generation.

Everything here is a pure function of its inputs and differentiable through
torch autograd. Variances are passed as variances (not log-variances); the
networks exponentiate their raw heads before handing results over.

Reductions: ``"batchmean"`` treats dim 0 as the batch, sums every other
dimension per sample and averages over samples. ``"sum"`` sums everything and
is the natural choice for a single, unbatched instance. ``"none"`` returns the
per-sample sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

__all__ = [
    "LatentPosterior",
    "BackgroundPosterior",
    "LossBreakdown",
    "reparameterize",
    "kl_latent",
    "kl_background",
    "wasserstein_losses",
    "total_objective",
]

_REDUCTIONS = ("batchmean", "sum", "none")


@dataclass(frozen=True)
class LatentPosterior:
    """Diagonal Gaussian over the rain factors: mean ``alpha``, variance ``beta``."""

    alpha: Tensor
    beta: Tensor

    def __post_init__(self):
        if self.alpha.shape != self.beta.shape:
            raise ValueError(
                f"alpha and beta shapes differ: {tuple(self.alpha.shape)} vs {tuple(self.beta.shape)}"
            )


@dataclass(frozen=True)
class BackgroundPosterior:
    """Per-pixel Gaussian over the clean background: mean ``mu``, variance ``sigma2``."""

    mu: Tensor
    sigma2: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma2.shape:
            raise ValueError(
                f"mu and sigma2 shapes differ: {tuple(self.mu.shape)} vs {tuple(self.sigma2.shape)}"
            )


@dataclass(frozen=True)
class LossBreakdown:
    adv: float
    kl_z: float
    kl_b: float
    total: float
    side: str = "generator_side"

    def as_dict(self) -> dict:
        return {"adv": self.adv, "kl_z": self.kl_z, "kl_b": self.kl_b, "total": self.total}


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _reduce(per_element: Tensor, reduction: str) -> Tensor:
    if reduction not in _REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}; expected one of {_REDUCTIONS}")
    if reduction == "sum":
        return per_element.sum()
    if per_element.ndim == 0:
        raise ValueError(f"reduction {reduction!r} needs a leading batch dimension")
    per_sample = per_element.reshape(per_element.shape[0], -1).sum(dim=1)
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def reparameterize(mean, variance, noise) -> Tensor:
    """Return ``mean + sqrt(variance) * noise``.

    ``noise`` is a standard-normal draw supplied by the caller so that the
    random stream stays under the caller's control.
    """
    mean, variance, noise = _as_tensor(mean), _as_tensor(variance), _as_tensor(noise)
    if not (mean.shape == variance.shape == noise.shape):
        raise ValueError(
            "reparameterize needs identical shapes, got "
            f"{tuple(mean.shape)}, {tuple(variance.shape)}, {tuple(noise.shape)}"
        )
    if bool((variance < 0).any()):
        raise ValueError("variance must be non-negative")
    return mean + torch.sqrt(variance) * noise


def kl_latent(post: LatentPosterior, reduction: str = "batchmean") -> Tensor:
    """KL[N(alpha, diag beta) || N(0, I)]."""
    alpha, beta = _as_tensor(post.alpha), _as_tensor(post.beta)
    if bool((beta <= 0).any()):
        raise ValueError("latent posterior variance beta must be strictly positive")
    per_dim = 0.5 * alpha.pow(2) + 0.5 * (beta - torch.log(beta) - 1.0)
    return _reduce(per_dim, reduction)


def kl_background(post: BackgroundPosterior, x, eps0_sq: float, reduction: str = "batchmean") -> Tensor:
    """KL[N(mu, diag sigma2) || N(x, eps0_sq I)], summed over pixels."""
    mu, sigma2, x = _as_tensor(post.mu), _as_tensor(post.sigma2), _as_tensor(x)
    if mu.shape != x.shape:
        raise ValueError(f"posterior shape {tuple(mu.shape)} does not match clean image {tuple(x.shape)}")
    if not eps0_sq > 0:
        raise ValueError(f"eps0_sq must be positive, got {eps0_sq}")
    if bool((sigma2 <= 0).any()):
        raise ValueError("background posterior variance sigma2 must be strictly positive")
    ratio = sigma2 / eps0_sq
    # log(sigma2) - log(eps0_sq) keeps precision when both are tiny
    log_ratio = torch.log(sigma2) - math.log(eps0_sq)
    per_pixel = (mu - x).pow(2) / (2.0 * eps0_sq) + 0.5 * (ratio - log_ratio - 1.0)
    return _reduce(per_pixel, reduction)


def wasserstein_losses(scores_real, scores_fake) -> tuple[Tensor, Tensor]:
    """Critic and generator-side losses of the Wasserstein game.

    The critic minimises ``mean(fake) - mean(real)``; the generator side
    minimises ``-mean(fake)``, the only part of the game that depends on it.
    """
    scores_real, scores_fake = _as_tensor(scores_real), _as_tensor(scores_fake)
    if scores_real.numel() == 0 or scores_fake.numel() == 0:
        raise ValueError("score batches must be non-empty")
    critic = scores_fake.mean() - scores_real.mean()
    generator = -scores_fake.mean()
    return critic, generator


def total_objective(adv, kl_z, kl_b, gamma: float, side: str = "generator_side") -> LossBreakdown:
    """Assemble ``gamma * adv + kl_z + kl_b`` into a :class:`LossBreakdown`."""
    adv, kl_z, kl_b = (float(v) for v in (adv, kl_z, kl_b))
    if kl_z < 0 or kl_b < 0:
        raise ValueError(f"KL terms must be non-negative, got kl_z={kl_z}, kl_b={kl_b}")
    total = gamma * adv + kl_z + kl_b
    if not math.isfinite(total):
        raise FloatingPointError(f"non-finite objective: adv={adv}, kl_z={kl_z}, kl_b={kl_b}")
    return LossBreakdown(adv=adv, kl_z=kl_z, kl_b=kl_b, total=total, side=side)
