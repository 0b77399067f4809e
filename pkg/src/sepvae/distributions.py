"""Diagonal Gaussians: reparameterized sampling and closed-form KL divergences.

All functions accept batched parameters with shape ``(..., D)``; KL terms are
summed over the last (latent) dimension and returned per leading index.
Batch reduction is left to the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractViolation

__all__ = [
    "DiagGaussian",
    "sample_reparameterized",
    "kl_to_standard_normal",
    "kl_to_isotropic",
    "kl_monte_carlo_oracle",
]


@dataclass
class DiagGaussian:
    """N(mean, diag(exp(log_variance))) over the last dimension."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean)
        self.log_variance = torch.as_tensor(self.log_variance)
        if self.mean.shape != self.log_variance.shape:
            raise ContractViolation(
                f"mean shape {tuple(self.mean.shape)} != log_variance shape "
                f"{tuple(self.log_variance.shape)}"
            )
        if self.mean.dim() == 0 or self.mean.shape[-1] < 1:
            raise ContractViolation("latent dimension D must be >= 1")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def variance(self) -> torch.Tensor:
        return self.log_variance.exp()

    @property
    def std(self) -> torch.Tensor:
        return (0.5 * self.log_variance).exp()

    def check_finite(self) -> "DiagGaussian":
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_variance).all()):
            raise ContractViolation("DiagGaussian parameters must be finite")
        return self

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_variance.detach())

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.log_variance[idx])


def sample_reparameterized(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Return ``mean + exp(0.5 * log_variance) * noise``."""
    noise = torch.as_tensor(noise, dtype=g.mean.dtype, device=g.mean.device)
    if noise.shape != g.mean.shape:
        raise ContractViolation(
            f"noise shape {tuple(noise.shape)} does not match {tuple(g.mean.shape)}"
        )
    return g.mean + g.std * noise


def kl_to_standard_normal(g: DiagGaussian) -> torch.Tensor:
    """KL(g || N(0, I)), summed over latent dimensions."""
    g.check_finite()
    # expm1(l) - l == exp(l) - 1 - l, without cancellation near l = 0
    return 0.5 * (torch.expm1(g.log_variance) - g.log_variance + g.mean.pow(2)).sum(dim=-1)


def kl_to_isotropic(g: DiagGaussian, center, prior_variance: float) -> torch.Tensor:
    """KL(g || N(center, prior_variance * I)), summed over latent dimensions."""
    g.check_finite()
    prior_variance = float(prior_variance)
    if not (prior_variance > 0.0 and math.isfinite(prior_variance)):
        raise ContractViolation(f"prior_variance must be positive, got {prior_variance}")
    center = torch.as_tensor(center, dtype=g.mean.dtype, device=g.mean.device)
    if center.dim() > 0 and center.shape[-1] != g.dim:
        raise ContractViolation(f"center has length {center.shape[-1]}, expected {g.dim}")
    log_ratio = g.log_variance - math.log(prior_variance)
    per_dim = torch.expm1(log_ratio) - log_ratio + (g.mean - center).pow(2) / prior_variance
    return 0.5 * per_dim.sum(dim=-1)


def kl_monte_carlo_oracle(
    g: DiagGaussian,
    center,
    prior_variance: float,
    n_samples: int,
    seed=None,
    return_stderr: bool = False,
    chunk_size: int = 250_000,
):
    """Monte-Carlo estimate of KL(g || N(center, prior_variance * I)).

    Works in float64 numpy on a single (unbatched) Gaussian and shares no code
    with the closed forms above, so it can serve as their test oracle.
    """
    if int(n_samples) < 1:
        raise ContractViolation("n_samples must be >= 1")
    if not prior_variance > 0:
        raise ContractViolation(f"prior_variance must be positive, got {prior_variance}")
    mean = np.asarray(g.mean.detach().cpu(), dtype=np.float64)
    var = np.exp(np.asarray(g.log_variance.detach().cpu(), dtype=np.float64))
    if mean.ndim != 1:
        raise ContractViolation("the oracle takes a single unbatched Gaussian")
    if not (np.isfinite(mean).all() and np.isfinite(var).all()):
        raise ContractViolation("DiagGaussian parameters must be finite")
    center = np.broadcast_to(np.asarray(center, dtype=np.float64), mean.shape)

    rng = np.random.default_rng(seed)
    sd = np.sqrt(var)
    offset = mean - center
    prior_variance = float(prior_variance)
    # log densities with their constants hoisted out of the sample loop
    const = 0.5 * (mean.size * math.log(prior_variance) - np.log(var).sum())
    total = 0.0
    total_sq = 0.0
    remaining = int(n_samples)
    while remaining > 0:
        m = min(chunk_size, remaining)
        eps = rng.standard_normal((m, mean.size))
        dz = eps * sd
        dz += offset
        log_ratio = const + 0.5 * (np.square(dz, out=dz).sum(axis=-1) / prior_variance - np.square(eps, out=eps).sum(axis=-1))
        total += log_ratio.sum()
        total_sq += np.square(log_ratio).sum()
        remaining -= m

    n = int(n_samples)
    estimate = total / n
    if not return_stderr:
        return float(estimate)
    sample_var = max(total_sq / n - estimate**2, 0.0) * n / max(n - 1, 1)
    return float(estimate), float(math.sqrt(sample_var / n))
