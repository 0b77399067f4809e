"""The five terms of the training objective and their weighted sum.

Every term is reduced with a sum over latent/pixel dimensions and a mean over
the batch, so the weights do not depend on batch size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .distributions import DiagGaussian, kl_to_isotropic, kl_to_standard_normal
from .errors import ConfigError, ContractViolation
from .model import PROB_EPS, SepVAE, LatentCode, salient_reference


@dataclass
class LossWeights:
    """Objective weights, background-prior constants and ablation switches.

    Defaults are the 64x64 natural-image settings (beta_c = beta_s = 0.5,
    kappa = 2, gamma = 1e-10, sigma_p = 0.025).
    """

    beta_c: float = 0.5
    beta_s: float = 0.5
    kappa: float = 2.0
    gamma: float = 1e-10
    sigma_p: float = 0.025
    sigma_q_bg: float = 0.1
    use_frozen_bg_std: bool = True
    use_appendix_surrogate: bool = True
    ablate_mi: bool = False
    ablate_clsf: bool = False
    ablate_sal: bool = False

    def __post_init__(self):
        bad = [n for n in ("beta_c", "beta_s", "kappa", "gamma") if not getattr(self, n) >= 0]
        if not 0.0 < self.sigma_p < 1.0:
            bad.append("sigma_p")
        if not self.sigma_q_bg > 0.0:
            bad.append("sigma_q_bg")
        if bad:
            raise ConfigError(f"invalid LossWeights fields: {', '.join(bad)}", bad)

    @property
    def mi_enabled(self):
        return not self.ablate_mi

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    kl_common: torch.Tensor
    kl_salient: torch.Tensor
    classification: torch.Tensor
    mutual_information: torch.Tensor
    total: torch.Tensor
    # set by the training step when the discriminator was updated
    discriminator_bce: float | None = None

    TERMS = ("reconstruction", "kl_common", "kl_salient", "classification", "mutual_information")

    def as_row(self) -> dict:
        """Plain floats keyed by the training-log column names."""
        return {
            "rec": float(self.reconstruction.detach()),
            "kl_c": float(self.kl_common.detach()),
            "kl_s": float(self.kl_salient.detach()),
            "clsf": float(self.classification.detach()),
            "mi": float(self.mutual_information.detach()),
            "total": float(self.total.detach()),
            "disc_bce": math.nan if self.discriminator_bce is None else float(self.discriminator_bce),
        }


def _labels(y, batch_size, like):
    y = torch.as_tensor(y, device=like.device)
    if y.shape != (batch_size,):
        raise ContractViolation(f"labels must have shape ({batch_size},), got {tuple(y.shape)}")
    return y


def conditional_reconstruction_loss(x, c_sample, s_sample, y, decoder) -> torch.Tensor:
    """Squared error of decode(c, y*s + (1-y)*s'), summed over pixels.

    ``decoder`` is any callable ``(c, s) -> image batch`` (e.g. ``SepVAE.decode``).
    Background rows are fed ``s' = 0`` through ``torch.where`` so their
    gradient w.r.t. ``s_sample`` is exactly zero.
    """
    y = _labels(y, x.shape[0], x)
    s_ref = salient_reference(s_sample.shape[0], s_sample.shape[-1], like=s_sample)
    s_in = torch.where((y == 1).unsqueeze(-1), s_sample, s_ref)
    x_hat = decoder(c_sample, s_in)
    if x_hat.shape != x.shape:
        raise ContractViolation(f"reconstruction shape {tuple(x_hat.shape)} != input {tuple(x.shape)}")
    return (x - x_hat).pow(2).flatten(1).sum(dim=1).mean()


def common_prior_loss(common_posterior: DiagGaussian) -> torch.Tensor:
    return kl_to_standard_normal(common_posterior).mean()


def salient_prior_loss(salient_posterior: DiagGaussian, y, weights: LossWeights) -> torch.Tensor:
    """Label-conditional salient prior: N(0, I) for targets, N(s', sigma_p I) for background."""
    mean = salient_posterior.mean
    y = _labels(y, mean.shape[0], mean)
    is_tg = y == 1
    target_kl = kl_to_standard_normal(salient_posterior)
    s_ref = salient_reference(mean.shape[0], mean.shape[-1], like=mean)
    if weights.use_appendix_surrogate:
        background_kl = (mean - s_ref).pow(2).sum(dim=-1) / weights.sigma_p
    else:
        background_kl = kl_to_isotropic(salient_posterior, s_ref[0], weights.sigma_p)
    return torch.where(is_tg, target_kl, background_kl).mean()


def salient_classification_loss(s_samples, y, classifier) -> torch.Tensor:
    """Binary cross-entropy of ``classifier(s)`` against the BG/TG labels."""
    if s_samples.dim() != 2 or s_samples.shape[0] == 0:
        raise ContractViolation("salient classification needs a non-empty (B, D_s) batch")
    y = _labels(y, s_samples.shape[0], s_samples)
    p = classifier(s_samples).clamp(PROB_EPS, 1.0 - PROB_EPS)
    return F.binary_cross_entropy(p, y.to(p.dtype))


def total_loss(x, y, latent: LatentCode, weights: LossWeights, model: SepVAE, mi_penalty_value=None):
    """Weighted objective. ``mi_penalty_value`` comes from :func:`sepvae.mi.mi_penalty`."""
    zero = x.new_zeros(())
    rec = conditional_reconstruction_loss(x, latent.common_sample, latent.salient_sample, y, model.decode)
    kl_c = common_prior_loss(latent.common_posterior)
    kl_s = zero if weights.ablate_sal else salient_prior_loss(latent.salient_posterior, y, weights)
    clsf = (
        zero
        if weights.ablate_clsf
        else salient_classification_loss(latent.salient_sample, y, model.classify_salient)
    )
    if weights.ablate_mi or mi_penalty_value is None:
        mi = zero
    else:
        mi = mi_penalty_value
    total = rec
    for w, term in ((weights.beta_c, kl_c), (weights.beta_s, kl_s), (weights.kappa, clsf), (weights.gamma, mi)):
        if w != 0:
            total = total + w * term
    return LossBreakdown(rec, kl_c, kl_s, clsf, mi, total)


def first_non_finite(breakdown: LossBreakdown):
    """Name of the first non-finite term, or ``None``."""
    for name in LossBreakdown.TERMS + ("total",):
        if not math.isfinite(float(getattr(breakdown, name).detach())):
            return name
    return None
