"""Networks of the contrastive VAE and their forward-pass contract.

Five parameter collections live in :class:`SepVAE`:

* ``common_encoder``  -- q(c | x)
* ``salient_encoder`` -- q(s | x, y)
* ``decoder``         -- mean of p(x | c, s, y)
* ``classifier``      -- p(y | s)
* ``discriminator``   -- joint-vs-shuffled classifier on [c, s]

The discriminator is trained by its own optimizer; everything else by the
main optimizer (see :mod:`sepvae.train`).
"""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .distributions import DiagGaussian, sample_reparameterized
from .errors import ContractViolation

PROB_EPS = 1e-7


@dataclass
class ModelConfig:
    image_shape: tuple = (1, 32, 32)
    d_common: int = 16
    d_salient: int = 16
    encoder_channels: list = field(default_factory=lambda: [32, 32, 64, 128, 256])
    hidden_width: int = 32
    classifier_hidden: int = 32
    discriminator_hidden: int = 64
    kernel_size: int = 4
    # "none" for z-scored inputs, "sigmoid" for pixels in [0, 1]
    output_activation: str = "none"

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.encoder_channels = [int(v) for v in self.encoder_channels]
        problems = []
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            problems.append("image_shape")
        if self.d_common < 1:
            problems.append("d_common")
        if self.d_salient < 1:
            problems.append("d_salient")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            problems.append("encoder_channels")
        for name in ("hidden_width", "classifier_hidden", "discriminator_hidden", "kernel_size"):
            if getattr(self, name) < 1:
                problems.append(name)
        if self.output_activation not in ("none", "sigmoid"):
            problems.append("output_activation")
        if not problems:
            _, h, w = self.image_shape
            n = len(self.encoder_channels)
            if h % (2**n) or w % (2**n):
                problems.append("image_shape (height/width must be divisible by 2**len(encoder_channels))")
        if problems:
            raise ContractViolation(f"invalid ModelConfig fields: {', '.join(problems)}")

    @classmethod
    def conv5_64(cls, image_shape=(3, 64, 64), latent_dim=16):
        """Five stride-2 convolutions (32, 32, 64, 128, 256), heads 256 -> 32 -> D."""
        return cls(
            image_shape=image_shape,
            d_common=latent_dim,
            d_salient=latent_dim,
            encoder_channels=[32, 32, 64, 128, 256],
            hidden_width=32,
            classifier_hidden=32,
            discriminator_hidden=64,
            output_activation="sigmoid",
        )

    @classmethod
    def small(cls, image_shape=(1, 32, 32), d_common=8, d_salient=4):
        """Two stride-2 convolutions and 64-unit heads, for desk-scale runs."""
        return cls(
            image_shape=image_shape,
            d_common=d_common,
            d_salient=d_salient,
            encoder_channels=[16, 32],
            hidden_width=64,
            classifier_hidden=64,
            discriminator_hidden=64,
        )

    @property
    def feature_shape(self):
        _, h, w = self.image_shape
        n = len(self.encoder_channels)
        return (self.encoder_channels[-1], h // 2**n, w // 2**n)

    @property
    def n_features(self):
        return math.prod(self.feature_shape)

    def to_dict(self):
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


@dataclass
class LatentCode:
    common_posterior: DiagGaussian
    salient_posterior: DiagGaussian
    common_sample: torch.Tensor
    salient_sample: torch.Tensor


def salient_reference(batch_size: int, d_salient: int, like: torch.Tensor | None = None):
    """The informationless salient code s' (all zeros)."""
    kwargs = {} if like is None else {"dtype": like.dtype, "device": like.device}
    return torch.zeros(batch_size, d_salient, **kwargs)


def _mlp(n_in, n_hidden, n_out):
    return nn.Sequential(nn.Linear(n_in, n_hidden), nn.ReLU(), nn.Linear(n_hidden, n_out))


class GaussianEncoder(nn.Module):
    """Strided conv trunk followed by separate mean and log-variance heads."""

    def __init__(self, config: ModelConfig, latent_dim: int):
        super().__init__()
        k = config.kernel_size
        layers = []
        c_in = config.image_shape[0]
        for c_out in config.encoder_channels:
            layers += [nn.Conv2d(c_in, c_out, k, stride=2, padding=(k - 2) // 2), nn.ReLU()]
            c_in = c_out
        layers.append(nn.Flatten())
        self.trunk = nn.Sequential(*layers)
        self.mean_head = _mlp(config.n_features, config.hidden_width, latent_dim)
        self.log_variance_head = _mlp(config.n_features, config.hidden_width, latent_dim)

    def forward(self, x):
        h = self.trunk(x)
        return DiagGaussian(self.mean_head(h), self.log_variance_head(h))


class Decoder(nn.Module):
    """Mirror of the encoder: linear stem, then transposed convolutions."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        k = config.kernel_size
        self.feature_shape = config.feature_shape
        self.stem = nn.Sequential(
            nn.Linear(config.d_common + config.d_salient, config.hidden_width),
            nn.ReLU(),
            nn.Linear(config.hidden_width, config.n_features),
            nn.ReLU(),
        )
        channels = list(reversed(config.encoder_channels)) + [config.image_shape[0]]
        layers = []
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
            layers.append(nn.ConvTranspose2d(c_in, c_out, k, stride=2, padding=(k - 2) // 2))
            if i < len(channels) - 2:
                layers.append(nn.ReLU())
        if config.output_activation == "sigmoid":
            layers.append(nn.Sigmoid())
        self.deconv = nn.Sequential(*layers)

    def forward(self, z):
        h = self.stem(z)
        return self.deconv(h.view(h.shape[0], *self.feature_shape))


class ProbabilityHead(nn.Module):
    """Two-layer perceptron with a sigmoid output clamped to [eps, 1 - eps]."""

    def __init__(self, n_in, n_hidden):
        super().__init__()
        self.net = _mlp(n_in, n_hidden, 1)

    def forward(self, z):
        p = torch.sigmoid(self.net(z).squeeze(-1))
        return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


class SepVAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.common_encoder = GaussianEncoder(config, config.d_common)
        self.salient_encoder = GaussianEncoder(config, config.d_salient)
        self.decoder = Decoder(config)
        self.classifier = ProbabilityHead(config.d_salient, config.classifier_hidden)
        self.discriminator = ProbabilityHead(
            config.d_common + config.d_salient, config.discriminator_hidden
        )

    # parameter collections, keyed like the symbols of the objective
    def parameter_groups(self) -> dict:
        return {
            "phi_c": list(self.common_encoder.parameters()),
            "phi_s": list(self.salient_encoder.parameters()),
            "theta": list(self.decoder.parameters()),
            "xi": list(self.classifier.parameters()),
            "lambda_d": list(self.discriminator.parameters()),
        }

    def main_parameters(self):
        groups = self.parameter_groups()
        return groups["phi_c"] + groups["phi_s"] + groups["theta"] + groups["xi"]

    def discriminator_parameters(self):
        return list(self.discriminator.parameters())

    def _check_image(self, x):
        if x.dim() != 4 or tuple(x.shape[1:]) != self.config.image_shape:
            raise ContractViolation(
                f"expected images of shape (B, {', '.join(map(str, self.config.image_shape))}), "
                f"got {tuple(x.shape)}"
            )

    def _check_codes(self, c, s):
        if c.dim() != 2 or c.shape[-1] != self.config.d_common:
            raise ContractViolation(f"common code must be (B, {self.config.d_common}), got {tuple(c.shape)}")
        if s.dim() != 2 or s.shape[-1] != self.config.d_salient:
            raise ContractViolation(f"salient code must be (B, {self.config.d_salient}), got {tuple(s.shape)}")
        if c.shape[0] != s.shape[0]:
            raise ContractViolation("common and salient batches differ in size")

    def encode_common(self, x) -> DiagGaussian:
        self._check_image(x)
        return self.common_encoder(x)

    def encode_salient(self, x, y, frozen_bg_std=True, sigma_q_bg=0.1) -> DiagGaussian:
        """Salient posterior; background rows get a fixed log-variance in frozen mode."""
        self._check_image(x)
        post = self.salient_encoder(x)
        if not frozen_bg_std:
            return post
        y = torch.as_tensor(y, device=x.device)
        if y.shape != (x.shape[0],):
            raise ContractViolation(f"labels must have shape ({x.shape[0]},), got {tuple(y.shape)}")
        frozen = torch.full_like(post.log_variance, 2.0 * math.log(sigma_q_bg))
        is_bg = (y == 0).unsqueeze(-1)
        return DiagGaussian(post.mean, torch.where(is_bg, frozen, post.log_variance))

    def decode(self, c, s):
        self._check_codes(c, s)
        return self.decoder(torch.cat([c, s], dim=-1))

    def classify_salient(self, s):
        if s.shape[-1] != self.config.d_salient:
            raise ContractViolation(f"salient code must have {self.config.d_salient} dims")
        return self.classifier(s)

    def discriminate_joint(self, c, s):
        self._check_codes(c, s)
        return self.discriminator(torch.cat([c, s], dim=-1))

    def forward(self, x, y, frozen_bg_std=True, sigma_q_bg=0.1, generator=None) -> LatentCode:
        """Encode a batch and draw one reparameterized sample per posterior."""
        q_c = self.encode_common(x)
        q_s = self.encode_salient(x, y, frozen_bg_std, sigma_q_bg)
        eps_c = torch.randn(q_c.mean.shape, generator=generator, dtype=x.dtype)
        eps_s = torch.randn(q_s.mean.shape, generator=generator, dtype=x.dtype)
        return LatentCode(
            common_posterior=q_c,
            salient_posterior=q_s,
            common_sample=sample_reparameterized(q_c, eps_c),
            salient_sample=sample_reparameterized(q_s, eps_s),
        )


def _git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def save_checkpoint(path, model: SepVAE, epoch: int, seed=None, extra: dict | None = None):
    """Write ``path`` (torch archive) plus a ``path.json`` manifest sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "seed": seed,
        "state": {
            "phi_c": model.common_encoder.state_dict(),
            "phi_s": model.salient_encoder.state_dict(),
            "theta": model.decoder.state_dict(),
            "xi": model.classifier.state_dict(),
            "lambda_d": model.discriminator.state_dict(),
        },
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    manifest = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "seed": seed,
        "git_describe": _git_describe(),
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path):
    """Return ``(model, payload)``; ``payload`` keeps the optimizer/RNG extras."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = SepVAE(ModelConfig(**payload["config"]))
    state = payload["state"]
    model.common_encoder.load_state_dict(state["phi_c"])
    model.salient_encoder.load_state_dict(state["phi_s"])
    model.decoder.load_state_dict(state["theta"])
    model.classifier.load_state_dict(state["xi"])
    model.discriminator.load_state_dict(state["lambda_d"])
    return model, payload
