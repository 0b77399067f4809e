"""Mutual information between common and salient codes via the density-ratio trick.

A discriminator D is trained (with its own optimizer) to tell joint pairs
``[c_i, s_i]`` from shuffled pairs ``[c_i, s_pi(i)]``. Its logit then
estimates log q(c, s) / (q(c) q(s)); the encoders minimize the ReLU of that
logit with D frozen.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .model import PROB_EPS


@dataclass
class JointBatch:
    common: torch.Tensor
    salient: torch.Tensor
    provenance: str = "joint"

    def __post_init__(self):
        if self.provenance not in ("joint", "shuffled"):
            raise ContractViolation(f"unknown provenance {self.provenance!r}")
        if self.common.dim() != 2 or self.salient.dim() != 2:
            raise ContractViolation("codes must be (B, D) matrices")
        if self.common.shape[0] != self.salient.shape[0]:
            raise ContractViolation("common and salient batches differ in size")

    def __len__(self):
        return self.common.shape[0]

    def detach(self):
        return JointBatch(self.common.detach(), self.salient.detach(), self.provenance)


def _generator(seed):
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    if seed is None:
        g.seed()
    else:
        g.manual_seed(int(seed))
    return g


def shuffle_salient(joint: JointBatch, seed=None) -> JointBatch:
    """Permute the salient codes along the batch; common codes keep their order.

    ``seed`` may be an int or a ``torch.Generator`` (advanced in place).
    """
    n = len(joint)
    if n < 2:
        raise ContractViolation("shuffling needs a batch of at least 2 pairs")
    perm = torch.randperm(n, generator=_generator(seed))
    return JointBatch(joint.common, joint.salient[perm], "shuffled")


@contextlib.contextmanager
def frozen(module):
    """Temporarily stop gradients from reaching ``module``'s parameters."""
    params = list(module.parameters())
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)


def discriminator_bce(joint: JointBatch, shuffled: JointBatch, discriminator) -> torch.Tensor:
    """Per-pair BCE with joint pairs labelled 1 and shuffled pairs labelled 0."""
    if len(joint) != len(shuffled):
        raise ContractViolation(f"batch sizes differ: {len(joint)} vs {len(shuffled)}")
    d_joint = discriminator(joint.common, joint.salient)
    d_shuf = discriminator(shuffled.common, shuffled.salient)
    return (-torch.log(d_joint) - torch.log1p(-d_shuf)).mean()


def discriminator_step(joint: JointBatch, shuffled: JointBatch, discriminator, disc_optimizer) -> float:
    """One optimizer update of the discriminator; codes are detached first.

    ``discriminator`` is a callable ``(c, s) -> probability``; ``disc_optimizer``
    must hold the discriminator's parameters only.
    """
    bce = discriminator_bce(joint.detach(), shuffled.detach(), discriminator)
    disc_optimizer.zero_grad(set_to_none=True)
    bce.backward()
    disc_optimizer.step()
    return float(bce.detach())


def mi_penalty(joint: JointBatch, discriminator) -> torch.Tensor:
    """Batch mean of ReLU(log D/(1-D)) over joint pairs.

    Callers are expected to hold the discriminator frozen (see :func:`frozen`)
    so the gradient reaches the encoders only.
    """
    p = discriminator(joint.common, joint.salient).clamp(PROB_EPS, 1.0 - PROB_EPS)
    logit = torch.log(p) - torch.log1p(-p)
    return F.relu(logit).mean()
