import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from sepvae.model import ModelConfig, SepVAE

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}  {detail}")


def tiny_config(**kw):
    """A network small enough for exhaustive finite differences (< 1000 parameters)."""
    base = dict(
        image_shape=(1, 4, 4),
        d_common=2,
        d_salient=2,
        encoder_channels=[2],
        hidden_width=4,
        classifier_hidden=4,
        discriminator_hidden=4,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return SepVAE(tiny_config())


def snapshot(params):
    return [p.detach().clone() for p in params]


def same(before, params):
    return all(torch.equal(a, b.detach()) for a, b in zip(before, params))


def central_difference(f, params, eps=1e-5):
    """Numerical gradient of the scalar ``f()`` w.r.t. every entry of ``params`` (in place, restored)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def gradient_error(analytic, numeric, floor_fraction=1e-6):
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_fraction`` times the largest numerical gradient entry, so
    entries that are tiny compared with the gradient scale are judged on an
    absolute rather than a relative basis.
    """
    scale = max(float(n.abs().max()) for n in numeric)
    floor = max(scale * floor_fraction, 1e-12)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        err = (a - n).abs() / torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(n, floor))
        worst = max(worst, float(err.max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fixed_noise_latent(model, x, y, eps_c, eps_s, weights):
    """Like ``model(x, y)`` but with caller-supplied reparameterization noise."""
    from sepvae.distributions import sample_reparameterized
    from sepvae.model import LatentCode

    q_c = model.encode_common(x)
    q_s = model.encode_salient(x, y, weights.use_frozen_bg_std, weights.sigma_q_bg)
    return LatentCode(q_c, q_s, sample_reparameterized(q_c, eps_c), sample_reparameterized(q_s, eps_s))


def objective_terms(model, weights, seed=0, batch=6):
    """Scalar closures for every objective term on a fixed double-precision batch.

    Returns ``{name: (closure, parameters it should be differentiated against)}``.
    """
    from sepvae import losses
    from sepvae.mi import JointBatch, discriminator_bce, frozen, mi_penalty, shuffle_salient

    model.double()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, *model.config.image_shape, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1] * (batch // 2))
    eps_c = torch.randn(batch, model.config.d_common, generator=gen, dtype=torch.float64)
    eps_s = torch.randn(batch, model.config.d_salient, generator=gen, dtype=torch.float64)
    perm_seed = int(torch.randint(1 << 30, (1,), generator=gen))

    def latent():
        return fixed_noise_latent(model, x, y, eps_c, eps_s, weights)

    def rec():
        z = latent()
        return losses.conditional_reconstruction_loss(x, z.common_sample, z.salient_sample, y, model.decode)

    def kl_c():
        return losses.common_prior_loss(latent().common_posterior)

    def kl_s():
        return losses.salient_prior_loss(latent().salient_posterior, y, weights)

    def clsf():
        return losses.salient_classification_loss(latent().salient_sample, y, model.classify_salient)

    def mi():
        z = latent()
        with frozen(model.discriminator):
            return mi_penalty(JointBatch(z.common_sample, z.salient_sample), model.discriminate_joint)

    def disc():
        z = latent()
        joint = JointBatch(z.common_sample, z.salient_sample).detach()
        return discriminator_bce(joint, shuffle_salient(joint, perm_seed), model.discriminate_joint)

    def total():
        z = latent()
        with frozen(model.discriminator):
            penalty = mi_penalty(JointBatch(z.common_sample, z.salient_sample), model.discriminate_joint)
            return losses.total_loss(x, y, z, weights, model, penalty).total

    main = model.main_parameters()
    return {
        "reconstruction": (rec, main),
        "kl_common": (kl_c, main),
        "kl_salient": (kl_s, main),
        "classification": (clsf, main),
        "mutual_information": (mi, main),
        "discriminator_bce": (disc, model.discriminator_parameters()),
        "total": (total, main),
    }


def analytic_gradient(f, params):
    for p in params:
        p.grad = None
    f().backward()
    return [None if p.grad is None else p.grad.detach().clone() for p in params]


@pytest.fixture(scope="session")
def synthetic():
    """The packaged desk-scale configuration with its dataset and split."""
    from sepvae.config import load_config
    from sepvae.data import generate_synthetic, split

    run_cfg = load_config()
    dataset, base = generate_synthetic(run_cfg.data)
    manifest = split(dataset, run_cfg.split.fractions, run_cfg.split.seed, run_cfg.split.stratify_on_y, base=base)
    return run_cfg, dataset, manifest


@pytest.fixture(scope="session")
def trained(synthetic):
    """``trained(seed, ablations=())`` trains and evaluates once per key, then caches."""
    from sepvae.evaluation import evaluate, headline
    from sepvae.train import fit

    run_cfg, dataset, manifest = synthetic
    cache = {}

    def get(seed, ablations=()):
        key = (seed, tuple(sorted(ablations)))
        if key not in cache:
            weights = replace(run_cfg.train.weights, **{flag: True for flag in ablations})
            cfg = replace(run_cfg.train, seed=seed, weights=weights)
            start = time.perf_counter()
            model, history = fit(cfg, dataset.subset(manifest.indices("train")))
            seconds = time.perf_counter() - start
            method = "baseline" if weights.ablate_clsf else "sepvae"
            metrics = evaluate(model, dataset, manifest, seed=seed, method=method)
            cache[key] = {
                "model": model,
                "history": history,
                "metrics": metrics,
                "headline": headline(metrics),
                "seconds": seconds,
            }
        return cache[key]

    return get
