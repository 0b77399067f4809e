"""Training loop: two-phase step (discriminator, then everything else), checkpoints, logs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .data import ContrastiveDataset
from .errors import ConfigError, ContractViolation, NonFiniteLossError
from .losses import LossBreakdown, LossWeights, first_non_finite, total_loss
from .mi import JointBatch, discriminator_step, frozen, mi_penalty, shuffle_salient
from .model import ModelConfig, SepVAE, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "rec", "kl_c", "kl_s", "clsf", "mi", "total", "disc_bce")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr_main: float = 1e-3
    lr_discriminator: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 10
    reinstantiate_optimizer_each_epoch: bool = False
    disc_steps_per_main: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        bad = []
        if self.epochs < 0:
            bad.append("epochs")
        if self.batch_size < 1 or (self.weights.mi_enabled and self.batch_size < 2):
            bad.append("batch_size")
        if not self.lr_main > 0:
            bad.append("lr_main")
        if not self.lr_discriminator > 0:
            bad.append("lr_discriminator")
        if self.optimizer not in ("adam", "sgd"):
            bad.append("optimizer")
        if self.checkpoint_every < 1:
            bad.append("checkpoint_every")
        if self.disc_steps_per_main < 1:
            bad.append("disc_steps_per_main")
        if bad:
            raise ConfigError(f"invalid TrainConfig fields: {', '.join(bad)}", bad)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class Optimizers:
    main: torch.optim.Optimizer
    discriminator: torch.optim.Optimizer


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def append(self, epoch, step, breakdown: LossBreakdown):
        if self.rows and (epoch, step) <= (self.rows[-1]["epoch"], self.rows[-1]["step"]):
            raise ContractViolation("history rows must be appended in (epoch, step) order")
        self.rows.append({"epoch": epoch, "step": step, **breakdown.as_row()})

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def epoch_mean(self, epoch, column):
        vals = [r[column] for r in self.rows if r["epoch"] == epoch]
        return sum(vals) / len(vals) if vals else math.nan


def build_optimizers(model: SepVAE, config: TrainConfig) -> Optimizers:
    """Two disjoint optimizers: encoders/decoder/classifier, and the discriminator."""
    cls = torch.optim.Adam if config.optimizer == "adam" else torch.optim.SGD
    return Optimizers(
        main=cls(model.main_parameters(), lr=config.lr_main),
        discriminator=cls(model.discriminator_parameters(), lr=config.lr_discriminator),
    )


def _check_finite(breakdown, epoch, step):
    bad = first_non_finite(breakdown)
    if bad is not None:
        raise NonFiniteLossError(bad, epoch, step, float(getattr(breakdown, bad)))


def _check_latent(latent, epoch, step):
    for name, post in (("common_posterior", latent.common_posterior), ("salient_posterior", latent.salient_posterior)):
        if not (torch.isfinite(post.mean).all() and torch.isfinite(post.log_variance).all()):
            raise NonFiniteLossError(name, epoch, step, math.nan)


def train_step(
    model: SepVAE,
    x,
    y,
    optimizers: Optimizers,
    weights: LossWeights,
    generator=None,
    disc_steps: int = 1,
    epoch: int = 0,
    step: int = 0,
) -> LossBreakdown:
    """One training step on a label-mixed batch.

    1. encode and sample codes;
    2. unless MI is ablated: ``disc_steps`` discriminator updates on joint vs
       shuffled codes (codes detached, only the discriminator moves);
    3. with the discriminator frozen, evaluate the full objective and take one
       main-optimizer step.

    The posterior codes of phase 1 are reused in phase 3; the encoders have not
    changed in between, so recomputing them would give the same values.
    """
    model.train()
    latent = model(x, y, weights.use_frozen_bg_std, weights.sigma_q_bg, generator=generator)
    _check_latent(latent, epoch, step)

    disc_bce = None
    penalty = None
    if weights.mi_enabled:
        if x.shape[0] < 2:
            raise ContractViolation("the MI term needs batches of at least 2 samples")
        joint = JointBatch(latent.common_sample, latent.salient_sample)
        for _ in range(disc_steps):
            shuffled = shuffle_salient(joint.detach(), generator)
            disc_bce = discriminator_step(joint, shuffled, model.discriminate_joint, optimizers.discriminator)
            if not math.isfinite(disc_bce):
                raise NonFiniteLossError("discriminator_bce", epoch, step, disc_bce)
        with frozen(model.discriminator):
            penalty = mi_penalty(joint, model.discriminate_joint)

    with frozen(model.discriminator):
        breakdown = total_loss(x, y, latent, weights, model, penalty)
        _check_finite(breakdown, epoch, step)
        optimizers.main.zero_grad(set_to_none=True)
        breakdown.total.backward()
        optimizers.main.step()
    breakdown.discriminator_bce = disc_bce
    return breakdown


def evaluate_loss(model: SepVAE, dataset: ContrastiveDataset, weights: LossWeights, batch_size=256, seed=0):
    """Mean loss terms over a dataset without updating anything."""
    model.eval()
    x_all, y_all = dataset.tensors()
    gen = torch.Generator().manual_seed(seed)
    sums = {}
    n = 0
    with torch.no_grad():
        for start in range(0, len(y_all), batch_size):
            x, y = x_all[start:start + batch_size], y_all[start:start + batch_size]
            latent = model(x, y, weights.use_frozen_bg_std, weights.sigma_q_bg, generator=gen)
            penalty = None
            if weights.mi_enabled:
                penalty = mi_penalty(JointBatch(latent.common_sample, latent.salient_sample), model.discriminate_joint)
            row = total_loss(x, y, latent, weights, model, penalty).as_row()
            row.pop("disc_bce")
            for k, v in row.items():
                sums[k] = sums.get(k, 0.0) + v * len(y)
            n += len(y)
    return {k: v / n for k, v in sums.items()}


def _batches(n, batch_size, generator, min_size):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def _state(model, optimizers, generator, history, epoch, config):
    return {
        "optimizer_main": optimizers.main.state_dict(),
        "optimizer_discriminator": optimizers.discriminator.state_dict(),
        "generator": generator.get_state(),
        "history": {"rows": history.rows, "epochs": history.epochs},
        "train_config": config.to_dict(),
    }


def fit(
    config: TrainConfig,
    dataset: ContrastiveDataset,
    run_dir=None,
    val_dataset: ContrastiveDataset | None = None,
    resume_from=None,
):
    """Train for ``config.epochs`` epochs; returns ``(model, history)``.

    With ``run_dir`` set, checkpoints (``ckpt_epochXXXX.pt`` and ``last.pt``)
    and ``train_log.csv`` are written there. An epoch-0 checkpoint is written
    before any update.
    """
    if len(dataset) == 0:
        raise ContractViolation("cannot train on an empty dataset")
    labels_needed = not (config.weights.ablate_clsf and config.weights.ablate_sal)
    if labels_needed and len(set(dataset.y.tolist())) < 2:
        raise ContractViolation("label-dependent terms are active but the dataset has a single label")
    if tuple(dataset.image_shape) != tuple(config.model.image_shape):
        raise ContractViolation(
            f"dataset images {dataset.image_shape} do not match model image_shape {config.model.image_shape}"
        )
    run_dir = Path(run_dir) if run_dir is not None else None

    torch.manual_seed(config.seed)
    model = SepVAE(config.model)
    generator = torch.Generator().manual_seed(config.seed)
    optimizers = build_optimizers(model, config)
    history = TrainingHistory()
    start_epoch = 0

    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
        optimizers = build_optimizers(model, config)
        optimizers.main.load_state_dict(payload["optimizer_main"])
        optimizers.discriminator.load_state_dict(payload["optimizer_discriminator"])
        generator.set_state(payload["generator"])
        history = TrainingHistory(payload["history"]["rows"], payload["history"]["epochs"])
        start_epoch = payload["epoch"]

    def checkpoint(epoch, name):
        if run_dir is None:
            return
        extra = _state(model, optimizers, generator, history, epoch, config)
        save_checkpoint(run_dir / name, model, epoch, config.seed, extra)

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        if resume_from is None:
            checkpoint(0, "ckpt_epoch0000.pt")
            checkpoint(0, "last.pt")

    x_all, y_all = dataset.tensors()
    min_batch = 2 if config.weights.mi_enabled else 1
    for epoch in range(start_epoch + 1, config.epochs + 1):
        if config.reinstantiate_optimizer_each_epoch and epoch > start_epoch + 1:
            optimizers = build_optimizers(model, config)
        for step, idx in enumerate(_batches(len(y_all), config.batch_size, generator, min_batch)):
            breakdown = train_step(
                model,
                x_all[idx],
                y_all[idx],
                optimizers,
                config.weights,
                generator=generator,
                disc_steps=config.disc_steps_per_main,
                epoch=epoch,
                step=step,
            )
            history.append(epoch, step, breakdown)
        summary = {"epoch": epoch, "train_total": history.epoch_mean(epoch, "total"),
                   "train_rec": history.epoch_mean(epoch, "rec")}
        if val_dataset is not None and len(val_dataset) > 0:
            val = evaluate_loss(model, val_dataset, config.weights, seed=config.seed + epoch)
            summary.update({f"val_{k}": v for k, v in val.items()})
        history.epochs.append(summary)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in summary.items() if k != "epoch"})
        if run_dir is not None:
            history.to_csv(run_dir / "train_log.csv")
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                checkpoint(epoch, f"ckpt_epoch{epoch:04d}.pt")
            checkpoint(epoch, "last.pt")

    if run_dir is not None and not (run_dir / "train_log.csv").exists():
        history.to_csv(run_dir / "train_log.csv")
    model.eval()
    return model, history
