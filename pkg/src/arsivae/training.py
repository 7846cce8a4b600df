"""Two-stage training.

Stage 1 (``train_representation``) learns the latent space. SIVAE and
AR-SIVAE alternate one encoder update and one decoder update per batch, each
with its own Adam optimizer and the other sub-network frozen; beta-VAE and
Attri-VAE update both jointly. Stage 2 (``train_classifier``) fits the
latent classifier on posterior means of the frozen encoder.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import psutil
import torch
from tqdm import tqdm

from arsivae.dataset_io import (
    Checkpoint,
    apply_parameters,
    capture_optimizer,
    load_checkpoint,
    module_parameters,
    parameter_digest,
    parameter_names_of,
    restore_optimizer,
    save_checkpoint,
    write_csv,
)
from arsivae.errors import CompatibilityError, ConfigurationError, ContractError, DataError, NumericalError
from arsivae.latent_classifier import Standardizer, check_labels, classifier_checkpoint, fit_classifier
from arsivae.objectives import (
    LossBreakdown,
    arsivae_encoder_loss,
    attrivae_loss,
    betavae_loss,
    kl_divergence,
    recon_loss,
    sivae_decoder_loss,
    sivae_encoder_loss,
)
from arsivae.phantom_data import DatasetSplit, ImageDataset
from arsivae.seeding import derive_seed, numpy_generator, torch_generator
from arsivae.settings import ClassifierConfig, Method, TrainConfig, validate
from arsivae.vae_model import VAE, build_model, latent_means, reparameterize

logger = logging.getLogger(__name__)

REPRESENTATION_KIND = "representation"
TRAIN_LOG_CSV = "train_log.csv"
VALIDATION_CSV = "validation_log.csv"


@dataclass
class TrainLog:
    steps: List[Dict[str, float]] = field(default_factory=list)
    validation: List[Dict[str, float]] = field(default_factory=list)

    def add_step(self, row: Dict[str, float]) -> None:
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise ContractError(f"step {row['step']} does not follow step {self.steps[-1]['step']}")
        self.steps.append(row)

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps)

    def validation_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.validation)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled batches; a trailing single-sample batch is folded into the previous one."""
    if n < 2:
        raise DataError(f"need at least 2 training samples, got {n}")
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def rss_megabytes() -> float:
    return psutil.Process().memory_info().rss / 2**20


def parameter_norms(model: torch.nn.Module) -> Dict[str, float]:
    return {name: float(p.detach().norm()) for name, p in model.named_parameters()}


def _set_trainable(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class _Stepper:
    """Holds the optimizers of one stage-1 run and performs one update per batch."""

    def __init__(self, model: VAE, cfg: TrainConfig, assignment: Optional[List[int]]):
        self.model = model
        self.cfg = cfg
        self.method = cfg.objective.method
        self.assignment = assignment
        opt = cfg.optimizer

        def adam(params):
            return torch.optim.Adam(params, lr=opt.learning_rate, betas=(opt.beta1, opt.beta2), eps=opt.epsilon)

        if self.method.adversarial:
            self.optimizers = {"encoder": adam(model.enc.parameters()), "decoder": adam(model.dec.parameters())}
        else:
            self.optimizers = {"joint": adam(model.parameters())}
        self.names = parameter_names_of([("enc.", model.enc), ("dec.", model.dec)])

    def step(
        self, x: torch.Tensor, attrs: Optional[torch.Tensor], prior: torch.Generator, noise: torch.Generator
    ) -> Tuple[LossBreakdown, Optional[LossBreakdown]]:
        model, obj = self.model, self.cfg.objective
        if not self.method.adversarial:
            opt = self.optimizers["joint"]
            opt.zero_grad(set_to_none=True)
            if self.method is Method.ATTRI_VAE:
                loss = attrivae_loss(x, attrs, model, obj, self.assignment, noise)
            else:
                loss = betavae_loss(x, model, obj, noise)
            self._backward(loss)
            opt.step()
            return loss, None

        fake_z = model.sample_prior(x.shape[0], prior)

        _set_trainable(model.dec, False)
        enc_opt = self.optimizers["encoder"]
        enc_opt.zero_grad(set_to_none=True)
        if self.method is Method.AR_SIVAE:
            enc_loss = arsivae_encoder_loss(x, fake_z, attrs, model, obj, self.assignment, noise)
        else:
            enc_loss = sivae_encoder_loss(x, fake_z, model, obj, noise)
        self._backward(enc_loss)
        enc_opt.step()
        _set_trainable(model.dec, True)

        _set_trainable(model.enc, False)
        dec_opt = self.optimizers["decoder"]
        dec_opt.zero_grad(set_to_none=True)
        dec_loss = sivae_decoder_loss(x, fake_z, model, obj, noise)
        self._backward(dec_loss)
        dec_opt.step()
        _set_trainable(model.enc, True)
        return enc_loss, dec_loss

    @staticmethod
    def _backward(loss: LossBreakdown) -> None:
        if not torch.isfinite(loss.total):
            raise NumericalError(f"non-finite {loss.role} loss", {"role": loss.role})
        loss.total.backward()

    def training_state(self):
        return {name: capture_optimizer(opt, self.names) for name, opt in self.optimizers.items()}


@torch.no_grad()
def validation_metrics(
    model: VAE, dataset: ImageDataset, cfg: TrainConfig, generator: torch.Generator, batch_size: int = 256
) -> Dict[str, float]:
    """Mean reconstruction error, KL and -ELBO over a held-out set (one posterior sample each)."""
    model.eval()
    ref = next(model.parameters())
    totals = {"val_recon": 0.0, "val_kl": 0.0, "val_neg_elbo": 0.0}
    for start in range(0, len(dataset), batch_size):
        x = torch.as_tensor(dataset.images[start : start + batch_size], dtype=ref.dtype, device=ref.device)
        stats = model.encode(x)
        z = reparameterize(stats, generator)
        recon = recon_loss(x, model.decode(z))
        kl = kl_divergence(stats.mu, stats.logvar)
        obj = cfg.objective
        totals["val_recon"] += float(recon.sum())
        totals["val_kl"] += float(kl.sum())
        totals["val_neg_elbo"] += float((obj.beta_rec * recon + obj.kl_weight * kl).sum())
    model.train()
    n = max(len(dataset), 1)
    return {k: v / n for k, v in totals.items()}


def _checkpoint(
    model: VAE,
    cfg: TrainConfig,
    stepper: _Stepper,
    scaler: Optional[Standardizer],
    assignment: Optional[List[int]],
    epoch: int,
    step: int,
    wall_time: float,
    attribute_names: Sequence[str],
) -> Checkpoint:
    extra: Dict[str, Any] = {"attribute_names": list(attribute_names), "dim_assignment": assignment}
    if scaler is not None:
        extra.update({"attribute_mean": scaler.mean.tolist(), "attribute_std": scaler.std.tolist()})
    return Checkpoint(
        kind=REPRESENTATION_KIND,
        config=cfg.model_dump(mode="json"),
        parameters=module_parameters(model),
        training_state=stepper.training_state(),
        provenance={
            "method": cfg.objective.method.value,
            "seed": cfg.seed,
            "epoch": epoch,
            "step": step,
            "wall_time_s": round(wall_time, 3),
        },
        extra=extra,
    )


def _step_row(
    step: int, epoch: int, loss: LossBreakdown, dec_loss: Optional[LossBreakdown], names: Sequence[str]
) -> Dict[str, float]:
    row: Dict[str, float] = {"step": step, "epoch": epoch}
    row.update(loss.as_row(names))
    if dec_loss is not None:
        row.update(
            {
                "decoder_total": dec_loss.total.item(),
                "decoder_recon": dec_loss.recon.item(),
                "decoder_elbo_fake": dec_loss.elbo_fake.item(),
            }
        )
    return row


RESUME_FIELDS = ("model", "objective", "optimizer", "batch_size", "seed")


def _resume_state(cfg: TrainConfig, model: VAE, stepper: _Stepper, ckpt: Checkpoint) -> Tuple[int, int, float]:
    """Load parameters and optimizer moments from ``ckpt``; returns (epoch, step, wall time) reached."""
    if ckpt.kind != REPRESENTATION_KIND:
        raise CompatibilityError(f"cannot resume from a '{ckpt.kind}' checkpoint")
    saved = validate(TrainConfig, ckpt.config)
    changed = [name for name in RESUME_FIELDS if getattr(saved, name) != getattr(cfg, name)]
    if changed:
        raise CompatibilityError(f"cannot resume: {', '.join(changed)} differ from the checkpoint")
    if set(ckpt.training_state) != set(stepper.optimizers):
        raise CompatibilityError(
            f"checkpoint optimizers {sorted(ckpt.training_state)} do not match {sorted(stepper.optimizers)}"
        )
    apply_parameters(model, ckpt.parameters)
    for name, opt in stepper.optimizers.items():
        restore_optimizer(opt, ckpt.training_state[name], stepper.names)
    epoch = int(ckpt.provenance.get("epoch", 0))
    if epoch >= cfg.epochs:
        raise ConfigurationError(f"checkpoint already reached epoch {epoch}; raise train.epochs above it to resume")
    return epoch, int(ckpt.provenance.get("step", 0)), float(ckpt.provenance.get("wall_time_s", 0.0))


def train_representation(
    cfg: Union[TrainConfig, Dict[str, Any]],
    dataset: ImageDataset,
    val_dataset: Optional[ImageDataset] = None,
    out_dir: Optional[Path] = None,
    resume_from: Optional[Checkpoint] = None,
) -> Tuple[Checkpoint, TrainLog]:
    """Stage 1. With ``out_dir`` set, streams train_log.csv and writes ckpt/epoch_<N>/.

    ``resume_from`` continues a run from one of its own checkpoints: parameters,
    optimizer moments, step count and epoch are restored and training picks up
    at the next epoch exactly as the uninterrupted run would.
    """
    cfg = validate(TrainConfig, cfg)
    method = cfg.objective.method
    size = cfg.model.image_size
    if dataset.images.ndim != 4 or tuple(dataset.images.shape[1:]) != (1, size, size):
        raise ConfigurationError(f"model.image_size={size} does not match dataset images {dataset.images.shape}")
    if len(dataset) < 2:
        raise DataError(f"need at least 2 training samples, got {len(dataset)}")

    assignment: Optional[List[int]] = None
    scaler: Optional[Standardizer] = None
    attrs_std: Optional[np.ndarray] = None
    if dataset.attributes is not None and dataset.attributes.size:
        scaler = Standardizer.fit(dataset.attributes)
        attrs_std = scaler.transform(dataset.attributes)
    if method.regularized:
        if attrs_std is None or attrs_std.shape[0] != len(dataset):
            raise DataError(f"method '{method.value}' needs one attribute row per training image")
        assignment = cfg.model.assignment(attrs_std.shape[1])

    threads = torch.get_num_threads()
    if cfg.deterministic:
        torch.set_num_threads(1)
    try:
        return _train_epochs(cfg, dataset, val_dataset, out_dir, resume_from, assignment, scaler, attrs_std)
    finally:
        torch.set_num_threads(threads)


def _train_epochs(
    cfg: TrainConfig,
    dataset: ImageDataset,
    val_dataset: Optional[ImageDataset],
    out_dir: Optional[Path],
    resume_from: Optional[Checkpoint],
    assignment: Optional[List[int]],
    scaler: Optional[Standardizer],
    attrs_std: Optional[np.ndarray],
) -> Tuple[Checkpoint, TrainLog]:
    method = cfg.objective.method
    device = torch.device(cfg.device)
    model = build_model(cfg.model, derive_seed(cfg.seed, "init")).to(device)
    model.train()
    stepper = _Stepper(model, cfg, assignment)
    names = list(dataset.attribute_names) if method.regularized else []

    start_epoch, step, wall_time = 0, 0, 0.0
    if resume_from is not None:
        start_epoch, step, wall_time = _resume_state(cfg, model, stepper, resume_from)
        logger.info("resuming %s after epoch %d (step %d)", method.value, start_epoch, step)

    log = TrainLog()
    ckpt_root = None if out_dir is None else Path(out_dir) / "ckpt"
    if out_dir is not None and resume_from is None:
        for stale in (TRAIN_LOG_CSV, VALIDATION_CSV):
            (Path(out_dir) / stale).unlink(missing_ok=True)

    images = torch.as_tensor(dataset.images, dtype=torch.float32)
    attrs_t = None if attrs_std is None else torch.as_tensor(attrs_std, dtype=torch.float32)

    logger.info(
        "training %s on %d samples: %d epochs, batch %d, latent_dim %d",
        method.value, len(dataset), cfg.epochs, cfg.batch_size, cfg.model.latent_dim,
    )
    ckpt: Optional[Checkpoint] = None
    epochs = tqdm(range(start_epoch + 1, cfg.epochs + 1), desc=method.value, disable=not cfg.progress)
    for epoch in epochs:
        started = time.perf_counter()
        first_row = len(log.steps)
        prior = torch_generator(cfg.seed, "prior", epoch, device=device.type)
        noise = torch_generator(cfg.seed, "noise", epoch, device=device.type)
        for index in batch_indices(len(dataset), cfg.batch_size, numpy_generator(cfg.seed, "shuffle", epoch)):
            step += 1
            x = images[index].to(device)
            a = None if attrs_t is None else attrs_t[index].to(device)
            try:
                loss, dec_loss = stepper.step(x, a, prior, noise)
            except NumericalError as exc:
                exc.diagnostics.update(
                    {
                        "step": step,
                        "epoch": epoch,
                        "method": method.value,
                        "parameter_norms": parameter_norms(model),
                        "rss_mb": rss_megabytes(),
                    }
                )
                logger.error("aborting at step %d (epoch %d): %s", step, epoch, exc)
                raise
            row = _step_row(step, epoch, loss, dec_loss, names)
            log.add_step(row)
            if step % cfg.log_every == 0:
                logger.info("step %d epoch %d: total=%.4f recon=%.4f kl=%.4f", step, epoch, row["total"], row["recon"], row["kl_real"])

        if val_dataset is not None and len(val_dataset):
            metrics = validation_metrics(model, val_dataset, cfg, torch_generator(cfg.seed, "val", epoch, device=device.type))
            log.validation.append({"epoch": epoch, **metrics})
        wall_time += time.perf_counter() - started
        mean_total = float(np.mean([r["total"] for r in log.steps[first_row:]]))
        logger.info("epoch %d/%d: mean total %.4f, rss %.0f MB", epoch, cfg.epochs, mean_total, rss_megabytes())

        if out_dir is not None:
            write_csv(Path(out_dir) / TRAIN_LOG_CSV, pd.DataFrame(log.steps[first_row:]), append=True)
            if log.validation and log.validation[-1]["epoch"] == epoch:
                write_csv(Path(out_dir) / VALIDATION_CSV, pd.DataFrame(log.validation[-1:]), append=True)
        due = cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0
        if due or epoch == cfg.epochs:
            ckpt = _checkpoint(model, cfg, stepper, scaler, assignment, epoch, step, wall_time, dataset.attribute_names)
            if ckpt_root is not None:
                save_checkpoint(ckpt, ckpt_root / f"epoch_{epoch}")
                logger.debug("checkpoint written for epoch %d", epoch)

    assert ckpt is not None
    return ckpt, log


def latest_checkpoint(path: Path) -> Path:
    """Resolve a run directory (with ckpt/epoch_<N>/) or a checkpoint directory itself."""
    path = Path(path)
    ckpt_dir = path / "ckpt"
    if ckpt_dir.is_dir():
        epochs = [p for p in ckpt_dir.iterdir() if p.is_dir() and p.name.startswith("epoch_")]
        if epochs:
            return max(epochs, key=lambda p: int(p.name.split("_", 1)[1]))
    return path


def load_representation(source: Union[Checkpoint, Path, str]) -> Tuple[VAE, TrainConfig, Checkpoint]:
    """Rebuild the VAE stored in a representation checkpoint."""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(latest_checkpoint(Path(source)), kind=REPRESENTATION_KIND)
    if ckpt.kind != REPRESENTATION_KIND:
        raise ConfigurationError(f"expected a '{REPRESENTATION_KIND}' checkpoint, got '{ckpt.kind}'")
    cfg = validate(TrainConfig, ckpt.config)
    model = build_model(cfg.model)
    apply_parameters(model, ckpt.parameters)
    model.eval()
    return model, cfg, ckpt


def train_classifier(
    encoder_ckpt: Union[Checkpoint, Path, str],
    dataset: ImageDataset,
    labels: np.ndarray,
    clf_cfg: Union[ClassifierConfig, Dict[str, Any]],
    split: DatasetSplit,
) -> Checkpoint:
    """Stage 2: MLP on posterior means of the frozen encoder."""
    clf_cfg = validate(ClassifierConfig, clf_cfg)
    labels = check_labels(labels, clf_cfg.task)
    if labels.shape[0] != len(dataset):
        raise DataError(f"{labels.shape[0]} labels for {len(dataset)} images")
    if np.unique(labels[split.train]).size > clf_cfg.task.n_classes:
        raise ConfigurationError("training labels have more classes than the task allows")
    model, _, _ = load_representation(encoder_ckpt)

    before = parameter_digest(model)
    mu = latent_means(model, dataset.images)
    fit = fit_classifier(mu[split.train], labels[split.train], mu[split.val], labels[split.val], clf_cfg)
    after = parameter_digest(model)
    if before != after:
        raise ContractError("encoder parameters changed during classifier training")

    return classifier_checkpoint(
        fit.model,
        clf_cfg,
        extra={
            "encoder_digest": before,
            "best_epoch": fit.best_epoch,
            "val_accuracy": fit.best_val_accuracy,
            "history": fit.history,
        },
    )
