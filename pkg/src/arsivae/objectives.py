"""Objectives for beta-VAE, Attri-VAE, SIVAE and AR-SIVAE.

Every objective is returned in minimisation form. Per batch:

    joint   (beta-VAE / Attri-VAE):  -mean ELBO(x) + w_reg * L_reg
    encoder (SIVAE / AR-SIVAE):      -mean ELBO(x) + (1/alpha) mean exp(alpha * s * ELBO(D(z))) + w_reg * L_reg
    decoder (SIVAE / AR-SIVAE):      -mean ELBO(x) - gamma * mean ELBO(D(z))

with ELBO = -beta_rec * SSE - beta_kl * KL and the exp argument clamped to
``exp_clamp``. ``w_reg`` is gamma_reg for the regularised methods and 0
otherwise. Real and fake passes share reparameterisation noise: the fake
pass reuses the first rows of the real draw.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from arsivae.errors import ContractError, NumericalError
from arsivae.settings import ObjectiveConfig
from arsivae.vae_model import VAE, LatentStats, reparameterize

ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float]]


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon: torch.Tensor
    kl_real: torch.Tensor
    kl_fake: torch.Tensor
    exp_term: torch.Tensor
    attr_reg: torch.Tensor
    elbo_real: torch.Tensor
    elbo_fake: torch.Tensor
    role: str
    reg_weight: float = 0.0
    fake_weight: float = 0.0
    attr_reg_per_attribute: Optional[torch.Tensor] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def recompose(self) -> torch.Tensor:
        """Total rebuilt from the parts, following the module docstring."""
        if self.role == "decoder":
            return -self.elbo_real - self.fake_weight * self.elbo_fake
        total = -self.elbo_real + self.reg_weight * self.attr_reg
        if self.role == "encoder":
            total = total + self.exp_term
        return total

    def as_row(self, attribute_names: Sequence[str] = ()) -> Dict[str, float]:
        row = {
            "total": self.total.item(),
            "recon": self.recon.item(),
            "kl_real": self.kl_real.item(),
            "kl_fake": self.kl_fake.item(),
            "exp_term": self.exp_term.item(),
            "attr_reg": self.attr_reg.item(),
            "elbo_real": self.elbo_real.item(),
            "elbo_fake": self.elbo_fake.item(),
        }
        per = self.attr_reg_per_attribute
        for i, name in enumerate(attribute_names):
            row[f"attr_reg_{name}"] = float("nan") if per is None else per[i].item()
        return row


# ---------------------------------------------------------------------------
# ELBO components


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-sample sum of squared errors."""
    if x.shape != x_hat.shape:
        raise ContractError(f"reconstruction shape {tuple(x_hat.shape)} != input shape {tuple(x.shape)}")
    return (x - x_hat).pow(2).flatten(start_dim=1).sum(dim=1)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I))."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=1)


def elbo(x: torch.Tensor, x_hat: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor, cfg: ObjectiveConfig) -> torch.Tensor:
    """Per-sample ELBO (higher is better)."""
    return -cfg.beta_rec * recon_loss(x, x_hat) - cfg.kl_weight * kl_divergence(mu, logvar)


# ---------------------------------------------------------------------------
# Attribute regularisation


def distance_matrix(values: ArrayLike) -> torch.Tensor:
    """M[i, j] = v_i - v_j."""
    v = torch.as_tensor(values)
    if v.dim() != 1 or v.shape[0] < 2:
        raise ContractError(f"distance matrix needs a vector of length >= 2, got shape {tuple(v.shape)}")
    return v[:, None] - v[None, :]


def attr_reg_loss(
    z: torch.Tensor, attrs: torch.Tensor, dim_assignment: Sequence[int], delta: float
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean over attributes of MAE(tanh(delta * D_k) - sgn(D_a)) over all N^2 pairs."""
    if z.dim() != 2 or z.shape[0] < 2:
        raise ContractError(f"attribute regularisation needs a batch of >= 2 latents, got shape {tuple(z.shape)}")
    if attrs.dim() != 2 or attrs.shape[0] != z.shape[0]:
        raise ContractError(f"attributes of shape {tuple(attrs.shape)} do not align with latents {tuple(z.shape)}")
    if len(dim_assignment) != attrs.shape[1] or len(dim_assignment) == 0:
        raise ContractError(f"{len(dim_assignment)} assigned dims for {attrs.shape[1]} attributes")
    if any(k < 0 or k >= z.shape[1] for k in dim_assignment):
        raise ContractError(f"assigned dims {list(dim_assignment)} out of range for latent_dim={z.shape[1]}")
    attrs = attrs.to(dtype=z.dtype, device=z.device)
    per_attribute = []
    for a, k in enumerate(dim_assignment):
        d_k = distance_matrix(z[:, k])
        d_a = distance_matrix(attrs[:, a])
        per_attribute.append((torch.tanh(delta * d_k) - torch.sign(d_a)).abs().mean())
    per = torch.stack(per_attribute)
    return per.mean(), per


# ---------------------------------------------------------------------------
# Passes


@dataclass
class _Pass:
    stats: LatentStats
    x_hat: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    elbo: torch.Tensor


def _draw_noise(n: int, model: VAE, generator: Optional[torch.Generator]) -> torch.Tensor:
    ref = next(model.parameters())
    return torch.randn(n, model.latent_dim, generator=generator, dtype=ref.dtype, device=ref.device)


def _fake_noise(eps_real: torch.Tensor, m: int, model: VAE, generator: Optional[torch.Generator]) -> torch.Tensor:
    n = eps_real.shape[0]
    if m <= n:
        return eps_real[:m]
    return torch.cat([eps_real, _draw_noise(m - n, model, generator)])


def _elbo_pass(model: VAE, images: torch.Tensor, eps: torch.Tensor, cfg: ObjectiveConfig) -> _Pass:
    stats = model.encode(images)
    stats.z = reparameterize(stats, eps=eps)
    x_hat = model.decode(stats.z)
    recon = recon_loss(images, x_hat)
    kl = kl_divergence(stats.mu, stats.logvar)
    value = -cfg.beta_rec * recon - cfg.kl_weight * kl
    return _Pass(stats=stats, x_hat=x_hat, recon=recon, kl=kl, elbo=value)


def _ensure_finite(name: str, p: _Pass) -> None:
    if torch.isfinite(p.elbo).all():
        return
    with torch.no_grad():
        diagnostics = {
            "term": name,
            "elbo": p.elbo.detach().cpu().tolist(),
            "recon": p.recon.detach().cpu().tolist(),
            "kl": p.kl.detach().cpu().tolist(),
            "mu_abs_max": float(p.stats.mu.abs().max()),
            "logvar_min": float(p.stats.logvar.min()),
            "logvar_max": float(p.stats.logvar.max()),
        }
    raise NumericalError(f"non-finite {name}", diagnostics)


def introspective_exp_term(elbo_fake: torch.Tensor, cfg: ObjectiveConfig) -> torch.Tensor:
    """(1/alpha) * mean exp(alpha * s * ELBO(D(z))), exponent clamped from above."""
    if cfg.alpha == 0:
        return elbo_fake.new_zeros(())
    arg = torch.clamp(cfg.alpha * cfg.exp_elbo_scale * elbo_fake, max=cfg.exp_clamp)
    return torch.exp(arg).mean() / cfg.alpha


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return ref.new_zeros(())


def _regularizer(
    p: _Pass, attrs: Optional[torch.Tensor], dim_assignment: Optional[Sequence[int]], cfg: ObjectiveConfig
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    if attrs is None or dim_assignment is None:
        raise ContractError("attribute-regularised objectives need attributes and a dimension assignment")
    attrs = torch.as_tensor(attrs)
    if attrs.shape[0] != p.stats.z.shape[0]:
        raise ContractError(f"{attrs.shape[0]} attribute rows for a batch of {p.stats.z.shape[0]}")
    return attr_reg_loss(p.stats.z, attrs, dim_assignment, cfg.delta)


# ---------------------------------------------------------------------------
# Objectives


def betavae_loss(
    real_batch: torch.Tensor,
    model: VAE,
    cfg: ObjectiveConfig,
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    eps = _draw_noise(real_batch.shape[0], model, generator)
    real = _elbo_pass(model, real_batch, eps, cfg)
    _ensure_finite("ELBO(x)", real)
    zero = _zero(real.elbo)
    elbo_real = real.elbo.mean()
    return LossBreakdown(
        total=-elbo_real,
        recon=real.recon.mean(),
        kl_real=real.kl.mean(),
        kl_fake=zero,
        exp_term=zero,
        attr_reg=zero,
        elbo_real=elbo_real,
        elbo_fake=zero,
        role="joint",
    )


def attrivae_loss(
    real_batch: torch.Tensor,
    attrs: torch.Tensor,
    model: VAE,
    cfg: ObjectiveConfig,
    dim_assignment: Sequence[int],
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    eps = _draw_noise(real_batch.shape[0], model, generator)
    real = _elbo_pass(model, real_batch, eps, cfg)
    _ensure_finite("ELBO(x)", real)
    reg, per = _regularizer(real, attrs, dim_assignment, cfg)
    zero = _zero(real.elbo)
    elbo_real = real.elbo.mean()
    return LossBreakdown(
        total=-elbo_real + cfg.gamma_reg * reg,
        recon=real.recon.mean(),
        kl_real=real.kl.mean(),
        kl_fake=zero,
        exp_term=zero,
        attr_reg=reg,
        elbo_real=elbo_real,
        elbo_fake=zero,
        role="joint",
        reg_weight=cfg.gamma_reg,
        attr_reg_per_attribute=per,
    )


def _encoder_parts(
    real_batch: torch.Tensor,
    fake_z: torch.Tensor,
    model: VAE,
    cfg: ObjectiveConfig,
    generator: Optional[torch.Generator],
) -> Tuple[_Pass, Optional[_Pass], torch.Tensor]:
    eps = _draw_noise(real_batch.shape[0], model, generator)
    real = _elbo_pass(model, real_batch, eps, cfg)
    _ensure_finite("ELBO(x)", real)
    if cfg.alpha == 0:
        return real, None, _zero(real.elbo)
    # fakes are constants for the encoder update
    with torch.no_grad():
        fake_images = model.decode(fake_z)
    fake = _elbo_pass(model, fake_images, _fake_noise(eps, fake_z.shape[0], model, generator), cfg)
    _ensure_finite("ELBO(D(z))", fake)
    return real, fake, introspective_exp_term(fake.elbo, cfg)


def sivae_encoder_loss(
    real_batch: torch.Tensor,
    fake_z: torch.Tensor,
    model: VAE,
    cfg: ObjectiveConfig,
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    real, fake, exp_term = _encoder_parts(real_batch, fake_z, model, cfg, generator)
    zero = _zero(real.elbo)
    elbo_real = real.elbo.mean()
    return LossBreakdown(
        total=-elbo_real + exp_term,
        recon=real.recon.mean(),
        kl_real=real.kl.mean(),
        kl_fake=zero if fake is None else fake.kl.mean(),
        exp_term=exp_term,
        attr_reg=zero,
        elbo_real=elbo_real,
        elbo_fake=zero if fake is None else fake.elbo.mean(),
        role="encoder",
    )


def arsivae_encoder_loss(
    real_batch: torch.Tensor,
    fake_z: torch.Tensor,
    attrs: torch.Tensor,
    model: VAE,
    cfg: ObjectiveConfig,
    dim_assignment: Sequence[int],
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    real, fake, exp_term = _encoder_parts(real_batch, fake_z, model, cfg, generator)
    reg, per = _regularizer(real, attrs, dim_assignment, cfg)
    zero = _zero(real.elbo)
    elbo_real = real.elbo.mean()
    return LossBreakdown(
        total=-elbo_real + exp_term + cfg.gamma_reg * reg,
        recon=real.recon.mean(),
        kl_real=real.kl.mean(),
        kl_fake=zero if fake is None else fake.kl.mean(),
        exp_term=exp_term,
        attr_reg=reg,
        elbo_real=elbo_real,
        elbo_fake=zero if fake is None else fake.elbo.mean(),
        role="encoder",
        reg_weight=cfg.gamma_reg,
        attr_reg_per_attribute=per,
    )


def sivae_decoder_loss(
    real_batch: torch.Tensor,
    fake_z: torch.Tensor,
    model: VAE,
    cfg: ObjectiveConfig,
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    """Decoder objective; gradients reach the decoder through the fake images."""
    eps = _draw_noise(real_batch.shape[0], model, generator)
    real = _elbo_pass(model, real_batch, eps, cfg)
    _ensure_finite("ELBO(x)", real)
    fake_images = model.decode(fake_z)
    fake = _elbo_pass(model, fake_images, _fake_noise(eps, fake_z.shape[0], model, generator), cfg)
    _ensure_finite("ELBO(D(z))", fake)
    zero = _zero(real.elbo)
    elbo_real = real.elbo.mean()
    elbo_fake = fake.elbo.mean()
    return LossBreakdown(
        total=-elbo_real - cfg.gamma * elbo_fake,
        recon=real.recon.mean(),
        kl_real=real.kl.mean(),
        kl_fake=fake.kl.mean(),
        exp_term=zero,
        attr_reg=zero,
        elbo_real=elbo_real,
        elbo_fake=elbo_fake,
        role="decoder",
        fake_weight=cfg.gamma,
    )


def loss_columns(attribute_names: Sequence[str]) -> List[str]:
    """Fixed CSV column order of a LossBreakdown row."""
    base = ["total", "recon", "kl_real", "kl_fake", "exp_term", "attr_reg", "elbo_real", "elbo_fake"]
    return base + [f"attr_reg_{name}" for name in attribute_names]
