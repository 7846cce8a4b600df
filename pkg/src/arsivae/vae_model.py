"""Convolutional VAE shared by the four methods.

Encoder: stride-2 4x4 convolutions (``enc.stage<i>``) followed by two linear
heads (``enc.mu``, ``enc.logvar``). Decoder mirrors it: ``dec.fc`` then
stride-2 transposed convolutions (``dec.stage<i>``) ending in a sigmoid.
Parameter names are part of the checkpoint format.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from arsivae.errors import ContractError
from arsivae.settings import ModelConfig

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class LatentStats:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: Optional[torch.Tensor] = None


class VAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        channels = list(config.channels)
        self.feature_size = config.image_size // 2 ** len(channels)
        flat = channels[-1] * self.feature_size**2

        enc: "OrderedDict[str, nn.Module]" = OrderedDict()
        in_ch = 1
        for i, out_ch in enumerate(channels):
            enc[f"stage{i}"] = nn.Conv2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1)
            in_ch = out_ch
        enc["mu"] = nn.Linear(flat, config.latent_dim)
        enc["logvar"] = nn.Linear(flat, config.latent_dim)
        self.enc = nn.ModuleDict(enc)

        dec: "OrderedDict[str, nn.Module]" = OrderedDict()
        dec["fc"] = nn.Linear(config.latent_dim, flat)
        widths = channels[::-1] + [1]
        for i in range(len(channels)):
            dec[f"stage{i}"] = nn.ConvTranspose2d(widths[i], widths[i + 1], kernel_size=4, stride=2, padding=1)
        self.dec = nn.ModuleDict(dec)
        self._n_stages = len(channels)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.activation == "leaky_relu":
            return F.leaky_relu(x, self.config.negative_slope)
        if self.config.activation == "relu":
            return F.relu(x)
        return F.elu(x)

    def encoder_parameters(self) -> Iterator[nn.Parameter]:
        return self.enc.parameters()

    def decoder_parameters(self) -> Iterator[nn.Parameter]:
        return self.dec.parameters()

    def encode(self, images: torch.Tensor) -> LatentStats:
        size = self.config.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (1, size, size):
            raise ContractError(f"expected images of shape (N, 1, {size}, {size}), got {tuple(images.shape)}")
        if images.numel() and (images.min() < 0 or images.max() > 1):
            raise ContractError("image values must lie in [0, 1]")
        h = images
        for i in range(self._n_stages):
            h = self._act(self.enc[f"stage{i}"](h))
        h = h.flatten(start_dim=1)
        mu = self.enc["mu"](h)
        logvar = torch.clamp(self.enc["logvar"](h), LOGVAR_MIN, LOGVAR_MAX)
        return LatentStats(mu=mu, logvar=logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ContractError(f"expected latents of shape (N, {self.latent_dim}), got {tuple(z.shape)}")
        h = self._act(self.dec["fc"](z))
        h = h.view(z.shape[0], self.config.channels[-1], self.feature_size, self.feature_size)
        for i in range(self._n_stages):
            h = self.dec[f"stage{i}"](h)
            if i < self._n_stages - 1:
                h = self._act(h)
        return torch.sigmoid(h)

    def sample_prior(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if n < 1:
            raise ContractError(f"cannot draw {n} prior samples")
        ref = next(self.parameters())
        return torch.randn(n, self.latent_dim, generator=generator, dtype=ref.dtype, device=ref.device)

    def forward(
        self, images: torch.Tensor, generator: Optional[torch.Generator] = None
    ) -> Tuple[LatentStats, torch.Tensor]:
        stats = self.encode(images)
        stats.z = reparameterize(stats, generator)
        return stats, self.decode(stats.z)

    def parameter_names(self) -> List[str]:
        return list(self.state_dict().keys())


def reparameterize(
    stats: LatentStats, generator: Optional[torch.Generator] = None, eps: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps, eps ~ N(0, I) unless given."""
    if eps is None:
        eps = torch.randn(stats.mu.shape, generator=generator, dtype=stats.mu.dtype, device=stats.mu.device)
    return stats.mu + torch.exp(0.5 * stats.logvar) * eps


def build_model(config: ModelConfig, seed: int = 0) -> VAE:
    """Instantiate with a seeded initialisation that leaves the global RNG alone."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VAE(config)


@torch.no_grad()
def latent_means(model: VAE, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Posterior means for an N x 1 x H x W array (float64 result)."""
    was_training = model.training
    model.eval()
    ref = next(model.parameters())
    out = []
    for start in range(0, len(images), batch_size):
        batch = torch.as_tensor(images[start : start + batch_size], dtype=ref.dtype, device=ref.device)
        out.append(model.encode(batch).mu.cpu().numpy().astype(np.float64))
    model.train(was_training)
    if not out:
        return np.zeros((0, model.latent_dim))
    return np.concatenate(out)


@torch.no_grad()
def reconstruct_means(model: VAE, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Decode the posterior mean of each image."""
    was_training = model.training
    model.eval()
    ref = next(model.parameters())
    out = []
    for start in range(0, len(images), batch_size):
        batch = torch.as_tensor(images[start : start + batch_size], dtype=ref.dtype, device=ref.device)
        out.append(model.decode(model.encode(batch).mu).cpu().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros_like(images)
