"""Reconstruction metrics, disentanglement metrics and latent traversals."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.stats import chi2, rankdata, spearmanr
from sklearn.metrics import mutual_info_score

from arsivae.dataset_io import write_csv, write_json
from arsivae.errors import ContractError, PersistenceError
from arsivae.phantom_data import compute_attributes, measure_regions
from arsivae.settings import ATTRIBUTE_NAMES
from arsivae.vae_model import VAE, reconstruct_means

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
MI_SIGNIFICANCE = 1e-3
UNAVAILABLE = {"lpips": "requires a pretrained perceptual network; not computed"}


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    scalars: Dict[str, float] = field(default_factory=dict)
    per_attribute: Dict[str, Dict[str, float]] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    unavailable: Dict[str, str] = field(default_factory=dict)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        merged = MetricsReport(
            dict(self.scalars), {k: dict(v) for k, v in self.per_attribute.items()}, dict(self.diagnostics), dict(self.unavailable)
        )
        merged.scalars.update(other.scalars)
        for name, values in other.per_attribute.items():
            merged.per_attribute.setdefault(name, {}).update(values)
        merged.diagnostics.update(other.diagnostics)
        merged.unavailable.update(other.unavailable)
        return merged

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scalars": self.scalars,
            "per_attribute": self.per_attribute,
            "diagnostics": self.diagnostics,
            "unavailable": self.unavailable,
        }

    def write(self, out_dir: Path) -> Tuple[Path, Path]:
        """metrics.json (full report) and metrics.csv (one row of scalars)."""
        out_dir = Path(out_dir)
        json_path = write_json(out_dir / "metrics.json", self.to_dict())
        row = {k: self.scalars[k] for k in sorted(self.scalars)}
        for name in sorted(self.unavailable):
            row[name] = "unavailable"
        csv_path = write_csv(out_dir / "metrics.csv", pd.DataFrame([row]))
        return json_path, csv_path


# ---------------------------------------------------------------------------
# Reconstruction


def _as_pair(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def _as_stack(x: np.ndarray) -> np.ndarray:
    """N x H x W view of a single image, an N x H x W or an N x 1 x H x W batch."""
    if x.ndim == 2:
        return x[None]
    if x.ndim == 4 and x.shape[1] == 1:
        return x[:, 0]
    if x.ndim == 3:
        return x
    raise ContractError(f"unsupported image array shape {x.shape}")


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) over the whole array; +inf for identical inputs."""
    x, y = _as_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / mse))


def psnr_per_image(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    x, y = _as_pair(x, y)
    return np.array([psnr(a, b, data_range) for a, b in zip(_as_stack(x), _as_stack(y))])


def _ssim_single(x: np.ndarray, y: np.ndarray, window: int, k1: float, k2: float, data_range: float) -> float:
    radius = (window - 1) // 2
    truncate = radius / SSIM_SIGMA

    def blur(img):
        return gaussian_filter(img, sigma=SSIM_SIGMA, truncate=truncate)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    ssim_map = num / den
    # only positions where the full window fits
    return float(ssim_map[radius:-radius, radius:-radius].mean())


def ssim_per_image(
    x: np.ndarray, y: np.ndarray, window: int = 11, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0
) -> np.ndarray:
    x, y = _as_pair(x, y)
    xs, ys = _as_stack(x), _as_stack(y)
    if window < 3 or window % 2 == 0:
        raise ContractError(f"SSIM window must be odd and >= 3, got {window}")
    if min(xs.shape[1:]) < window:
        raise ContractError(f"images of size {xs.shape[1:]} are smaller than the {window}x{window} window")
    return np.array([_ssim_single(a, b, window, k1, k2, data_range) for a, b in zip(xs, ys)])


def ssim(x: np.ndarray, y: np.ndarray, window: int = 11, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local SSIM (Gaussian window, sigma 1.5); batches average the per-image values."""
    return float(ssim_per_image(x, y, window, k1, k2, data_range).mean())


def reconstruction_report(model: VAE, images: np.ndarray, batch_size: int = 256) -> MetricsReport:
    """PSNR / SSIM of posterior-mean reconstructions, per image then mean and std."""
    recon = reconstruct_means(model, images, batch_size)
    p = psnr_per_image(images, recon)
    s = ssim_per_image(images, recon)
    finite = p[np.isfinite(p)]
    report = MetricsReport(
        scalars={
            "psnr_mean": float(p.mean()),
            "psnr_std": float(finite.std()) if finite.size == p.size else float("nan"),
            "ssim_mean": float(s.mean()),
            "ssim_std": float(s.std()),
        },
        diagnostics={"n_images": int(len(p))},
        unavailable=dict(UNAVAILABLE),
    )
    logger.info("reconstruction: PSNR %.2f dB, SSIM %.4f over %d images", report.scalars["psnr_mean"], report.scalars["ssim_mean"], len(p))
    return report


# ---------------------------------------------------------------------------
# Disentanglement


def _check_table(latents: np.ndarray, attrs: np.ndarray, min_rows: int) -> Tuple[np.ndarray, np.ndarray]:
    latents = np.asarray(latents, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    if latents.ndim != 2 or attrs.ndim != 2 or latents.shape[0] != attrs.shape[0]:
        raise ContractError(f"latents {latents.shape} and attributes {attrs.shape} must be row-aligned matrices")
    if latents.shape[0] < min_rows:
        raise ContractError(f"need at least {min_rows} samples, got {latents.shape[0]}")
    return latents, attrs


def scc(latents: np.ndarray, attrs: np.ndarray, dim_assignment: Sequence[int]) -> Tuple[float, List[float]]:
    """|Spearman(z^k, a)| per attribute and its mean."""
    latents, attrs = _check_table(latents, attrs, 3)
    if len(dim_assignment) != attrs.shape[1]:
        raise ContractError(f"{len(dim_assignment)} assigned dims for {attrs.shape[1]} attributes")
    per = []
    for a, k in enumerate(dim_assignment):
        if not 0 <= k < latents.shape[1]:
            raise ContractError(f"assigned dim {k} out of range for {latents.shape[1]} dims")
        z, v = latents[:, k], attrs[:, a]
        if np.ptp(z) == 0 or np.ptp(v) == 0:
            logger.warning("constant column for attribute %d / dim %d; SCC reported as 0", a, k)
            per.append(0.0)
            continue
        per.append(float(abs(spearmanr(z, v)[0])))
    return float(np.mean(per)), per


def r2_matrix(latents: np.ndarray, attrs: np.ndarray) -> np.ndarray:
    """D x A squared Pearson correlations (R^2 of a univariate linear fit); 0 for constant columns."""
    zc = latents - latents.mean(axis=0)
    ac = attrs - attrs.mean(axis=0)
    z_norm = np.sqrt((zc**2).sum(axis=0))
    a_norm = np.sqrt((ac**2).sum(axis=0))
    denom = np.outer(z_norm, a_norm)
    corr = np.divide(zc.T @ ac, denom, out=np.zeros_like(denom), where=denom > 0)
    return np.clip(corr**2, 0.0, 1.0)


def interpretability(latents: np.ndarray, attrs: np.ndarray) -> Tuple[float, List[float]]:
    """Per attribute, the best single-dim R^2; mean over attributes."""
    latents, attrs = _check_table(latents, attrs, 10)
    for a in np.flatnonzero(np.ptp(attrs, axis=0) == 0):
        logger.warning("attribute %d has zero variance; interpretability reported as 0", a)
    per = r2_matrix(latents, attrs).max(axis=0)
    return float(per.mean()), per.tolist()


def sap(latents: np.ndarray, attrs: np.ndarray) -> Tuple[float, List[float]]:
    """Gap between the best and second-best per-dim R^2, averaged over attributes."""
    latents, attrs = _check_table(latents, attrs, 10)
    if latents.shape[1] < 2:
        raise ContractError("SAP needs at least two latent dims")
    ranked = -np.sort(-r2_matrix(latents, attrs), axis=0)
    per = ranked[0] - ranked[1]
    return float(per.mean()), per.tolist()


def equal_frequency_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin index per value from its average rank; equal values always share a bin."""
    n = len(values)
    # doubled average ranks are integers, so the bin split stays exact
    twice_rank = np.rint(2.0 * rankdata(values, method="average")).astype(np.int64) - 2
    return (twice_rank * n_bins) // (2 * n)


def mutual_information_matrix(latents: np.ndarray, attrs: np.ndarray, n_bins: int = 20) -> np.ndarray:
    """D x A binned MI (nats); estimates below the independence null quantile are set to 0."""
    n = latents.shape[0]
    bins = min(n_bins, n)
    z_bins = [equal_frequency_bins(latents[:, k], bins) for k in range(latents.shape[1])]
    a_bins = [equal_frequency_bins(attrs[:, a], bins) for a in range(attrs.shape[1])]
    mi = np.array([[mutual_info_score(zb, ab) for ab in a_bins] for zb in z_bins])
    dof = (bins - 1) ** 2
    threshold = chi2.ppf(1.0 - MI_SIGNIFICANCE, dof) / (2.0 * n) if dof > 0 else 0.0
    mi[mi <= threshold] = 0.0
    return mi


def modularity(latents: np.ndarray, attrs: np.ndarray, n_bins: int = 20) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean per-dim modularity over informative dims; returns (score, per-dim (nan = skipped), MI matrix)."""
    latents, attrs = _check_table(latents, attrs, 2)
    if n_bins < 2:
        raise ContractError(f"n_bins must be >= 2, got {n_bins}")
    if latents.shape[0] < 10 * n_bins:
        logger.warning("modularity with %d samples and %d bins is poorly estimated", latents.shape[0], n_bins)
    mi = mutual_information_matrix(latents, attrs, n_bins)
    n_attrs = attrs.shape[1]
    per_dim = np.full(latents.shape[1], np.nan)
    for k, row in enumerate(mi):
        theta = row.max()
        if theta <= 0:
            logger.warning("latent dim %d carries no significant attribute information; skipped", k)
            continue
        if n_attrs == 1:
            per_dim[k] = 1.0
            continue
        off_target = (row**2).sum() - theta**2
        per_dim[k] = float(np.clip(1.0 - off_target / (theta**2 * (n_attrs - 1)), 0.0, 1.0))
    kept = per_dim[~np.isnan(per_dim)]
    if kept.size == 0:
        logger.warning("no latent dim carries attribute information; modularity reported as 0")
        return 0.0, per_dim, mi
    return float(kept.mean()), per_dim, mi


def disentanglement_report(
    latents: np.ndarray,
    attrs: np.ndarray,
    dim_assignment: Sequence[int],
    attribute_names: Sequence[str] = ATTRIBUTE_NAMES,
    n_bins: int = 20,
) -> MetricsReport:
    latents, attrs = _check_table(latents, attrs, 10)
    if len(attribute_names) != attrs.shape[1]:
        raise ContractError(f"{len(attribute_names)} attribute names for {attrs.shape[1]} attributes")
    scc_mean, scc_per = scc(latents, attrs, dim_assignment)
    interp_mean, interp_per = interpretability(latents, attrs)
    sap_mean, sap_per = sap(latents, attrs)
    mod_mean, mod_per, mi = modularity(latents, attrs, n_bins)
    per_attribute = {
        name: {"scc": scc_per[a], "interpretability": interp_per[a], "sap": sap_per[a], "dim": int(dim_assignment[a])}
        for a, name in enumerate(attribute_names)
    }
    logger.info("disentanglement: interp %.3f, SCC %.3f, SAP %.3f, modularity %.3f", interp_mean, scc_mean, sap_mean, mod_mean)
    return MetricsReport(
        scalars={"interpretability": interp_mean, "scc": scc_mean, "sap": sap_mean, "modularity": mod_mean},
        per_attribute=per_attribute,
        diagnostics={
            "r2_matrix": r2_matrix(latents, attrs),
            "mi_matrix": mi,
            "modularity_per_dim": mod_per,
            "n_samples": int(latents.shape[0]),
            "n_bins": n_bins,
        },
    )


# ---------------------------------------------------------------------------
# Latent traversal


@dataclass
class TraversalResult:
    dim: int
    values: np.ndarray  # steps
    images: np.ndarray  # steps x H x W
    readout: Optional[pd.DataFrame] = None

    def write(self, out_dir: Path, stem: Optional[str] = None) -> List[Path]:
        out_dir = Path(out_dir)
        stem = stem or f"traversal_dim{self.dim}"
        paths = [write_strip(self.images, out_dir / f"{stem}.png")]
        if self.readout is not None:
            paths.append(write_csv(out_dir / f"{stem}.csv", self.readout))
        return paths


def write_strip(images: np.ndarray, path: Path) -> Path:
    """8-bit grayscale PNG with the frames side by side, left to right."""
    strip = np.concatenate(list(np.asarray(images, dtype=np.float64)), axis=1)
    pixels = np.clip(np.round(strip * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path)
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc
    return path


@torch.no_grad()
def latent_traversal(
    model: VAE,
    dim: int,
    center: np.ndarray,
    span: float,
    steps: int,
    intensity_levels: Optional[Sequence[float]] = None,
) -> TraversalResult:
    """Decode ``center`` with coordinate ``dim`` swept over [c - span, c + span]."""
    d = model.latent_dim
    if not 0 <= dim < d:
        raise ContractError(f"dim {dim} outside [0, {d})")
    if steps < 2:
        raise ContractError(f"a traversal needs at least 2 steps, got {steps}")
    if span < 0:
        raise ContractError(f"span must be >= 0, got {span}")
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (d,):
        raise ContractError(f"center must have shape ({d},), got {center.shape}")

    values = np.linspace(center[dim] - span, center[dim] + span, steps)
    codes = np.repeat(center[None, :], steps, axis=0)
    codes[:, dim] = values
    was_training = model.training
    model.eval()
    ref = next(model.parameters())
    images = model.decode(torch.as_tensor(codes, dtype=ref.dtype, device=ref.device)).cpu().numpy()[:, 0]
    model.train(was_training)

    readout = None
    if intensity_levels is not None:
        rows = []
        for i, (value, image) in enumerate(zip(values, images)):
            record = compute_attributes(measure_regions(image, intensity_levels))
            rows.append({"step": i, "value": float(value), **dict(zip(ATTRIBUTE_NAMES, record.as_tuple()))})
        readout = pd.DataFrame(rows)
    return TraversalResult(dim=dim, values=values, images=images, readout=readout)
