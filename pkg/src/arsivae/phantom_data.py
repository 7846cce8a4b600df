"""Synthetic cardiac-like phantoms with exactly computable region areas.

Each image is an LV cavity (filled disk), a concentric myocardial ring and an
RV crescent (a lateral disk clipped by the myocardial outer boundary). Region
areas are pixel counts of the label map, so the attributes are exact.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from arsivae.errors import ConfigurationError, DataError
from arsivae.settings import ATTRIBUTE_NAMES, PhantomSpec, Task, validate

logger = logging.getLogger(__name__)

BACKGROUND, LV, MYO, RV = 0, 1, 2, 3
REGION_LABELS = (BACKGROUND, LV, MYO, RV)

CLASS_NAMES: Tuple[str, ...] = ("NOR", "MINF", "DCM", "HCM", "ARV")
BINARY_CLASS_NAMES: Tuple[str, ...] = ("NOR", "PATH")


@dataclass(frozen=True)
class AttributeRecord:
    lv_area: int
    myo_area: int
    rv_area: int

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.lv_area, self.myo_area, self.rv_area)


@dataclass(frozen=True)
class PhantomGeometry:
    cx: float
    cy: float
    lv_radius: float
    myo_thickness: float
    rv_scale: float

    @property
    def outer_radius(self) -> float:
        return self.lv_radius + self.myo_thickness


@dataclass
class LabeledSample:
    image: np.ndarray
    region_mask: Optional[np.ndarray]
    attributes: AttributeRecord

    def __post_init__(self):
        if self.region_mask is not None and self.region_mask.shape != self.image.shape:
            raise DataError(f"image shape {self.image.shape} != mask shape {self.region_mask.shape}")


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    ratios: Tuple[float, float, float]
    seed: int

    def check(self, n: int) -> None:
        parts = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise DataError("split parts overlap")
        if set().union(*parts) != set(range(n)):
            raise DataError("split does not cover the dataset")

    def to_dict(self) -> dict:
        return {
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
            "ratios": list(self.ratios),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetSplit":
        return cls(
            train=np.asarray(d["train"], dtype=np.int64),
            val=np.asarray(d["val"], dtype=np.int64),
            test=np.asarray(d["test"], dtype=np.int64),
            ratios=tuple(d["ratios"]),
            seed=int(d["seed"]),
        )


@dataclass
class ImageDataset:
    """Stacked arrays consumed by training and evaluation."""

    images: np.ndarray  # N x 1 x H x W, float32 in [0, 1]
    attributes: np.ndarray  # N x A, float64
    masks: Optional[np.ndarray] = None  # N x H x W, uint8
    attribute_names: Tuple[str, ...] = ATTRIBUTE_NAMES
    labels: Optional[np.ndarray] = field(default=None)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, index: np.ndarray) -> "ImageDataset":
        index = np.asarray(index, dtype=np.int64)
        return ImageDataset(
            images=self.images[index],
            attributes=self.attributes[index],
            masks=None if self.masks is None else self.masks[index],
            attribute_names=self.attribute_names,
            labels=None if self.labels is None else self.labels[index],
        )

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "ImageDataset":
        if not samples:
            raise DataError("cannot stack an empty sample list")
        images = np.stack([s.image for s in samples]).astype(np.float32)[:, None]
        attributes = np.array([s.attributes.as_tuple() for s in samples], dtype=np.float64)
        masks = None
        if all(s.region_mask is not None for s in samples):
            masks = np.stack([s.region_mask for s in samples]).astype(np.uint8)
        return cls(images=images, attributes=attributes, masks=masks)


def compute_attributes(region_mask: np.ndarray) -> AttributeRecord:
    """Exact LV / Myo / RV pixel counts of a label map."""
    mask = np.asarray(region_mask)
    if mask.size and not np.isin(mask, REGION_LABELS).all():
        unknown = sorted(set(np.unique(mask).tolist()) - set(REGION_LABELS))
        raise DataError(f"region mask contains unknown labels {unknown}")
    counts = np.bincount(mask.astype(np.int64).ravel(), minlength=len(REGION_LABELS))
    return AttributeRecord(lv_area=int(counts[LV]), myo_area=int(counts[MYO]), rv_area=int(counts[RV]))


def render_phantom(
    geometry: PhantomGeometry,
    spec: PhantomSpec,
    rng: Optional[np.random.Generator] = None,
) -> LabeledSample:
    """Rasterise one phantom. Noise is added only when ``rng`` is given."""
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d2_lv = (xx - geometry.cx) ** 2 + (yy - geometry.cy) ** 2

    outer = geometry.outer_radius
    rv_cx = geometry.cx - outer
    rv_radius = geometry.rv_scale * outer
    d2_rv = (xx - rv_cx) ** 2 + (yy - geometry.cy) ** 2

    lv = d2_lv <= geometry.lv_radius**2
    epi = d2_lv <= outer**2
    myo = epi & ~lv
    rv = (d2_rv <= rv_radius**2) & ~epi

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[lv] = LV
    mask[myo] = MYO
    mask[rv] = RV

    levels = np.asarray(spec.intensity_levels, dtype=np.float64)
    image = levels[mask]
    if rng is not None and spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledSample(image=image, region_mask=mask, attributes=compute_attributes(mask))


def _sample_geometry(spec: PhantomSpec, rng: np.random.Generator) -> PhantomGeometry:
    centre = spec.image_size / 2.0
    jx, jy = rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
    return PhantomGeometry(
        cx=centre + jx,
        cy=centre + jy,
        lv_radius=rng.uniform(*spec.lv_radius_range),
        myo_thickness=rng.uniform(*spec.myo_thickness_range),
        rv_scale=rng.uniform(*spec.rv_scale_range),
    )


def generate_phantom(spec: Union[PhantomSpec, Mapping[str, Any]], n: int) -> List[LabeledSample]:
    """Generate ``n`` phantoms; sample i uses the RNG stream (seed, i)."""
    spec = validate(PhantomSpec, spec)
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    samples = []
    for index in range(n):
        rng = np.random.default_rng([spec.seed, index])
        geometry = _sample_geometry(spec, rng)
        samples.append(render_phantom(geometry, spec, rng))
    logger.debug("generated %d phantoms (seed=%d, size=%d)", n, spec.seed, spec.image_size)
    return samples


def measure_regions(image: np.ndarray, intensity_levels: Sequence[float]) -> np.ndarray:
    """Label each pixel with the region whose gray level is nearest."""
    levels = np.asarray(intensity_levels, dtype=np.float64)
    distance = np.abs(np.asarray(image, dtype=np.float64)[..., None] - levels)
    return np.argmin(distance, axis=-1).astype(np.uint8)


def assign_labels(attributes: np.ndarray, task: Union[Task, str] = Task.MULTICLASS) -> np.ndarray:
    """Pathology-like class labels from attribute percentiles.

    HCM: myo above p80; DCM: lv above p80; ARV: rv above p80; MINF: lv above
    p70 and myo below p30; NOR otherwise. Earlier rules win (HCM > DCM > ARV >
    MINF). Binary task: NOR vs any pathology.
    """
    task = Task(task)
    attrs = np.asarray(attributes, dtype=np.float64)
    if attrs.ndim != 2 or attrs.shape[1] != len(ATTRIBUTE_NAMES):
        raise DataError(f"expected N x {len(ATTRIBUTE_NAMES)} attributes, got {attrs.shape}")
    lv, myo, rv = attrs[:, 0], attrs[:, 1], attrs[:, 2]

    labels = np.full(len(attrs), CLASS_NAMES.index("NOR"), dtype=np.int64)
    rules = [
        ("HCM", myo > np.percentile(myo, 80)),
        ("DCM", lv > np.percentile(lv, 80)),
        ("ARV", rv > np.percentile(rv, 80)),
        ("MINF", (lv > np.percentile(lv, 70)) & (myo < np.percentile(myo, 30))),
    ]
    assigned = np.zeros(len(attrs), dtype=bool)
    for name, hit in rules:
        take = hit & ~assigned
        labels[take] = CLASS_NAMES.index(name)
        assigned |= take

    if task is Task.BINARY:
        return (labels != CLASS_NAMES.index("NOR")).astype(np.int64)
    return labels


def _allocate(n: int, ratios: np.ndarray) -> np.ndarray:
    raw = n * ratios
    sizes = np.floor(raw + 1e-9).astype(np.int64)
    remainder = n - int(sizes.sum())
    if remainder > 0:
        order = np.argsort(-(raw - sizes), kind="stable")
        sizes[order[:remainder]] += 1
    return sizes


def split_dataset(
    n: int,
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    strata: Optional[np.ndarray] = None,
) -> DatasetSplit:
    """Deterministic train/val/test permutation split, optionally stratified."""
    ratios_arr = np.asarray(ratios, dtype=np.float64)
    if ratios_arr.shape != (3,) or (ratios_arr <= 0).any() or abs(ratios_arr.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three positive numbers summing to 1, got {list(ratios)}")
    if n < len(ratios_arr):
        raise DataError(f"cannot split {n} samples into {len(ratios_arr)} parts")

    rng = np.random.default_rng(seed)
    parts: List[List[int]] = [[], [], []]
    if strata is None:
        perm = rng.permutation(n)
        sizes = _allocate(n, ratios_arr)
        # every part gets at least one sample
        for i in range(len(sizes)):
            if sizes[i] == 0:
                donor = int(np.argmax(sizes))
                sizes[donor] -= 1
                sizes[i] += 1
        bounds = np.cumsum(sizes)[:-1]
        for i, chunk in enumerate(np.split(perm, bounds)):
            parts[i] = chunk.tolist()
    else:
        strata = np.asarray(strata)
        if strata.shape != (n,):
            raise DataError(f"strata must have shape ({n},), got {strata.shape}")
        for value in np.unique(strata):
            members = np.flatnonzero(strata == value)
            members = members[rng.permutation(len(members))]
            bounds = np.cumsum(_allocate(len(members), ratios_arr))[:-1]
            for i, chunk in enumerate(np.split(members, bounds)):
                parts[i].extend(chunk.tolist())
        if any(len(p) == 0 for p in parts):
            raise DataError("stratified split left a part empty; use more samples or disable stratification")

    split = DatasetSplit(
        train=np.asarray(parts[0], dtype=np.int64),
        val=np.asarray(parts[1], dtype=np.int64),
        test=np.asarray(parts[2], dtype=np.int64),
        ratios=tuple(float(r) for r in ratios_arr),
        seed=seed,
    )
    split.check(n)
    return split
