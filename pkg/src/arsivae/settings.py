"""Configuration records and the run-config loader.

All records are pydantic models with unknown keys rejected. The loader merges
a user file (JSON or YAML) over the packaged ``config/defaults.yaml``, applies
``--set dotted.key=value`` overrides and validates the result.
"""
from __future__ import annotations

import copy
import json
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional, Tuple, Type, TypeVar

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from arsivae.errors import ConfigurationError
from arsivae.seeding import derive_seed

ATTRIBUTE_NAMES: Tuple[str, ...] = ("lv_area", "myo_area", "rv_area")

M = TypeVar("M", bound=BaseModel)


class Method(str, Enum):
    BETA_VAE = "beta-vae"
    ATTRI_VAE = "attri-vae"
    SIVAE = "sivae"
    AR_SIVAE = "ar-sivae"

    @property
    def adversarial(self) -> bool:
        return self in (Method.SIVAE, Method.AR_SIVAE)

    @property
    def regularized(self) -> bool:
        return self in (Method.ATTRI_VAE, Method.AR_SIVAE)


class Task(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multi"

    @property
    def n_classes(self) -> int:
        return 2 if self is Task.BINARY else 5


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


def _check_range(name: str, value: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = value
    if not lo > 0:
        raise ValueError(f"{name} minimum must be > 0, got {lo}")
    if lo > hi:
        raise ValueError(f"{name} minimum {lo} exceeds maximum {hi}")
    return value


class PhantomSpec(_Config):
    """Geometry and appearance of the synthetic cardiac-like images."""

    image_size: int = Field(default=64, ge=8, description="Square image side in pixels")
    lv_radius_range: Tuple[float, float] = Field(default=(5.0, 10.0), description="LV cavity radius [min, max] in pixels")
    myo_thickness_range: Tuple[float, float] = Field(default=(2.0, 4.0), description="Myocardial ring thickness [min, max] in pixels")
    rv_scale_range: Tuple[float, float] = Field(
        default=(0.5, 1.0), description="RV disk radius as a fraction of the myocardial outer radius [min, max]"
    )
    center_jitter: float = Field(default=2.0, ge=0.0, description="Max displacement of the LV centre in pixels")
    intensity_levels: Tuple[float, float, float, float] = Field(
        default=(0.0, 0.9, 0.4, 0.65), description="Gray values for background, LV, myocardium, RV"
    )
    noise_std: float = Field(default=0.02, ge=0.0, description="Additive Gaussian noise sigma")
    seed: int = Field(default=0, ge=0, description="Generation seed")

    @field_validator("lv_radius_range")
    @classmethod
    def _lv_range(cls, v):
        return _check_range("lv_radius_range", v)

    @field_validator("myo_thickness_range")
    @classmethod
    def _myo_range(cls, v):
        return _check_range("myo_thickness_range", v)

    @field_validator("rv_scale_range")
    @classmethod
    def _rv_range(cls, v):
        return _check_range("rv_scale_range", v)

    @field_validator("intensity_levels")
    @classmethod
    def _levels(cls, v):
        if any(not 0.0 <= level <= 1.0 for level in v):
            raise ValueError("intensity levels must lie in [0, 1]")
        if len(set(v)) != len(v):
            raise ValueError("intensity levels must be pairwise distinct")
        return v

    @model_validator(mode="after")
    def _fits_in_image(self) -> "PhantomSpec":
        outer = self.lv_radius_range[1] + self.myo_thickness_range[1]
        reach = outer * (1.0 + self.rv_scale_range[1]) + self.center_jitter
        if reach > self.image_size / 2.0:
            raise ValueError(
                f"phantom reaches {reach:.1f} px from the centre, image half-size is {self.image_size / 2.0:.1f}"
            )
        return self


class ModelConfig(_Config):
    latent_dim: int = Field(default=16, ge=1, description="Latent dimensionality D")
    regularized_dims: Optional[List[int]] = Field(
        default=None, description="Latent index per attribute, in attribute order; default 0..A-1"
    )
    channels: List[int] = Field(default=[32, 64, 128, 256], min_length=1, description="Conv widths per stride-2 stage")
    image_size: int = Field(default=64, ge=2, description="Input image side")
    activation: Literal["leaky_relu", "relu", "elu"] = Field(default="leaky_relu")
    negative_slope: float = Field(default=0.2, ge=0.0, description="Leaky-rectifier slope")

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if any(c <= 0 for c in self.channels):
            raise ValueError("channel widths must be positive")
        factor = 2 ** len(self.channels)
        if self.image_size % factor != 0:
            raise ValueError(f"image_size {self.image_size} is not divisible by 2**{len(self.channels)}")
        if self.regularized_dims is not None:
            if len(set(self.regularized_dims)) != len(self.regularized_dims):
                raise ValueError("regularized_dims must be distinct")
            if any(k < 0 or k >= self.latent_dim for k in self.regularized_dims):
                raise ValueError("regularized_dims must index into [0, latent_dim)")
        return self

    def assignment(self, n_attributes: int) -> List[int]:
        """Latent index carrying each attribute."""
        if n_attributes > self.latent_dim:
            raise ConfigurationError(f"{n_attributes} attributes do not fit into latent_dim={self.latent_dim}")
        if self.regularized_dims is None:
            return list(range(n_attributes))
        if len(self.regularized_dims) != n_attributes:
            raise ConfigurationError(
                f"regularized_dims has {len(self.regularized_dims)} entries for {n_attributes} attributes"
            )
        return list(self.regularized_dims)


class ObjectiveConfig(_Config):
    method: Method = Field(default=Method.AR_SIVAE)
    beta_rec: float = Field(default=1.0, description="Reconstruction weight")
    beta_kl: Optional[float] = Field(default=None, description="KL weight; None means 2 for VAE variants, 1 for SIVAE variants")
    alpha: float = Field(default=2.0, ge=0.0, description="Encoder exp-term temperature")
    gamma: float = Field(default=1.0, ge=0.0, description="Decoder fake-ELBO weight")
    gamma_reg: float = Field(default=1.0, ge=0.0, description="Attribute-regularisation weight")
    delta: float = Field(default=1.0, gt=0.0, description="tanh spread")
    exp_elbo_scale: float = Field(default=1.0, gt=0.0, description="Scale applied to the fake ELBO inside exp()")
    exp_clamp: float = Field(default=20.0, description="Upper bound on the exp() argument")

    @property
    def kl_weight(self) -> float:
        if self.beta_kl is not None:
            return self.beta_kl
        return 1.0 if self.method.adversarial else 2.0


class OptimizerConfig(_Config):
    learning_rate: float = Field(default=2e-4, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)


class TrainConfig(_Config):
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch_size: int = Field(default=32, ge=2, description="Pairwise loss needs at least two samples")
    epochs: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)
    log_every: int = Field(default=50, ge=1, description="Steps between progress log lines")
    checkpoint_every: int = Field(default=10, ge=0, description="Epochs between checkpoints; 0 keeps only the final one")
    deterministic: bool = Field(default=True, description="Single-threaded, bit-reproducible mode")
    device: str = Field(default="cpu")
    progress: bool = Field(default=False, description="Show a tqdm bar over epochs")


class ClassifierConfig(_Config):
    hidden_sizes: List[int] = Field(default=[64, 32])
    task: Task = Field(default=Task.MULTICLASS)
    epochs: int = Field(default=200, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=64, ge=1)
    weight_decay: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0, ge=0)

    @field_validator("hidden_sizes")
    @classmethod
    def _positive(cls, v):
        if any(h <= 0 for h in v):
            raise ValueError("hidden sizes must be positive")
        return v


class ExplainConfig(_Config):
    mode: Literal["exact", "sampled"] = Field(default="sampled")
    n_permutations: int = Field(default=2000, ge=1)
    max_samples: Optional[int] = Field(default=200, ge=1, description="Cap on explained test samples")
    seed: int = Field(default=0, ge=0)


class DataConfig(_Config):
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    n_samples: int = Field(..., ge=1, description="Number of phantom samples to generate")
    split_ratios: Tuple[float, float, float] = Field(default=(0.7, 0.15, 0.15))
    split_seed: int = Field(default=0, ge=0)
    stratify: bool = Field(default=True, description="Stratify the split by 5-class phantom labels")


class RunConfig(_Config):
    data: DataConfig
    train: TrainConfig = Field(default_factory=TrainConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)
    method: Optional[Method] = Field(default=None, description="Overrides train.objective.method")
    output_dir: Optional[str] = None
    seed: Optional[int] = Field(default=None, ge=0, description="Top-level seed; subsystem seeds are derived from it")

    def resolved(self) -> "RunConfig":
        """Copy with the method override and derived subsystem seeds applied."""
        cfg = self.model_copy(deep=True)
        if cfg.method is not None:
            cfg.train.objective.method = cfg.method
        if cfg.seed is not None:
            cfg.data.phantom.seed = derive_seed(cfg.seed, "phantom")
            cfg.data.split_seed = derive_seed(cfg.seed, "split")
            cfg.train.seed = derive_seed(cfg.seed, "train")
            cfg.classifier.seed = derive_seed(cfg.seed, "classifier")
            cfg.explain.seed = derive_seed(cfg.seed, "explain")
        return cfg


def validate(model: Type[M], data: Any) -> M:
    """Validate ``data`` into ``model``; schema violations become ConfigurationError."""
    if isinstance(data, model):
        return data
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            where = ".".join(str(p) for p in err["loc"]) or model.__name__
            problems.append(f"{where}: {err['msg']}")
        raise ConfigurationError("invalid configuration: " + "; ".join(problems)) from exc


def load_defaults() -> Dict[str, Any]:
    text = resources.files("arsivae").joinpath("config/defaults.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text) or {}


def read_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must contain a mapping at the top level")
    return data


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars/lists."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigurationError(f"override '{item}' has an empty key")
        node = data
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            elif not isinstance(child, dict):
                raise ConfigurationError(f"override '{item}': '{key}' is not a section")
            node = child
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def load_run_config(
    path: Optional[Path], overrides: Iterable[str] = (), fill: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """defaults <- fill <- user file <- overrides, then validated.

    ``fill`` supplies values known from context, e.g. ``data.n_samples`` of
    an existing dataset.
    """
    user = read_config_file(path) if path is not None else {}
    base = deep_merge(load_defaults(), fill or {})
    merged = apply_overrides(deep_merge(base, user), overrides)
    return validate(RunConfig, merged)
