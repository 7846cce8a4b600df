"""Bit-exact persistence for datasets, checkpoints and reports.

On-disk layout of every container::

    <dir>/manifest.json      UTF-8 JSON: version, kind, tensor table, metadata
    <dir>/blobs/<name>.f32   raw little-endian float32, row-major

Integer tensors (masks, labels) are stored as float32 (exact for the value
ranges used here) and cast back to their ``source_dtype`` on load.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from arsivae.errors import CompatibilityError, MissingArtifactError, PersistenceError, ShapeMismatchError
from arsivae.phantom_data import AttributeRecord, DatasetSplit, ImageDataset, LabeledSample
from arsivae.settings import ATTRIBUTE_NAMES

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1.0"
MANIFEST = "manifest.json"
BLOB_DIR = "blobs"


# ---------------------------------------------------------------------------
# JSON / CSV reports


def jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and non-finite floats to JSON-safe values."""
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(jsonable(payload), indent=2, sort_keys=True, allow_nan=False)
        path.write_text(text + "\n", encoding="utf-8", newline="\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc
    return path


def write_csv(path: Path, frame: pd.DataFrame, append: bool = False) -> Path:
    """CSV with header row, '.' decimals and '\\n' line endings."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_header = not (append and path.exists())
        frame.to_csv(path, mode="a" if append else "w", header=write_header, index=False, lineterminator="\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------------------
# Generic tensor container


def _blob_name(name: str) -> str:
    return f"{BLOB_DIR}/{name}.f32"


def write_container(directory: Path, tensors: Mapping[str, np.ndarray], kind: str, meta: Mapping[str, Any]) -> Path:
    directory = Path(directory)
    entries = []
    try:
        (directory / BLOB_DIR).mkdir(parents=True, exist_ok=True)
        for name, array in tensors.items():
            array = np.asarray(array)
            data = np.ascontiguousarray(array, dtype="<f4")
            filename = _blob_name(name)
            data.tofile(directory / filename)
            entries.append(
                {
                    "name": name,
                    "shape": list(array.shape),
                    "dtype": "float32",
                    "byte_order": "little",
                    "source_dtype": str(array.dtype),
                    "file": filename,
                }
            )
        manifest = {"format_version": FORMAT_VERSION, "kind": kind, "tensors": entries, "meta": jsonable(dict(meta))}
        write_json(directory / MANIFEST, manifest)
    except OSError as exc:
        raise PersistenceError(f"cannot write container {directory}: {exc}") from exc
    return directory / MANIFEST


def read_manifest(directory: Path) -> Dict[str, Any]:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingArtifactError(f"{directory} does not exist")
    path = directory / MANIFEST
    if not path.is_file():
        raise MissingArtifactError(f"{path} does not exist")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    version = str(manifest.get("format_version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise PersistenceError(f"{path}: unsupported format_version '{version}'")
    return manifest


def read_container(directory: Path, kind: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if kind is not None and manifest.get("kind") != kind:
        raise CompatibilityError(f"{directory} holds a '{manifest.get('kind')}' container, expected '{kind}'")
    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        blob = directory / entry["file"]
        if not blob.is_file():
            raise PersistenceError(f"missing blob {blob}")
        shape = tuple(int(s) for s in entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        actual = blob.stat().st_size
        if actual != expected:
            raise ShapeMismatchError(f"{blob}: {actual} bytes on disk, manifest shape {list(shape)} needs {expected}")
        array = np.fromfile(blob, dtype="<f4").reshape(shape)
        source = np.dtype(entry.get("source_dtype", "float32"))
        tensors[entry["name"]] = array.astype(source) if source != np.float32 else array.astype(np.float32)
    return tensors, manifest["meta"]


# ---------------------------------------------------------------------------
# Datasets


def save_dataset(
    samples: Sequence[LabeledSample],
    split: Optional[DatasetSplit],
    path: Path,
    labels: Optional[Mapping[str, np.ndarray]] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write samples (+ split, labels) as a container; returns the manifest path."""
    tensors: Dict[str, np.ndarray] = {}
    if samples:
        tensors["images"] = np.stack([s.image for s in samples]).astype(np.float32)
        tensors["attributes"] = np.array([s.attributes.as_tuple() for s in samples], dtype=np.int64)
        if all(s.region_mask is not None for s in samples):
            tensors["region_masks"] = np.stack([s.region_mask for s in samples]).astype(np.uint8)
    else:
        tensors["images"] = np.zeros((0, 0, 0), dtype=np.float32)
        tensors["attributes"] = np.zeros((0, len(ATTRIBUTE_NAMES)), dtype=np.int64)
    for task, values in (labels or {}).items():
        tensors[f"labels.{task}"] = np.asarray(values, dtype=np.int64)

    info = {
        "n_samples": len(samples),
        "attribute_names": list(ATTRIBUTE_NAMES),
        "split": None if split is None else split.to_dict(),
    }
    info.update(meta or {})
    manifest = write_container(path, tensors, kind="dataset", meta=info)
    logger.info("saved %d samples to %s", len(samples), path)
    return manifest


def load_dataset(path: Path) -> Tuple[List[LabeledSample], Optional[DatasetSplit]]:
    tensors, meta = read_container(path, kind="dataset")
    return _samples_from(tensors, meta, path), _split_from(meta)


def _split_from(meta: Mapping[str, Any]) -> Optional[DatasetSplit]:
    return None if meta.get("split") is None else DatasetSplit.from_dict(meta["split"])


def _samples_from(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any], path: Path) -> List[LabeledSample]:
    n = int(meta.get("n_samples", 0))
    samples: List[LabeledSample] = []
    if n:
        images = tensors["images"]
        attrs = tensors["attributes"]
        masks = tensors.get("region_masks")
        if images.shape[0] != n or attrs.shape != (n, len(ATTRIBUTE_NAMES)):
            raise ShapeMismatchError(f"{path}: tensor shapes disagree with n_samples={n}")
        for i in range(n):
            samples.append(
                LabeledSample(
                    image=images[i],
                    region_mask=None if masks is None else masks[i],
                    attributes=AttributeRecord(*(int(v) for v in attrs[i])),
                )
            )
    return samples


def load_image_dataset(path: Path) -> Tuple[ImageDataset, Optional[DatasetSplit], Dict[str, np.ndarray], Dict[str, Any]]:
    """Stacked view of a saved dataset plus its stored label sets and metadata."""
    tensors, meta = read_container(path, kind="dataset")
    samples = _samples_from(tensors, meta, path)
    if not samples:
        raise PersistenceError(f"{path} holds no samples")
    labels = {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith("labels.")}
    return ImageDataset.from_samples(samples), _split_from(meta), labels, meta


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class OptimizerState:
    step: int
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    parameters: Dict[str, np.ndarray]
    training_state: Dict[str, OptimizerState] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)


def module_parameters(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    """Parameter registry snapshot in the module's stable naming order."""
    return {name: t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()}


def parameter_digest(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()


def capture_optimizer(optimizer: torch.optim.Optimizer, names: Mapping[int, str]) -> OptimizerState:
    """Adam moments keyed by parameter name; ``names`` maps id(param) -> name."""
    state = OptimizerState(step=0)
    for group in optimizer.param_groups:
        for param in group["params"]:
            slot = optimizer.state.get(param)
            if not slot:
                continue
            name = names[id(param)]
            state.step = int(float(slot["step"]))
            state.exp_avg[name] = slot["exp_avg"].detach().cpu().numpy().copy()
            state.exp_avg_sq[name] = slot["exp_avg_sq"].detach().cpu().numpy().copy()
    return state


def restore_optimizer(optimizer: torch.optim.Optimizer, state: OptimizerState, names: Mapping[int, str]) -> None:
    saved = optimizer.state_dict()
    restored = {}
    index = 0
    for group in optimizer.param_groups:
        for param in group["params"]:
            name = names[id(param)]
            if name in state.exp_avg:
                restored[index] = {
                    "step": torch.tensor(float(state.step)),
                    "exp_avg": torch.from_numpy(state.exp_avg[name].copy()),
                    "exp_avg_sq": torch.from_numpy(state.exp_avg_sq[name].copy()),
                }
            index += 1
    saved["state"] = restored
    optimizer.load_state_dict(saved)


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    tensors: Dict[str, np.ndarray] = {}
    for name, array in ckpt.parameters.items():
        tensors[f"param.{name}"] = array
    optimizers = {}
    for opt_name, state in ckpt.training_state.items():
        for name in state.exp_avg:
            tensors[f"optim.{opt_name}.{name}.exp_avg"] = state.exp_avg[name]
            tensors[f"optim.{opt_name}.{name}.exp_avg_sq"] = state.exp_avg_sq[name]
        optimizers[opt_name] = {"step": state.step, "parameters": list(state.exp_avg)}
    meta = {
        "checkpoint_kind": ckpt.kind,
        "config": ckpt.config,
        "parameter_names": list(ckpt.parameters),
        "optimizers": optimizers,
        "provenance": ckpt.provenance,
        "extra": ckpt.extra,
    }
    return write_container(path, tensors, kind="checkpoint", meta=meta)


def load_checkpoint(path: Path, kind: Optional[str] = None) -> Checkpoint:
    tensors, meta = read_container(path, kind="checkpoint")
    if kind is not None and meta.get("checkpoint_kind") != kind:
        raise CompatibilityError(f"{path} is a '{meta.get('checkpoint_kind')}' checkpoint, expected '{kind}'")
    parameters = {}
    for name in meta["parameter_names"]:
        key = f"param.{name}"
        if key not in tensors:
            raise CompatibilityError(f"{path}: parameter '{name}' listed but not stored")
        parameters[name] = tensors[key]
    training_state = {}
    for opt_name, info in meta.get("optimizers", {}).items():
        state = OptimizerState(step=int(info["step"]))
        for name in info["parameters"]:
            for moment in ("exp_avg", "exp_avg_sq"):
                key = f"optim.{opt_name}.{name}.{moment}"
                if key not in tensors:
                    raise CompatibilityError(f"{path}: optimizer entry '{key}' listed but not stored")
                getattr(state, moment)[name] = tensors[key]
        training_state[opt_name] = state
    return Checkpoint(
        kind=meta["checkpoint_kind"],
        config=meta["config"],
        parameters=parameters,
        training_state=training_state,
        provenance=meta.get("provenance", {}),
        extra=meta.get("extra", {}),
    )


def apply_parameters(module: torch.nn.Module, parameters: Mapping[str, np.ndarray]) -> None:
    """Load a parameter registry into ``module``; every name must match exactly once."""
    expected = module.state_dict()
    missing = [n for n in expected if n not in parameters]
    unexpected = [n for n in parameters if n not in expected]
    if missing or unexpected:
        raise CompatibilityError(f"parameter registry mismatch: missing={missing} unexpected={unexpected}")
    for name, tensor in expected.items():
        if tuple(tensor.shape) != tuple(parameters[name].shape):
            raise CompatibilityError(
                f"parameter '{name}' has shape {tuple(parameters[name].shape)}, model expects {tuple(tensor.shape)}"
            )
    module.load_state_dict({n: torch.from_numpy(np.array(parameters[n], dtype=np.float32)) for n in expected})


def parameter_names_of(modules: Iterable[Tuple[str, torch.nn.Module]]) -> Dict[int, str]:
    """id(param) -> registry name for (prefix, module) pairs."""
    names: Dict[int, str] = {}
    for prefix, module in modules:
        for name, param in module.named_parameters():
            names[id(param)] = f"{prefix}{name}"
    return names
