"""Downstream classification on the frozen latent space and Shapley attribution.

The classifier is a small MLP over posterior means. Attribution uses Shapley
values of the class probability, with features outside a coalition replaced
by a single reference vector (the background mean).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import torch
from scipy.special import comb
from sklearn.metrics import accuracy_score, f1_score, roc_auc_score
from torch import nn

from arsivae.dataset_io import (
    Checkpoint,
    apply_parameters,
    load_checkpoint,
    module_parameters,
    write_csv,
)
from arsivae.errors import ConfigurationError, ContractError, DataError, PersistenceError
from arsivae.phantom_data import DatasetSplit
from arsivae.seeding import derive_seed, torch_generator
from arsivae.settings import ClassifierConfig, Task, validate

logger = logging.getLogger(__name__)

CLASSIFIER_KIND = "classifier"
MAX_EXACT_DIMS = 12
OTHERS = "Others"

ClassifierLike = Union["LatentClassifier", Checkpoint, Path, str]


class LatentClassifier(nn.Module):
    """MLP with ReLU hidden layers and a linear head over ``n_classes`` logits."""

    def __init__(self, input_dim: int, hidden_sizes: Sequence[int], n_classes: int):
        super().__init__()
        self.input_dim = input_dim
        self.n_classes = n_classes
        layers: List[nn.Module] = []
        width = input_dim
        for hidden in hidden_sizes:
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, n_classes))
        self.net = nn.Sequential(*layers)

    @property
    def head(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.dim() != 2 or latents.shape[1] != self.input_dim:
            raise ContractError(f"classifier expects inputs of width {self.input_dim}, got shape {tuple(latents.shape)}")
        return self.net(latents)


def build_classifier(input_dim: int, cfg: ClassifierConfig, n_classes: Optional[int] = None) -> LatentClassifier:
    n_classes = cfg.task.n_classes if n_classes is None else n_classes
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        return LatentClassifier(input_dim, cfg.hidden_sizes, n_classes)


def check_labels(labels: np.ndarray, task: Union[Task, str]) -> np.ndarray:
    """Labels as int64; values outside the task's class range are a configuration error."""
    task = Task(task)
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DataError(f"labels must be a vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= task.n_classes):
        raise ConfigurationError(
            f"task '{task.value}' expects labels in [0, {task.n_classes}), got values {sorted(set(labels.tolist()))}"
        )
    return labels.astype(np.int64)


# ---------------------------------------------------------------------------
# Fitting


@dataclass
class FitResult:
    model: LatentClassifier
    best_epoch: int
    best_val_accuracy: float
    history: List[Dict[str, float]] = field(default_factory=list)


def _accuracy(model: LatentClassifier, x: torch.Tensor, y: torch.Tensor) -> float:
    if len(y) == 0:
        return float("nan")
    with torch.no_grad():
        return float((model(x).argmax(dim=1) == y).float().mean())


def fit_classifier(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: ClassifierConfig,
) -> FitResult:
    """Adam + cross-entropy; returns the weights of the best validation-accuracy epoch."""
    cfg = validate(ClassifierConfig, cfg)
    train_y = check_labels(train_y, cfg.task)
    val_y = check_labels(val_y, cfg.task)
    if len(train_x) == 0:
        raise DataError("cannot fit a classifier on an empty training set")

    x = torch.as_tensor(np.asarray(train_x), dtype=torch.float32)
    y = torch.as_tensor(train_y)
    vx = torch.as_tensor(np.asarray(val_x), dtype=torch.float32).reshape(-1, x.shape[1])
    vy = torch.as_tensor(val_y)
    select_on_train = len(vy) == 0
    if select_on_train:
        logger.warning("empty validation set; selecting the classifier epoch on training accuracy")

    model = build_classifier(x.shape[1], cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    shuffle = torch_generator(cfg.seed, "shuffle")

    best_state = copy.deepcopy(model.state_dict())
    best_epoch, best_acc = 0, -1.0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(x), generator=shuffle)
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model(x[idx]), y[idx])
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        model.eval()
        train_acc = _accuracy(model, x, y)
        val_acc = train_acc if select_on_train else _accuracy(model, vx, vy)
        history.append({"epoch": epoch, "loss": total / len(x), "train_accuracy": train_acc, "val_accuracy": val_acc})
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    logger.info("classifier selected epoch %d (val accuracy %.4f)", best_epoch, best_acc)
    return FitResult(model=model, best_epoch=best_epoch, best_val_accuracy=best_acc, history=history)


# ---------------------------------------------------------------------------
# Persistence


def classifier_checkpoint(model: LatentClassifier, cfg: ClassifierConfig, extra: Optional[Dict] = None) -> Checkpoint:
    config = cfg.model_dump(mode="json")
    config.update({"input_dim": model.input_dim, "n_classes": model.n_classes})
    return Checkpoint(kind=CLASSIFIER_KIND, config=config, parameters=module_parameters(model), extra=dict(extra or {}))


def load_classifier(source: ClassifierLike) -> LatentClassifier:
    if isinstance(source, LatentClassifier):
        return source
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(Path(source), kind=CLASSIFIER_KIND)
    config = dict(ckpt.config)
    input_dim, n_classes = int(config.pop("input_dim")), int(config.pop("n_classes"))
    cfg = validate(ClassifierConfig, config)
    model = LatentClassifier(input_dim, cfg.hidden_sizes, n_classes)
    apply_parameters(model, ckpt.parameters)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Prediction and evaluation


def predict(classifier: ClassifierLike, latents: np.ndarray) -> np.ndarray:
    """Softmax class probabilities, N x C (float64)."""
    model = load_classifier(classifier)
    latents = np.asarray(latents)
    if latents.ndim != 2 or latents.shape[1] != model.input_dim:
        raise ContractError(f"classifier was trained on width {model.input_dim}, got latents of shape {latents.shape}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits = model(torch.as_tensor(latents, dtype=torch.float32))
        probs = torch.softmax(logits.double(), dim=1).numpy()
    model.train(was_training)
    return probs


def evaluate_probabilities(probs: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    """Accuracy, macro-F1 and one-vs-rest macro AUROC for an N x C probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ContractError(f"probabilities {probs.shape} do not align with {labels.shape[0]} labels")
    if labels.size == 0:
        raise DataError("cannot evaluate on an empty set")
    n_classes = probs.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"labels outside [0, {n_classes})")
    pred = probs.argmax(axis=1)
    record = {
        "accuracy": float(accuracy_score(labels, pred)),
        "macro_f1": float(f1_score(labels, pred, labels=list(range(n_classes)), average="macro", zero_division=0)),
        "n_samples": int(labels.size),
    }

    present = np.unique(labels)
    if present.size < 2:
        logger.warning("evaluation set holds a single class; AUROC is undefined")
        record["auroc"] = float("nan")
        return record
    scores = [roc_auc_score((labels == c).astype(int), probs[:, c]) for c in present]
    record["auroc"] = float(np.mean(scores))
    return record


def evaluate(classifier: ClassifierLike, latents: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    return evaluate_probabilities(predict(classifier, latents), labels)


def majority_baseline(train_labels: np.ndarray, eval_labels: np.ndarray, n_classes: int) -> Dict[str, float]:
    """Constant predictor emitting the training class frequencies."""
    counts = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    freq = counts / counts.sum()
    probs = np.tile(freq, (len(eval_labels), 1))
    return evaluate_probabilities(probs, eval_labels)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        values = np.asarray(values, dtype=np.float64)
        std = values.std(axis=0)
        return cls(mean=values.mean(axis=0), std=np.where(std > 0, std, 1.0))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std


def attribute_baseline(
    attrs: np.ndarray, labels: np.ndarray, split: DatasetSplit, cfg: ClassifierConfig, n_attributes: int = 3
) -> Dict[str, float]:
    """Same MLP trained on the raw attributes; evaluated on the test split."""
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim != 2 or attrs.shape[1] != n_attributes:
        raise ContractError(f"attribute baseline expects N x {n_attributes} attributes, got {attrs.shape}")
    labels = check_labels(labels, cfg.task)
    scaler = Standardizer.fit(attrs[split.train])
    fit = fit_classifier(
        scaler.transform(attrs[split.train]),
        labels[split.train],
        scaler.transform(attrs[split.val]),
        labels[split.val],
        cfg,
    )
    record = evaluate(fit.model, scaler.transform(attrs[split.test]), labels[split.test])
    record["best_epoch"] = fit.best_epoch
    return record


# ---------------------------------------------------------------------------
# Shapley values


@dataclass
class ShapleyResult:
    values: np.ndarray  # N x D (x C when all classes are attributed)
    base_value: np.ndarray
    full_values: np.ndarray
    mode: str

    @property
    def residuals(self) -> np.ndarray:
        """Efficiency gap: sum_d phi_d - (f(x) - f(reference))."""
        return self.values.sum(axis=1) - (self.full_values - self.base_value)


def _exact(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = x.shape[0]
    codes = np.arange(2**d)
    masks = ((codes[:, None] >> np.arange(d)) & 1).astype(bool)
    values = fn(np.where(masks, x, reference))
    sizes = masks.sum(axis=1)
    weights = 1.0 / (d * comb(d - 1, np.arange(d)))
    phi = np.zeros((d,) + values.shape[1:])
    for j in range(d):
        without = codes[~masks[:, j]]
        w = weights[sizes[without]]
        gain = values[without | (1 << j)] - values[without]
        phi[j] = np.tensordot(w, gain, axes=1)
    return phi, values[-1]


def _sampled(
    fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    reference: np.ndarray,
    n_permutations: int,
    seed: int,
    sample_index: int,
) -> Tuple[np.ndarray, np.ndarray]:
    d = x.shape[0]
    perms = np.stack([np.random.default_rng([seed, sample_index, p]).permutation(d) for p in range(n_permutations)])
    # row j of each block holds the first j features of the permutation
    inputs = np.repeat(reference[None, None, :], d + 1, axis=1).repeat(n_permutations, axis=0)
    for j in range(d):
        cols = perms[:, j]
        rows = np.arange(n_permutations)
        inputs[rows[:, None], np.arange(j + 1, d + 1)[None, :], cols[:, None]] = x[cols][:, None]
    values = fn(inputs.reshape(-1, d))
    values = values.reshape((n_permutations, d + 1) + values.shape[1:])
    gains = np.diff(values, axis=1)
    phi = np.zeros((d,) + values.shape[2:])
    for p in range(n_permutations):
        phi[perms[p]] += gains[p]
    return phi / n_permutations, values[0, -1]


def shapley_attributions(
    fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    reference: np.ndarray,
    mode: str = "exact",
    n_permutations: int = 2000,
    seed: int = 0,
    sample_index: int = 0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shapley values of ``fn`` at ``x`` against a single reference point.

    ``fn`` maps an M x D batch to M values (or M x C). Returns (phi, f(reference), f(x)).
    Sampled mode draws permutation p of sample i from the stream (seed, i, p).
    """
    x = np.asarray(x, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if x.ndim != 1 or reference.shape != x.shape:
        raise ContractError(f"sample {x.shape} and reference {reference.shape} must be vectors of equal length")
    d = x.shape[0]
    base = np.asarray(fn(reference[None, :]))[0]
    if mode == "exact":
        if d > MAX_EXACT_DIMS:
            raise ConfigurationError(f"exact Shapley enumeration is limited to {MAX_EXACT_DIMS} dims, got {d}")
        phi, full = _exact(fn, x, reference)
    elif mode == "sampled":
        if n_permutations < 1:
            raise ConfigurationError("sampled Shapley needs at least one permutation")
        phi, full = _sampled(fn, x, reference, n_permutations, seed, sample_index)
    else:
        raise ConfigurationError(f"unknown Shapley mode '{mode}'")
    return phi, base, full


def _probability_fn(classifier: ClassifierLike) -> Tuple[Callable[[np.ndarray], np.ndarray], int]:
    model = copy.deepcopy(load_classifier(classifier)).double().eval()

    def fn(batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return torch.softmax(model(torch.as_tensor(batch, dtype=torch.float64)), dim=1).numpy()

    return fn, model.input_dim


def shapley_all_classes(
    classifier: ClassifierLike,
    latents: np.ndarray,
    background: np.ndarray,
    mode: str,
    n_permutations: int,
    seed: int,
) -> ShapleyResult:
    fn, input_dim = _probability_fn(classifier)
    latents = np.asarray(latents, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 2 or background.shape[0] == 0:
        raise ContractError("Shapley attribution needs a non-empty background set")
    if latents.ndim != 2 or latents.shape[1] != input_dim or background.shape[1] != input_dim:
        raise ContractError(
            f"classifier width {input_dim} does not match latents {latents.shape} / background {background.shape}"
        )
    reference = background.mean(axis=0)
    phis, fulls = [], []
    base = None
    for i, x in enumerate(latents):
        phi, base, full = shapley_attributions(fn, x, reference, mode, n_permutations, seed, sample_index=i)
        phis.append(phi)
        fulls.append(full)
    if not phis:
        raise ContractError("no samples to explain")
    return ShapleyResult(values=np.stack(phis), base_value=base, full_values=np.stack(fulls), mode=mode)


def shapley_values(
    classifier: ClassifierLike,
    latents: np.ndarray,
    background: np.ndarray,
    class_index: int,
    mode: str = "exact",
    n_permutations: int = 2000,
    seed: int = 0,
) -> ShapleyResult:
    """Per-sample Shapley values of one class probability (N x D)."""
    model = load_classifier(classifier)
    if not 0 <= class_index < model.n_classes:
        raise ContractError(f"class_index {class_index} outside [0, {model.n_classes})")
    result = shapley_all_classes(model, latents, background, mode, n_permutations, seed)
    return ShapleyResult(
        values=result.values[:, :, class_index],
        base_value=result.base_value[class_index],
        full_values=result.full_values[:, class_index],
        mode=mode,
    )


@dataclass
class ShapReport:
    class_names: List[str]
    column_names: List[str]
    matrix: np.ndarray  # classes x (regularised dims + Others)
    per_dimension: np.ndarray  # classes x D
    max_residual: float
    mode: str
    n_samples: int

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.matrix, columns=self.column_names)
        frame.insert(0, "class", self.class_names)
        return frame

    def regularized_share(self) -> np.ndarray:
        """Per class: fraction of the total mean|phi| mass carried by the regularised dims."""
        total = self.per_dimension.sum(axis=1)
        reg = self.matrix[:, :-1].sum(axis=1)
        return np.divide(reg, total, out=np.zeros_like(reg), where=total > 0)

    def write(self, out_dir: Path) -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        csv_path = write_csv(out_dir / "shap_summary.csv", self.to_frame())
        png_path = out_dir / "shap_summary.png"
        fig, ax = plt.subplots(figsize=(7, 0.6 * len(self.class_names) + 2))
        try:
            left = np.zeros(len(self.class_names))
            for j, name in enumerate(self.column_names):
                ax.barh(self.class_names, self.matrix[:, j], left=left, label=name)
                left += self.matrix[:, j]
            ax.set_xlabel("mean(|SHAP value|)")
            ax.legend(loc="lower right", fontsize="small")
            fig.tight_layout()
            fig.savefig(png_path, dpi=100)
        except OSError as exc:
            raise PersistenceError(f"cannot write {png_path}: {exc}") from exc
        finally:
            plt.close(fig)
        return csv_path, png_path


def shap_summary(
    classifier: ClassifierLike,
    latents: np.ndarray,
    background: np.ndarray,
    dim_assignment: Sequence[int],
    attribute_names: Sequence[str],
    class_names: Optional[Sequence[str]] = None,
    mode: str = "sampled",
    n_permutations: int = 2000,
    seed: int = 0,
) -> ShapReport:
    """mean(|phi|) per class and dim; regularised dims listed, the rest summed into "Others"."""
    if len(dim_assignment) != len(attribute_names):
        raise ContractError(f"{len(dim_assignment)} assigned dims for {len(attribute_names)} attribute names")
    result = shapley_all_classes(classifier, latents, background, mode, n_permutations, seed)
    per_dim = np.abs(result.values).mean(axis=0).T  # C x D
    n_classes, d = per_dim.shape
    if any(k < 0 or k >= d for k in dim_assignment):
        raise ContractError(f"assigned dims {list(dim_assignment)} out of range for {d} dims")
    others = np.ones(d, dtype=bool)
    others[list(dim_assignment)] = False
    matrix = np.column_stack([per_dim[:, k] for k in dim_assignment] + [per_dim[:, others].sum(axis=1)])
    names = list(class_names) if class_names is not None else [str(c) for c in range(n_classes)]
    if len(names) != n_classes:
        raise ContractError(f"{len(names)} class names for a {n_classes}-class classifier")
    max_residual = float(np.abs(result.residuals).max())
    logger.info("Shapley summary over %d samples (%s), max efficiency residual %.2e", len(result.values), mode, max_residual)
    return ShapReport(
        class_names=names,
        column_names=list(attribute_names) + [OTHERS],
        matrix=matrix,
        per_dimension=per_dim,
        max_residual=max_residual,
        mode=mode,
        n_samples=len(result.values),
    )
