#!/usr/bin/env python
"""Command line entry point: ``arsivae <command> ...``."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from arsivae.dataset_io import load_image_dataset, save_checkpoint, save_dataset, write_json
from arsivae.errors import ArsivaeError, CompatibilityError, ConfigurationError, DataError, NumericalError
from arsivae.eval_metrics import disentanglement_report, latent_traversal, reconstruction_report, MetricsReport
from arsivae.latent_classifier import (
    attribute_baseline,
    evaluate,
    load_classifier,
    majority_baseline,
    shap_summary,
    shapley_all_classes,
)
from arsivae.logging_setup import setup_logging
from arsivae.phantom_data import BINARY_CLASS_NAMES, CLASS_NAMES, assign_labels, generate_phantom, split_dataset
from arsivae.settings import ATTRIBUTE_NAMES, Method, RunConfig, Task, load_run_config
from arsivae.training import load_representation, train_classifier, train_representation
from arsivae.vae_model import latent_means

logger = logging.getLogger("arsivae")

SCHEMA_PATH = Path("docs/config.schema.json")


def _config(
    args: argparse.Namespace, fill: Optional[Dict[str, Any]] = None, flags: Optional[List[str]] = None
) -> RunConfig:
    overrides = list(args.set or []) + list(flags or [])
    if getattr(args, "device", None):
        overrides.append(f"train.device={args.device}")
    return load_run_config(args.config, overrides, fill=fill).resolved()


def _load_data(path: Path):
    dataset, split, labels, meta = load_image_dataset(path)
    if split is None:
        raise DataError(f"{path} has no stored train/val/test split")
    return dataset, split, labels, meta


def _fill_from(meta: Dict[str, Any]) -> Dict[str, Any]:
    return {"data": {"n_samples": int(meta.get("n_samples", 1)) or 1}}


def _test_latents(ckpt_path: Path, data_path: Path):
    model, train_cfg, ckpt = load_representation(ckpt_path)
    dataset, split, labels, meta = _load_data(data_path)
    size = dataset.images.shape[-1]
    if size != train_cfg.model.image_size:
        raise CompatibilityError(f"checkpoint expects {train_cfg.model.image_size}px images, dataset has {size}px")
    return model, train_cfg, ckpt, dataset, split, labels, meta


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _config(args)
    data = cfg.data
    print(f"🧪 Generating {data.n_samples} phantoms ({data.phantom.image_size}x{data.phantom.image_size})")
    samples = generate_phantom(data.phantom, data.n_samples)
    attrs = np.array([s.attributes.as_tuple() for s in samples], dtype=np.float64)
    labels = {task.value: assign_labels(attrs, task) for task in Task}
    strata = labels[Task.MULTICLASS.value] if data.stratify else None
    split = split_dataset(len(samples), data.split_ratios, data.split_seed, strata=strata)
    save_dataset(samples, split, args.out, labels=labels, meta={"phantom": data.phantom.model_dump(mode="json")})

    print("=" * 60)
    print(f"📦 Dataset: {args.out}")
    print(f"   ✂️ Split: train={len(split.train)} val={len(split.val)} test={len(split.test)}")
    for a, name in enumerate(ATTRIBUTE_NAMES):
        print(f"   📐 {name}: mean={attrs[:, a].mean():.1f} std={attrs[:, a].std():.1f}")
    counts = np.bincount(labels[Task.MULTICLASS.value], minlength=len(CLASS_NAMES))
    print("   🏷️ Classes: " + ", ".join(f"{n}={c}" for n, c in zip(CLASS_NAMES, counts)))
    print("=" * 60)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    dataset, split, _, meta = _load_data(args.data)
    flags = [f"method={args.method}"] if args.method else []
    cfg = _config(args, _fill_from(meta), flags)
    train_cfg = cfg.train
    out = Path(args.out)
    resume = None
    if args.resume is not None:
        _, _, resume = load_representation(args.resume)
        print(f"🔁 Resuming from epoch {resume.provenance.get('epoch')} ({args.resume})")
    print(f"🚀 Training {train_cfg.objective.method.value} for {train_cfg.epochs} epochs")
    try:
        _, log = train_representation(
            train_cfg, dataset.subset(split.train), dataset.subset(split.val), out_dir=out, resume_from=resume
        )
    except NumericalError as exc:
        path = write_json(out / "diagnostics.json", {"error": str(exc), **exc.diagnostics})
        print(f"💥 Training aborted: {exc}. Diagnostics: {path}")
        raise
    write_json(out / "run_config.json", cfg.model_dump(mode="json"))
    last = log.steps[-1]
    print(f"✅ Finished after {int(last['step'])} steps; final total loss {last['total']:.4f}")
    print(f"📄 Log: {out / 'train_log.csv'}")
    return 0


def cmd_eval_recon(args: argparse.Namespace) -> int:
    model, _, _, dataset, split, _, _ = _test_latents(args.ckpt, args.data)
    report = reconstruction_report(model, dataset.images[split.test])
    report.write(args.out)
    s = report.scalars
    print(f"🖼️ PSNR {s['psnr_mean']:.2f} ± {s['psnr_std']:.2f} dB, SSIM {s['ssim_mean']:.4f} ± {s['ssim_std']:.4f} (LPIPS unavailable)")
    return 0


def _assignment(train_cfg, ckpt, n_attributes: int) -> List[int]:
    stored = ckpt.extra.get("dim_assignment")
    return list(stored) if stored else train_cfg.model.assignment(n_attributes)


def cmd_eval_disentangle(args: argparse.Namespace) -> int:
    model, train_cfg, ckpt, dataset, split, _, _ = _test_latents(args.ckpt, args.data)
    test = split.test
    latents = latent_means(model, dataset.images[test])
    assignment = _assignment(train_cfg, ckpt, dataset.attributes.shape[1])
    report = disentanglement_report(latents, dataset.attributes[test], assignment, dataset.attribute_names, args.bins)
    report.write(args.out)
    s = report.scalars
    print(f"🧭 Interp {s['interpretability']:.3f} | SCC {s['scc']:.3f} | SAP {s['sap']:.3f} | Mod {s['modularity']:.3f}")
    return 0


def cmd_classify(args: argparse.Namespace) -> int:
    model, train_cfg, ckpt, dataset, split, labels, meta = _test_latents(args.ckpt, args.data)
    flags = [f"classifier.task={args.task}"] if args.task else []
    cfg = _config(args, _fill_from(meta), flags)
    clf_cfg = cfg.classifier
    task = clf_cfg.task
    if task.value not in labels:
        raise DataError(f"{args.data} stores no '{task.value}' labels")
    y = labels[task.value]
    out = Path(args.out)

    print(f"🧠 Training the {task.value} latent classifier")
    clf_ckpt = train_classifier(args.ckpt, dataset, y, clf_cfg, split)
    save_checkpoint(clf_ckpt, out / "clf")
    latents = latent_means(model, dataset.images[split.test])
    rows = {
        "latent_classifier": evaluate(clf_ckpt, latents, y[split.test]),
        "attribute_baseline": attribute_baseline(dataset.attributes, y, split, clf_cfg, len(ATTRIBUTE_NAMES)),
        "majority_class": majority_baseline(y[split.train], y[split.test], task.n_classes),
    }
    report = {
        "task": task.value,
        "class_names": list(BINARY_CLASS_NAMES if task is Task.BINARY else CLASS_NAMES),
        "method": train_cfg.objective.method.value,
        "rows": rows,
        "notes": {"attribute_baseline": "MLP of the latent classifier's architecture on standardized attributes"},
    }
    write_json(out / "classification_report.json", report)
    MetricsReport(scalars={f"{row}.{k}": v for row, rec in rows.items() for k, v in rec.items()}).write(out)

    print("=" * 60)
    for name, rec in rows.items():
        print(f"   📊 {name}: acc={rec['accuracy']:.3f} f1={rec['macro_f1']:.3f} auroc={rec['auroc']:.3f}")
    print("=" * 60)
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    model, train_cfg, ckpt, dataset, split, _, meta = _test_latents(args.ckpt, args.data)
    cfg = _config(args, _fill_from(meta))
    explain = cfg.explain
    mode = args.mode or explain.mode
    n_permutations = args.permutations or explain.n_permutations
    classifier = load_classifier(args.clf)

    test = split.test
    if explain.max_samples is not None:
        test = test[: explain.max_samples]
    latents = latent_means(model, dataset.images[test])
    background = latent_means(model, dataset.images[split.train])
    assignment = _assignment(train_cfg, ckpt, dataset.attributes.shape[1])
    names = list(BINARY_CLASS_NAMES if classifier.n_classes == 2 else CLASS_NAMES)
    if len(names) != classifier.n_classes:
        raise ConfigurationError(f"no class names for a {classifier.n_classes}-class classifier")

    print(f"🔍 Shapley attribution ({mode}) over {len(test)} test samples")
    report = shap_summary(
        classifier, latents, background, assignment, dataset.attribute_names, names, mode, n_permutations, explain.seed
    )
    out = Path(args.out)
    report.write(out)
    summary: Dict[str, Any] = {
        "mode": mode,
        "n_permutations": n_permutations if mode == "sampled" else None,
        "n_samples": report.n_samples,
        "max_efficiency_residual": report.max_residual,
        "regularized_share": dict(zip(names, report.regularized_share().tolist())),
    }
    if args.verify:
        exact = shapley_all_classes(classifier, latents, background, "exact", 1, explain.seed)
        sampled = shapley_all_classes(classifier, latents, background, "sampled", n_permutations, explain.seed)
        summary["verify_max_abs_deviation"] = float(np.abs(exact.values - sampled.values).max())
        print(f"   ⚖️ exact vs sampled max deviation: {summary['verify_max_abs_deviation']:.4f}")
    write_json(out / "shap_report.json", summary)
    print(f"✅ Wrote {out / 'shap_summary.csv'} and {out / 'shap_summary.png'}")
    return 0


def cmd_traverse(args: argparse.Namespace) -> int:
    model, _, _, dataset, split, _, meta = _test_latents(args.ckpt, args.data)
    latents = latent_means(model, dataset.images[split.test])
    center = latents[args.sample] if args.sample is not None else latents.mean(axis=0)
    levels = (meta.get("phantom") or {}).get("intensity_levels")
    result = latent_traversal(model, args.dim, center, args.span, args.steps, levels)
    paths = result.write(args.out)
    print(f"🎞️ Traversal of dim {args.dim}: " + ", ".join(str(p) for p in paths))
    return 0


def cmd_schema(args: argparse.Namespace) -> int:
    schema = json.dumps(RunConfig.model_json_schema(), indent=2, sort_keys=True) + "\n"
    if args.out is None:
        sys.stdout.write(schema)
        return 0
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(schema, encoding="utf-8")
    print(f"📄 Schema written to {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arsivae", description="Attribute-regularised soft-introspective VAEs")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug output on the console")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", type=Path, help="Run config (JSON or YAML)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a dotted config key")
        p.add_argument("--device", help="Torch device hint, e.g. cpu or cuda")
        p.add_argument("--out", type=Path, required=out_required, help="Output directory")

    p = sub.add_parser("gen-data", help="Generate the phantom dataset and split")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="Stage 1: learn the latent space")
    common(p)
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="Continue from a run directory or checkpoint of the same config")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval-recon", cmd_eval_recon, "PSNR / SSIM on the test split"),
        ("eval-disentangle", cmd_eval_disentangle, "Interpretability, SCC, SAP, modularity on the test split"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--ckpt", type=Path, required=True, help="Run directory or checkpoint directory")
        p.add_argument("--data", type=Path, required=True)
        if name == "eval-disentangle":
            p.add_argument("--bins", type=int, default=20)
        p.set_defaults(func=func)

    p = sub.add_parser("classify", help="Stage 2: latent classifier plus baselines")
    common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--task", choices=[t.value for t in Task])
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("explain", help="Shapley attribution of the latent classifier")
    common(p)
    p.add_argument("--clf", type=Path, required=True, help="Classifier checkpoint directory")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=["exact", "sampled"])
    p.add_argument("--permutations", type=int)
    p.add_argument("--verify", action="store_true", help="Also compare sampled against exact attributions")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("traverse", help="Decode a sweep along one latent dim")
    common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--span", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--sample", type=int, help="Test sample to centre on; default is the mean latent")
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("schema", help="Write the run-config JSON schema")
    p.add_argument("--out", type=Path, help=f"Destination, e.g. {SCHEMA_PATH}; stdout when omitted")
    p.set_defaults(func=cmd_schema)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    args = build_parser().parse_args(argv)
    out = getattr(args, "out", None)
    if args.command != "schema":
        setup_logging(log_dir=out, verbose=args.verbose)
    try:
        return args.func(args)
    except ArsivaeError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(run())
