"""Experiment drivers: patient-level cross-validation, the merged-scale
ablation on synthetic data and the Grad-CAM localisation study."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_mod
from . import plotting
from .backbone import MICRO, BackboneConfig
from .config import ExperimentConfig
from .data import (AugmentationConfig, SynthStyle, class_counts, compute_class_weights, holdout_split,
                   load_dataset, patient_kfold, preprocess, synth_generate)
from .evaluation import MetricsReport, aggregate_folds, confusion_matrix, format_table, metrics, report_json
from .fusion import MICRO_FUSION, FPNModel, FusionConfig, build_model
from .gradcam import grad_cams, localization_scores
from .layers import weighted_cce
from .training import TrainConfig, result_checkpoint, train_fold

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class FoldOutcome:
    fold: int
    report: MetricsReport
    log: list[dict]
    checkpoint: ckpt_mod.Checkpoint


@dataclass
class CrossvalResult:
    folds: list[FoldOutcome]
    aggregate: dict
    table: str
    metrics_json: str
    out_dir: Path | None = None


def _indices(records, subset) -> np.ndarray:
    pos = {id(r): i for i, r in enumerate(records)}
    return np.array([pos[id(r)] for r in subset], dtype=int)


def run_fold(cfg: ExperimentConfig, records, images, plan, fold: int) -> FoldOutcome:
    train, val, test = plan.split_records(records, fold)
    labels = np.array([r.label for r in records])
    n_classes = cfg.fusion.n_classes
    weights = compute_class_weights(class_counts(train, n_classes), cfg.class_weights).weights
    model = build_model(cfg.backbone, cfg.fusion, seed=cfg.seed)
    result = train_fold(model, images, labels, _indices(records, train), _indices(records, val),
                        cfg.train, weights, cfg.augmentation, fold=fold)
    test_idx = _indices(records, test)
    probs = model.predict(images[test_idx], result.best_params)
    y = labels[test_idx]
    cm = confusion_matrix(y, probs, n_classes)
    report = metrics(cm, weighted_cce(probs, y, weights))
    log.info("fold %d: accuracy %.1f%% after %d epochs", fold, report.accuracy, result.epoch)
    return FoldOutcome(fold, report, result.log, result_checkpoint(model, result, fold, cfg.seed))


def _fold_job(args):
    cfg, records, images, plan, fold = args
    return run_fold(cfg, records, images, plan, fold)


def run_crossval(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, figures: bool = True) -> CrossvalResult:
    """k-fold patient-level cross-validation as described by ``cfg``.

    With ``out_dir`` the run writes ``config.echo``, ``logs.jsonl``,
    ``fold<i>/checkpoint.bin``, ``metrics.json``, ``metrics.txt`` and
    ``figures/*.png``.  Folds are independent and keyed by their index, so
    ``jobs > 1`` gives the same numbers as a serial run.
    """
    manifest = cfg.resolve(cfg.data.manifest)
    if manifest is None:
        raise ValueError("config has no data.manifest")
    size = cfg.backbone.input_size[0]
    if cfg.backbone.input_size[2] != 1:
        raise ValueError("manifest images are single-channel; set backbone input_size channels to 1")
    records, images = load_dataset(manifest, size, cfg.fusion.n_classes)
    images = images.astype(np.float32)
    plan = patient_kfold(records, cfg.data.folds, cfg.seed, cfg.data.val_fraction)
    jobs_args = [(cfg, records, images, plan, f) for f in range(cfg.data.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fold_job, jobs_args))
    else:
        outcomes = [_fold_job(a) for a in jobs_args]
    reports = [o.report for o in outcomes]
    aggregate = aggregate_folds(reports)
    rows = [(f"fold {o.fold}", o.report.to_dict()) for o in outcomes]
    rows.append((f"{cfg.name} (mean ± std)", aggregate))
    table = format_table(rows)
    extra = {"name": cfg.name, "seed": cfg.seed, "top_k": cfg.fusion.top_k,
             "fold_sizes": plan.fold_sizes()}
    payload = report_json(reports, aggregate, extra)
    result = CrossvalResult(outcomes, aggregate, table, payload)
    if out_dir is not None:
        result.out_dir = write_crossval(cfg, result, out_dir, figures)
    return result


def write_crossval(cfg: ExperimentConfig, result: CrossvalResult, out_dir, figures: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.dump(), encoding="utf-8")
    with open(out / "logs.jsonl", "w", encoding="utf-8") as fh:
        for o in result.folds:
            for rec in o.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for o in result.folds:
        ckpt_mod.save(out / f"fold{o.fold}" / "checkpoint.bin", o.checkpoint)
    (out / "metrics.json").write_text(result.metrics_json, encoding="utf-8")
    (out / "metrics.txt").write_text(result.table, encoding="utf-8")
    if figures:
        plotting.learning_curves([r for o in result.folds for r in o.log], out / "figures" / "learning_curves.png")
        plotting.fold_metrics([o.report for o in result.folds], out / "figures" / "fold_metrics.png")
    return out


# ---------------------------------------------------------------------------
# merged-scale ablation on synthetic data
# ---------------------------------------------------------------------------

# Desk-scale recipe for the micro model: a fixed 60-epoch budget at a constant
# learning rate of 1e-3, keeping the best-validation parameters.  The micro
# model's validation loss sits on a plateau for 30-50 epochs before it starts
# to fall, so plateau-driven halving or early stopping ends training before
# it has learned anything.  Patience equal to the budget can never trigger.
ABLATION_TRAIN = TrainConfig(learning_rate=1e-3, lr_patience=60, early_stop_patience=60,
                             max_epochs=60, augment=False)
ABLATION_FUSION = MICRO_FUSION


@dataclass
class AblationRun:
    seed: int
    top_k: int
    recall: list[float]
    accuracy: float
    epochs: int
    confusion: list[list[int]]


@dataclass
class AblationResult:
    runs: list[AblationRun] = field(default_factory=list)

    def recall(self, top_k: int, cls: int = 1) -> list[float]:
        return [r.recall[cls] for r in self.runs if r.top_k == top_k]

    def mean_recall(self, top_k: int, cls: int = 1) -> float:
        return float(np.mean(self.recall(top_k, cls)))

    def summary(self, cls: int = 1) -> list[tuple[int, float, float]]:
        ks = sorted({r.top_k for r in self.runs})
        out = []
        for k in ks:
            v = 100.0 * np.asarray(self.recall(k, cls))
            out.append((k, float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0))
        return out


def synthetic_split(seed: int, n_per_class: int = 200, size: int = 64, style: SynthStyle = SynthStyle()):
    """Generate a synthetic set and a patient-level train/validation/test split."""
    ds = synth_generate(n_per_class, size, seed, style)
    images = np.stack([preprocess(im, size) for im in ds.images]).astype(np.float32)
    train, val, test = holdout_split(ds.records, seed)
    return ds, images, (_indices(ds.records, train), _indices(ds.records, val), _indices(ds.records, test))


def scale_ablation(seeds: Sequence[int] = (0, 1, 2, 3, 4), top_ks: Sequence[int] = (1, 3),
                   n_per_class: int = 200, size: int = 64, backbone: BackboneConfig = MICRO,
                   fusion: FusionConfig = ABLATION_FUSION, train: TrainConfig = ABLATION_TRAIN,
                   augmentation: AugmentationConfig | None = None, style: SynthStyle = SynthStyle(),
                   progress=None) -> AblationResult:
    """Per-class test recall of the micro model for each merged-scale count and seed."""
    result = AblationResult()
    for seed in seeds:
        ds, images, (tr, va, te) = synthetic_split(seed, n_per_class, size, style)
        labels = ds.labels()
        weights = compute_class_weights(np.bincount(labels[tr], minlength=3)).weights
        for k in top_ks:
            fcfg = FusionConfig(**{**fusion.to_dict(), "top_k": k})
            tcfg = TrainConfig(**{**train.to_dict(), "seed": seed})
            model = build_model(backbone, fcfg, seed=seed)
            res = train_fold(model, images, labels, tr, va, tcfg, weights, augmentation)
            probs = model.predict(images[te], res.best_params)
            cm = confusion_matrix(labels[te], probs, 3)
            rep = metrics(cm)
            run = AblationRun(seed, k, [math.nan if v is None else v / 100.0 for v in rep.per_class_sensitivity], rep.accuracy / 100.0,
                              res.epoch, cm.tolist())
            result.runs.append(run)
            if progress is not None:
                progress(run)
    return result


# Overfitting sanity check: a tiny balanced subset, constant learning rate,
# no augmentation; the training set doubles as the validation set.
PROBE_TRAIN = TrainConfig(learning_rate=1e-3, batch_size=8, lr_patience=10**6, early_stop_patience=10**6,
                          max_epochs=200, augment=False)


def overfit_probe(seed: int = 0, n_images: int = 32, fusion: FusionConfig = MICRO_FUSION,
                  train: TrainConfig = PROBE_TRAIN, size: int = 64) -> tuple[int | None, float]:
    """Train the micro model on ``n_images`` synthetic images.

    Returns ``(first epoch with 100% training accuracy or None, final accuracy)``;
    epochs are counted from 1.
    """
    ds = synth_generate(200, size, seed)
    labels = ds.labels()
    rng = np.random.default_rng(seed)
    per_class = [n_images // 3 + (1 if c < n_images % 3 else 0) for c in range(3)]
    idx = np.sort(np.concatenate([rng.choice(np.flatnonzero(labels == c), n, replace=False)
                                  for c, n in enumerate(per_class)]))
    images = np.stack([preprocess(ds.images[i], size) for i in idx]).astype(np.float32)
    y = labels[idx]
    everything = np.arange(idx.size)
    model = build_model(MICRO, fusion, seed=seed)
    tcfg = TrainConfig(**{**train.to_dict(), "seed": seed})
    res, first, acc = None, None, 0.0
    for epoch in range(1, tcfg.max_epochs + 1):
        res = train_fold(model, images, y, everything, everything, tcfg, [1.0, 1.0, 1.0], resume=res,
                         max_epochs=epoch)
        acc = float((model.predict(images, res.params).argmax(axis=1) == y).mean())
        if acc == 1.0:
            first = epoch
            break
    return first, acc


# ---------------------------------------------------------------------------
# Grad-CAM localisation
# ---------------------------------------------------------------------------


@dataclass
class LocalizationResult:
    scale_sizes: dict[int, int]
    per_scale_hits: dict[int, float]
    best_scale: dict[int, int]
    hit_rate: float
    n_images: int


def localization_study(model: FPNModel, params, images, labels, masks, classes=(1, 2)) -> LocalizationResult:
    """Fraction of correctly classified lesion images whose heatmap is hotter
    inside the lesion mask than outside.

    For each lesion class the best scale is the one with the highest hit rate
    over that class's images; the overall rate pools images at their class's
    best scale.
    """
    labels = np.asarray(labels)
    probs = model.predict(images, params)
    pred = probs.argmax(axis=1)
    hits: dict[int, dict[int, list[bool]]] = {c: {} for c in classes}
    sizes = {}
    for i in np.flatnonzero(np.isin(labels, classes) & (pred == labels)):
        if masks[i] is None or not masks[i].any():
            continue
        cams = grad_cams(model, images[i], int(labels[i]), params=params)
        for s, hm in cams.items():
            sizes[s] = hm.grid.shape[0]
            inside, outside = localization_scores(hm, masks[i])
            hits[int(labels[i])].setdefault(s, []).append(inside > outside)
    per_scale = {}
    for s in sorted(sizes):
        pooled = [h for c in classes for h in hits[c].get(s, [])]
        per_scale[s] = float(np.mean(pooled)) if pooled else float("nan")
    best, total, n = {}, 0, 0
    for c in classes:
        if not hits[c]:
            continue
        best[c] = max(sorted(hits[c]), key=lambda s: np.mean(hits[c][s]))
        total += int(np.sum(hits[c][best[c]]))
        n += len(hits[c][best[c]])
    return LocalizationResult(sizes, per_scale, best, total / n if n else float("nan"), n)
