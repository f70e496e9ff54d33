"""``octfpn`` command-line interface.

Every subcommand exits 0 only when its requested artifact was fully
written; failures print a one-line cause to stderr and exit 1 (2 for usage
errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt_mod
from . import config as config_mod
from .backbone import PRESETS
from .data import (class_counts, compute_class_weights, holdout_split, load_dataset, load_image,
                   preprocess, synth_generate, write_synth)
from .evaluation import confusion_matrix, format_table, metrics, report_json
from .fusion import build_model
from .layers import weighted_cce

log = logging.getLogger("octfpn")


class CommandError(Exception):
    """Expected failure; reported as a one-line message."""


def _positive(value: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else config_mod.ExperimentConfig()
    if getattr(args, "set", None):
        cfg = config_mod.override(cfg, args.set)
    return cfg


def _run_dir(cfg, args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return cfg.resolve(cfg.output) / cfg.name


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_params(args) -> int:
    cfg = _load_config(args)
    ks = [args.top_k] if args.top_k else [cfg.fusion.top_k]
    if args.sweep:
        ks = list(range(1, cfg.backbone.n_scales + 1))
    print(f"backbone {cfg.backbone.name}  input {'x'.join(map(str, cfg.backbone.input_size))}  "
          f"classes {cfg.fusion.n_classes}")
    print(f"{'top-k':>5}  {'encoder':>12}  {'fusion':>12}  {'classifier':>12}  {'total':>12}  {'millions':>8}")
    for k in ks:
        model = build_model(cfg.backbone, config_mod.with_top_k(cfg, k).fusion, materialize=False)
        sec = model.sections()
        total = model.n_parameters()
        print(f"{k:>5}  {sec['encoder']:>12,}  {sec['fusion']:>12,}  {sec['classifier']:>12,}  "
              f"{total:>12,}  {total / 1e6:>8.2f}")
    return 0


def cmd_synth(args) -> int:
    ds = synth_generate(args.n, args.size, args.seed)
    write_synth(args.out, ds)
    n_patients = len({r.patient_id for r in ds.records})
    print(f"wrote {len(ds.records)} images from {n_patients} patients to {args.out}")
    return 0


def cmd_crossval(args) -> int:
    from .experiments import run_crossval

    cfg = _load_config(args)
    out = _run_dir(cfg, args)
    t0 = time.time()
    result = run_crossval(cfg, out, jobs=args.jobs, figures=not args.no_figures)
    print(result.table, end="")
    print(f"wrote {out} ({time.time() - t0:.0f}s)")
    return 0


def cmd_train(args) -> int:
    from . import plotting
    from .training import result_checkpoint, train_fold

    cfg = _load_config(args)
    manifest = cfg.resolve(cfg.data.manifest)
    if manifest is None:
        raise CommandError("config has no data.manifest")
    records, images = load_dataset(manifest, cfg.backbone.input_size[0], cfg.fusion.n_classes)
    images = images.astype(np.float32)
    train, val, test = holdout_split(records, cfg.seed, args.test_fraction, cfg.data.val_fraction)
    pos = {id(r): i for i, r in enumerate(records)}
    idx = lambda rs: np.array([pos[id(r)] for r in rs], dtype=int)  # noqa: E731
    labels = np.array([r.label for r in records])
    weights = compute_class_weights(class_counts(train, cfg.fusion.n_classes), cfg.class_weights).weights
    model = build_model(cfg.backbone, cfg.fusion, seed=cfg.seed)
    result = train_fold(model, images, labels, idx(train), idx(val), cfg.train, weights, cfg.augmentation,
                        on_epoch=lambda r: log.info("epoch %d train %.4f val %.4f lr %.2e", r["epoch"],
                                                    r["train_loss"], r["val_loss"], r["lr"]))
    out = _run_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.dump(), encoding="utf-8")
    with open(out / "logs.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    ckpt_mod.save(out / "checkpoint.bin", result_checkpoint(model, result, 0, cfg.seed))
    ckpt_mod.save(out / "last.bin", result_checkpoint(model, result, 0, cfg.seed, best=False))
    probs = model.predict(images[idx(test)], result.best_params)
    y = labels[idx(test)]
    report = metrics(confusion_matrix(y, probs, cfg.fusion.n_classes), weighted_cce(probs, y, weights))
    (out / "metrics.json").write_text(report_json([report], None, {"name": cfg.name, "split": "holdout"}),
                                      encoding="utf-8")
    table = format_table([(f"{cfg.name} (test)", report.to_dict())])
    (out / "metrics.txt").write_text(table, encoding="utf-8")
    plotting.learning_curves(result.log, out / "figures" / "learning_curves.png")
    print(table, end="")
    print(f"best epoch {result.best_epoch}, stopped after {result.epoch} epochs; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    from .training import model_from_checkpoint

    ckpt = ckpt_mod.load(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    records, images = load_dataset(args.manifest, model.backbone.input_size[0], model.n_classes)
    if not records:
        raise CommandError(f"{args.manifest} lists no images")
    labels = np.array([r.label for r in records])
    counts = np.bincount(labels, minlength=model.n_classes)
    weights = compute_class_weights(np.maximum(counts, 1), args.class_weights).weights
    probs = model.predict(images.astype(np.float32))
    report = metrics(confusion_matrix(labels, probs, model.n_classes), weighted_cce(probs, labels, weights),
                     averaging=args.averaging)
    print(format_table([(Path(args.checkpoint).name, report.to_dict())]), end="")
    if args.json:
        Path(args.json).write_text(report_json([report], None), encoding="utf-8")
    return 0


def cmd_heatmap(args) -> int:
    from . import plotting
    from .gradcam import export_heatmap, grad_cams
    from .training import model_from_checkpoint

    model = model_from_checkpoint(ckpt_mod.load(args.checkpoint))
    size = model.backbone.input_size[0]
    out = Path(args.out)
    scales = args.scales or None
    written = 0
    for path in args.images:
        raw = load_image(path)
        image = preprocess(raw, size).astype(np.float32)
        target = args.target_class
        if target is None:
            target = int(model.predict(image[None]).argmax())
        cams = grad_cams(model, image, target, scales, tap=args.tap, source=str(path))
        stem = Path(path).stem
        for hm in cams.values():
            export_heatmap(hm, image, out, stem)
            written += 1
        plotting.heatmap_panel(image, [cams[s] for s in sorted(cams)], out / f"{stem}_class{target}_panel.png",
                               title=f"{stem}: class {target}")
    print(f"wrote {written} heatmaps to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    t0 = time.time()
    results = run_suite(args.step, args.seed)
    worst = max(err for _, err in results)
    for name, err in results:
        print(f"{name:<22} {err:.3e}")
    print(f"max relative error {worst:.3e} over {len(results)} checks ({time.time() - t0:.1f}s)")
    if worst >= TOLERANCE:
        raise CommandError(f"max relative error {worst:.3e} is not below {TOLERANCE:g}")
    return 0


def cmd_transfer(args) -> int:
    from .training import transfer_weights

    source = ckpt_mod.load(args.source)
    cfg = _load_config(args)
    if args.classes:
        cfg = replace(cfg, fusion=replace(cfg.fusion, n_classes=args.classes))
    sections = tuple(args.sections.split(",")) if args.sections else None
    try:
        model, report = transfer_weights(source, cfg.backbone, cfg.fusion, seed=cfg.seed, sections=sections)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    ckpt = ckpt_mod.Checkpoint(params=model.params, backbone=cfg.backbone.to_dict(), fusion=cfg.fusion.to_dict(),
                               state={"transferred_from": str(args.source)})
    ckpt_mod.save(args.out, ckpt)
    print(f"copied {len(report.copied)} parameters")
    for name in report.reinitialized:
        print(f"re-initialized {name}")
    print(f"wrote {args.out}")
    return 0


def cmd_ablation(args) -> int:
    from . import plotting
    from .experiments import ABLATION_FUSION, ABLATION_TRAIN, scale_ablation

    train = replace(ABLATION_TRAIN, max_epochs=args.epochs) if args.epochs else ABLATION_TRAIN
    def progress(r):
        recalls = "/".join(f"{100 * v:.1f}" for v in r.recall)
        print(f"seed {r.seed} top-{r.top_k}: small-lesion recall {100 * r.recall[1]:.1f}%  "
              f"accuracy {100 * r.accuracy:.1f}%  recall normal/small/large {recalls}  ({r.epochs} epochs)",
              flush=True)
    result = scale_ablation(args.seeds, args.top_k, args.n, args.size, PRESETS["micro"], ABLATION_FUSION, train,
                            progress=progress)
    summary = result.summary(cls=1)
    for k, mean, std in summary:
        print(f"top-{k}: small-lesion recall {mean:.1f} ± {std:.1f}%")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"runs": [vars(r) for r in result.runs],
                   "summary": [{"top_k": k, "mean": m, "std": s} for k, m, s in summary]}
        (out / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        plotting.scale_sweep(summary, out / "ablation.png")
        print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octfpn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="experiment YAML file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                       help="override a config key, e.g. --set train.max_epochs=5 (repeatable)")

    p = sub.add_parser("params", help="print parameter counts")
    with_config(p)
    p.add_argument("--top-k", type=_positive, help="number of merged scales (default: from config)")
    p.add_argument("--sweep", action="store_true", help="every top-k from 1 to the number of scales")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="write the synthetic lesion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive, default=200, help="images per class")
    p.add_argument("--size", type=_positive, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("crossval", help="patient-level k-fold cross-validation")
    with_config(p, required=True)
    p.add_argument("--out", help="run directory (default: <output>/<name>)")
    p.add_argument("--jobs", type=_positive, default=1, help="folds trained in parallel")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("train", help="train on a single patient-level split")
    with_config(p, required=True)
    p.add_argument("--out")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--class-weights", default="proportional")
    p.add_argument("--averaging", choices=("macro", "micro"), default="macro")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="per-scale Grad-CAM exports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", type=_positive, nargs="*", help="scale indices (default: all merged)")
    p.add_argument("--target-class", type=int, help="default: the predicted class")
    p.add_argument("--tap", choices=("head", "encoder"), default="head")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and a fusion graph")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("transfer", help="initialise a model from another checkpoint")
    with_config(p)
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=_positive, help="override the target class count")
    p.add_argument("--sections", help="comma-separated subset of encoder,fusion,classifier to copy")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("ablation", help="merged-scale ablation of the micro model on synthetic data")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--top-k", type=_positive, nargs="+", default=[1, 3])
    p.add_argument("--n", type=_positive, default=200, help="images per class")
    p.add_argument("--size", type=_positive, default=64)
    p.add_argument("--epochs", type=_positive, help="override the epoch budget")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, config_mod.ConfigError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"octfpn {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
