"""``volt3d`` command-line entry point.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage/config/data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as D
from .config import RunConfig
from .errors import NumericError, Volt3dError
from .gradsuite import run_gradient_suite
from .metrics import evaluate_scores
from .model import ArchitectureSpec, build_model, count_parameters, load_checkpoint, save_checkpoint
from .nifti_io import describe_header, read_header, read_volume, write_volume
from .trainer import TrainConfig, cross_validate, evaluate, export_curves, predict_records, summarize, train
from .volume_ops import AugmentationPolicy, ResizeSpec, normalize_intensity, resize_trilinear

log = logging.getLogger("volt3d")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def arch_from(cfg) -> ArchitectureSpec:
    shape = tuple(cfg["model.input_shape"])
    if len(shape) == 3:
        shape = shape + (1,)
    return ArchitectureSpec(shape, tuple(cfg["model.filters"]), cfg["model.dense_units"],
                            cfg["model.dropout"], cfg["model.block_order"])


def policy_from(cfg, seed):
    if not cfg["augment.enabled"]:
        return None
    return AugmentationPolicy(cfg["augment.flip_axis"], cfg["augment.count"], cfg["augment.noise_sigma"], seed)


def train_config_from(cfg, epochs=None, augmentation="cfg", seed=None):
    seed = cfg["train.seed"] if seed is None else seed
    return TrainConfig(
        epochs=cfg["train.epochs"] if epochs is None else epochs,
        batch_size=cfg["train.batch_size"],
        augmentation=policy_from(cfg, seed) if augmentation == "cfg" else augmentation,
        noise_sigma=cfg["train.noise_sigma"],
        lr=cfg["train.lr"],
        seed=seed,
        validation=cfg["train.validation"],
    )


def phantom_from(cfg, seed=None):
    return D.phantom_manifest(
        train_per_class=cfg["data.phantom.train_counts"],
        test_per_class=cfg["data.phantom.test_counts"],
        grid_shape=cfg["data.phantom.grid"],
        noise_sigma=cfg["data.phantom.noise_sigma"],
        seed=cfg["data.phantom.seed"] if seed is None else seed,
        scales=cfg["data.phantom.scales"],
    )


def manifest_from(cfg):
    if cfg["data.root"]:
        return D.scan_directory(cfg["data.root"])
    return phantom_from(cfg)


def out_dir(cfg):
    d = Path(cfg["out.dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_inspect(args, cfg):
    print(describe_header(read_header(args.path)))
    return EXIT_OK


def cmd_phantom(args, cfg):
    manifest = phantom_from(cfg)
    written = D.write_phantom_tree(manifest, out_dir(cfg), compress=cfg["data.phantom.compress"])
    log.info("wrote %d phantom volumes under %s", len(written), cfg["out.dir"])
    print(f"wrote {len(written)} volumes to {cfg['out.dir']}")
    return EXIT_OK


def cmd_preprocess(args, cfg):
    shape = tuple(cfg["model.input_shape"])[:3]
    v = resize_trilinear(read_volume(args.src), ResizeSpec(shape))
    write_volume(args.dst, normalize_intensity(v))
    print(f"{args.src} -> {args.dst} {shape}")
    return EXIT_OK


def cmd_augment(args, cfg):
    manifest = manifest_from(cfg)
    policy = AugmentationPolicy(cfg["augment.flip_axis"], cfg["augment.count"],
                                cfg["augment.noise_sigma"], cfg["train.seed"])
    augmented = D.apply_augmentation(manifest, policy)
    path = out_dir(cfg) / "manifest.jsonl"
    augmented.save(path)
    h, p = augmented.counts("train")
    print(f"train records: {h} health + {p} patient = {h + p}; test records: {len(augmented.split('test'))}")
    print(f"manifest written to {path}")
    return EXIT_OK


def _write_metrics(path, report):
    Path(path).write_text(report.to_json() + "\n")


def cmd_train(args, cfg):
    arch = arch_from(cfg)
    manifest = manifest_from(cfg)
    tcfg = train_config_from(cfg)
    out = out_dir(cfg)
    trainable, total = count_parameters(arch)
    log.info("architecture %s: %d trainable / %d total parameters", arch.block_filters, trainable, total)

    mode, k = tcfg.validation_mode()
    if mode == "kfold":
        results = cross_validate(manifest, tcfg, k, arch)
        rows = [dict(fold=f, **r.to_dict()) for f, r in results]
        (out / "cv_metrics.json").write_text(json.dumps(
            {"folds": rows, "summary": summarize([r for _, r in results])}, indent=2) + "\n")
        print(f"{k}-fold cross-validation written to {out / 'cv_metrics.json'}")

    n_train = len(manifest.split("train"))
    if tcfg.augmentation is not None:
        n_train = len(D.apply_augmentation(manifest, tcfg.augmentation).split("train"))
    log.info("train manifest: %d records (%s)", n_train,
              "augmented" if tcfg.augmentation is not None else "baseline")
    print(f"train manifest: {n_train} records")

    model = build_model(arch, seed=tcfg.seed)
    model, history = train(model, manifest, tcfg,
                           progress=lambda r: log.info("epoch %d loss %.4f acc %.4f", r.epoch,
                                                       r.train_loss, r.train_accuracy))
    save_checkpoint(model, out / "model.ckpt")
    export_curves(history, out / "curves.csv")
    if manifest.split("test"):
        report = evaluate(model, manifest, "test", cfg["eval.threshold"])
        _write_metrics(out / "metrics.json", report)
        print(report.to_json())
    return EXIT_OK


def cmd_eval(args, cfg):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg["out.dir"]) / "model.ckpt"
    model = load_checkpoint(ckpt)
    manifest = manifest_from(cfg)
    report = evaluate(model, manifest, args.split, cfg["eval.threshold"])
    _write_metrics(out_dir(cfg) / "metrics.json", report)
    print(report.to_json())
    return EXIT_OK


AB_FIELDS = ["seed", "baseline_accuracy", "augmented_accuracy", "delta_accuracy",
             "baseline_auc", "augmented_auc", "delta_auc"]


def run_ab(cfg, progress=None):
    """Baseline vs flip-augmented training on identical phantom data, one row per seed."""
    arch = arch_from(cfg)
    rows = []
    predictions = []
    for seed in cfg["data.phantom.seeds"]:
        manifest = phantom_from(cfg, seed)
        test = manifest.split("test")
        policy = AugmentationPolicy(cfg["augment.flip_axis"], cfg["augment.count"],
                                    cfg["augment.noise_sigma"], seed)
        arms = {}
        for arm, epochs, aug in (("baseline", cfg["ab.baseline_epochs"], None),
                                 ("augmented", cfg["ab.augmented_epochs"], policy)):
            tcfg = train_config_from(cfg, epochs=epochs, augmentation=aug, seed=seed)
            model = build_model(arch, seed=seed)
            train(model, manifest, tcfg)
            scores = predict_records(model, test)
            arms[arm] = (scores, evaluate_scores(scores, [r.label for r in test], cfg["eval.threshold"]))
        b, a = arms["baseline"][1], arms["augmented"][1]
        row = {"seed": seed, "baseline_accuracy": b.accuracy, "augmented_accuracy": a.accuracy,
               "delta_accuracy": a.accuracy - b.accuracy,
               "baseline_auc": b.auc, "augmented_auc": a.auc,
               "delta_auc": None if a.auc is None or b.auc is None else a.auc - b.auc}
        rows.append(row)
        for r, sb, sa in zip(test, arms["baseline"][0], arms["augmented"][0]):
            predictions.append((seed, r.record_id, r.label, float(sb), float(sa)))
        if progress is not None:
            progress(row)
    summary = {"seed": "mean"}
    for key in AB_FIELDS[1:]:
        vals = [r[key] for r in rows if r[key] is not None]
        summary[key] = float(np.mean(vals)) if vals else None
    return rows, summary, predictions


def _fmt(v):
    if v is None:
        return ""
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_ab(args, cfg):
    if len(cfg["data.phantom.seeds"]) < 2:
        log.error("the A/B experiment needs at least 2 seeds")
        return EXIT_USAGE
    rows, summary, predictions = run_ab(cfg, progress=lambda r: log.info("seed %s: %s", r["seed"], r))
    out = out_dir(cfg)
    with open(out / "ab.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AB_FIELDS)
        for r in rows + [summary]:
            w.writerow([_fmt(r[k]) for k in AB_FIELDS])
    with open(out / "ab_predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "record", "label", "baseline_score", "augmented_score"])
        for p in predictions:
            w.writerow([p[0], p[1], p[2], f"{p[3]:.6g}", f"{p[4]:.6g}"])
    print((out / "ab.csv").read_text(), end="")
    sign = "+" if summary["delta_accuracy"] >= 0 else "-"
    print(f"mean accuracy delta (augmented - baseline): {sign}{abs(summary['delta_accuracy']) * 100:.2f} pp")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    corrupt = {c for c in cfg["gradcheck.corrupt"].split(",") if c}
    reports = run_gradient_suite(seed=cfg["gradcheck.seed"], corrupt=corrupt)
    for r in reports:
        print(r.line())
    ok = all(r.passed for r in reports)
    print("ALL PASS" if ok else "FAILURES")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "inspect": cmd_inspect,
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "ab": cmd_ab,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="volt3d", description="Volumetric MRI classifier toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, positionals=()):
        p = sub.add_parser(name, help=help_text)
        for pos in positionals:
            p.add_argument(pos)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
        return p

    p = sub.add_parser("inspect", help="dump a NIfTI-1 header")
    p.add_argument("path")
    add("preprocess", "resize + normalize one volume", ("src", "dst"))
    add("phantom", "write a synthetic phantom dataset tree")
    add("augment", "write the augmented manifest")
    add("train", "train a model and write model.ckpt, curves.csv, metrics.json")
    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    add("ab", "baseline vs augmented experiment over seeds")
    add("gradcheck", "finite-difference check of every layer")
    return parser


def main(argv=None):
    parser = build_parser()
    # overrides may follow options such as --checkpoint, which plain parse_args rejects
    args, extra = parser.parse_known_args(argv)
    stray = [a for a in extra if a.startswith("-") or "=" not in a]
    if stray or (extra and not hasattr(args, "overrides")):
        parser.error(f"unrecognized arguments: {' '.join(stray or extra)}")
    if extra:
        args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "overrides", ()))
        return COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (Volt3dError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
