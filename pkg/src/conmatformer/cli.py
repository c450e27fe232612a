"""Command-line entry point.

Commands: train | eval | cv | ttest | explain | gradcheck | params.
Configuration is a flat key=value file (# comments allowed); precedence is
defaults < --preset < --config file < command-line flags. The fully resolved
configuration is echoed to <out>/config.resolved and is sufficient to
reproduce the run. stdout carries a single summary line; everything else
goes to stderr. Exit codes: 1 config error, 2 data error, 3 numerical abort.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, metrics, xai
from .data import (AugmentSpec, DataError, DatasetSplit, TABLE1_TRAIN_TARGETS,
                   TABLE1_VAL_TARGETS, balance_classes, load_dataset,
                   resize_image, resize_split, stratified_split,
                   write_manifest, _decode)
from .model import (REFERENCE_COUNTS, ModelConfig, build_model,
                    checkpoint_bytes, count_params_macs, load_checkpoint,
                    save_checkpoint)
from .metrics import CvSummary, kfold_cv, paired_t_test
from .train import TrainConfig, TrainingDiverged, history_csv_lines, train
from .tensor import save_tensor, Tensor

log = logging.getLogger("conmatformer")


class ConfigError(Exception):
    pass


# Every configuration key with its documented default (all values strings;
# typed accessors parse on use).
CONFIG_DEFAULTS = {
    # model
    "input_size": "224",
    "stage_dims": "96,192,384,768",
    "stage_depths": "3,3,9,3",
    "use_cbam": "1,1,1",            # one flag per stage 1-3
    "use_danet": "1",
    "use_transformer": "1",
    "use_grn": "0",
    "num_classes": "4",
    "dropout": "0.1",
    "heads": "8",
    "cbam_reduction": "16",
    "pos_embed": "0",
    # training
    "epochs": "50",
    "batch_size": "64",
    "lr": "1e-05",
    "weight_decay": "3e-05",
    "beta1": "0.9",
    "beta2": "0.999",
    "adam_eps": "1e-08",
    "decoupled_wd": "0",
    "seed": "0",
    # data pipeline
    "data": "",
    "out": "",
    "tag": "run",
    "train_ratio": "0.6",
    "val_ratio": "0.2",
    "test_ratio": "0.2",
    "balance": "none",              # none | max | table1 | <integer target>
    "balance_val": "none",
    # augmentation (resize 0 means: follow input_size)
    "resize": "0",
    "hflip_probs": "0.2,0.5",
    "vflip_probs": "0.2,0.5",
    "rotation_degrees": "15,30,45,60",
    "affine_rotation": "10.0",
    "affine_translate": "0.1,0.1",
    "affine_scale": "0.9,1.1",
    # explanation
    "checkpoint": "",
    "image": "",
    "method": "gradcam",            # gradcam | gradcampp | lime
    "target_class": "-1",           # -1: use the predicted class
    "tap_layer": "stage4",
    "lime_segments": "7",
    "lime_samples": "200",
    "lime_kernel_width": "0.25",
    "lime_ridge_lambda": "0.001",
    # cross-validation / t-test
    "folds": "4",
    "metric": "accuracy",
}

PRESETS = {
    "paper": {},
    "desk": {
        "input_size": "64", "stage_dims": "24,48,96,192", "stage_depths": "1,1,1,1",
        "heads": "4", "cbam_reduction": "8", "batch_size": "16", "lr": "0.001",
        "lime_segments": "4", "lime_samples": "120",
    },
    "toy": {
        "input_size": "32", "stage_dims": "8,16,32,64", "stage_depths": "1,1,1,1",
        "heads": "4", "cbam_reduction": "4", "batch_size": "8", "lr": "0.001",
        "epochs": "2", "lime_segments": "4", "lime_samples": "80",
    },
}


def _cfg_int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from exc


def _cfg_float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"{key} must be a number, got {cfg[key]!r}") from exc


def _cfg_bool(cfg, key):
    value = cfg[key].strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {cfg[key]!r}")


def _cfg_seq(cfg, key, caster):
    try:
        return tuple(caster(v) for v in cfg[key].split(",") if v != "")
    except ValueError as exc:
        raise ConfigError(f"{key} must be a comma list, got {cfg[key]!r}") from exc


def parse_config_file(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(args):
    cfg = dict(CONFIG_DEFAULTS)

    def apply(overrides, origin):
        for key, value in overrides.items():
            if key not in CONFIG_DEFAULTS:
                raise ConfigError(f"unknown config key {key!r} (from {origin})")
            cfg[key] = str(value)

    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        apply(PRESETS[args.preset], f"preset {args.preset}")
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file {args.config} not found")
        apply(parse_config_file(args.config), args.config)
    for flag in ("data", "out", "seed", "checkpoint", "image", "method", "folds",
                 "metric", "epochs"):
        value = getattr(args, flag, None)
        if value is not None:
            apply({flag: value}, f"--{flag}")
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        apply({key.strip(): value.strip()}, "--set")
    return cfg


def model_config_from(cfg):
    try:
        return ModelConfig(
            input_size=_cfg_int(cfg, "input_size"),
            stage_dims=_cfg_seq(cfg, "stage_dims", int),
            stage_depths=_cfg_seq(cfg, "stage_depths", int),
            use_cbam=tuple(bool(int(v)) for v in _cfg_seq(cfg, "use_cbam", int)),
            use_danet=_cfg_bool(cfg, "use_danet"),
            use_transformer=_cfg_bool(cfg, "use_transformer"),
            use_grn=_cfg_bool(cfg, "use_grn"),
            num_classes=_cfg_int(cfg, "num_classes"),
            dropout=_cfg_float(cfg, "dropout"),
            heads=_cfg_int(cfg, "heads"),
            cbam_reduction=_cfg_int(cfg, "cbam_reduction"),
            pos_embed=_cfg_bool(cfg, "pos_embed"),
        ).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config_from(cfg):
    try:
        return TrainConfig(
            epochs=_cfg_int(cfg, "epochs"),
            batch_size=_cfg_int(cfg, "batch_size"),
            lr=_cfg_float(cfg, "lr"),
            weight_decay=_cfg_float(cfg, "weight_decay"),
            beta1=_cfg_float(cfg, "beta1"),
            beta2=_cfg_float(cfg, "beta2"),
            adam_eps=_cfg_float(cfg, "adam_eps"),
            decoupled_wd=_cfg_bool(cfg, "decoupled_wd"),
            seed=_cfg_int(cfg, "seed"),
        ).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def augment_spec_from(cfg):
    resize = _cfg_int(cfg, "resize") or _cfg_int(cfg, "input_size")
    return AugmentSpec(
        resize=resize,
        hflip_probs=_cfg_seq(cfg, "hflip_probs", float),
        vflip_probs=_cfg_seq(cfg, "vflip_probs", float),
        rotation_degrees=_cfg_seq(cfg, "rotation_degrees", int),
        affine_rotation=_cfg_float(cfg, "affine_rotation"),
        affine_translate=_cfg_seq(cfg, "affine_translate", float),
        affine_scale=_cfg_seq(cfg, "affine_scale", float),
    )


def make_out_dir(cfg):
    if cfg["out"]:
        out = Path(cfg["out"])
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        out = Path("runs") / f"{stamp}-{cfg['tag']}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(
        "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg)))
    return out


def _resolve_targets(spec, split_samples, table):
    if spec == "none":
        return None
    if spec == "max":
        counts = {}
        for s in split_samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return {label: max(counts.values()) for label in counts}
    if spec == "table1":
        return dict(table)
    try:
        return int(spec)
    except ValueError as exc:
        raise ConfigError(f"balance must be none|max|table1|<int>, got {spec!r}") from exc


def prepare_splits(cfg):
    root = cfg["data"]
    if not root:
        raise ConfigError("no data root given (--data or data= in the config)")
    if not Path(root).is_dir():
        raise DataError(f"data root {root} does not exist")
    ratios = (_cfg_float(cfg, "train_ratio"), _cfg_float(cfg, "val_ratio"),
              _cfg_float(cfg, "test_ratio"))
    seed = _cfg_int(cfg, "seed")
    samples = load_dataset(root)
    splits = stratified_split(samples, ratios=ratios, seed=seed)
    spec = augment_spec_from(cfg)
    train_targets = _resolve_targets(cfg["balance"], splits.train, TABLE1_TRAIN_TARGETS)
    if train_targets is not None:
        splits.train = balance_classes(splits.train, train_targets,
                                       np.random.default_rng([seed, 1]), spec)
    val_targets = _resolve_targets(cfg["balance_val"], splits.val, TABLE1_VAL_TARGETS)
    if val_targets is not None:
        splits.val = balance_classes(splits.val, val_targets,
                                     np.random.default_rng([seed, 2]), spec)
    resize_split(splits, _cfg_int(cfg, "input_size"))
    return splits


def _write_report(report, out):
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "confusion.csv").write_text("\n".join(report.confusion_csv_lines()) + "\n")
    (out / "roc.csv").write_text("\n".join(report.roc_csv_lines()) + "\n")


# -- commands -------------------------------------------------------------------


def cmd_train(cfg):
    out = make_out_dir(cfg)
    splits = prepare_splits(cfg)
    write_manifest(splits.all_samples(), out / "manifest.csv")
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg)
    model = build_model(model_cfg, rng=np.random.default_rng([train_cfg.seed, 0]))
    model, history = train(model, splits, train_cfg)
    (out / "history.csv").write_text("\n".join(history_csv_lines(history)) + "\n")
    if getattr(model, "best_checkpoint", None):
        (out / "checkpoint.bin").write_bytes(model.best_checkpoint)
        model, _ = load_checkpoint(out / "checkpoint.bin")
    else:
        save_checkpoint(model, out / "checkpoint.bin")
    report = metrics.evaluate(model, splits.test, batch_size=train_cfg.batch_size)
    _write_report(report, out)
    print(f"train: {len(splits.train)} samples, {len(history)} epochs, "
          f"test accuracy {report.accuracy:.4f}, artifacts in {out}")
    return 0


def cmd_eval(cfg):
    if not cfg["checkpoint"]:
        raise ConfigError("eval requires --checkpoint")
    if not Path(cfg["checkpoint"]).is_file():
        raise DataError(f"checkpoint {cfg['checkpoint']} not found")
    model, model_cfg = load_checkpoint(cfg["checkpoint"])
    cfg["input_size"] = str(model_cfg.input_size)
    out = make_out_dir(cfg)
    splits = prepare_splits(cfg)
    report = metrics.evaluate(model, splits.test)
    _write_report(report, out)
    print(f"eval: {len(splits.test)} test samples, accuracy {report.accuracy:.4f}, "
          f"macro F1 {report.macro_f1:.4f}, reports in {out}")
    return 0


def cmd_cv(cfg):
    out = make_out_dir(cfg)
    root = cfg["data"]
    if not root:
        raise ConfigError("no data root given (--data or data= in the config)")
    if not Path(root).is_dir():
        raise DataError(f"data root {root} does not exist")
    k = _cfg_int(cfg, "folds")
    seed = _cfg_int(cfg, "seed")
    model_cfg = model_config_from(cfg)
    train_cfg = train_config_from(cfg)
    samples = load_dataset(root)
    for s in samples:
        s.image = resize_image(s.image, model_cfg.input_size)
        s.split = "train"

    def train_fold(rest, held, fold):
        model = build_model(model_cfg, rng=np.random.default_rng([seed, 10 + fold]))
        fold_cfg = dataclasses.replace(train_cfg, seed=seed * 1000 + fold)
        model, _ = train(model, DatasetSplit(train=rest, val=[], test=held), fold_cfg)
        blob = model.best_checkpoint if getattr(model, "best_checkpoint", None) \
            else checkpoint_bytes(model)
        report = metrics.evaluate(model, held)
        return {
            "accuracy": report.accuracy,
            "macro_precision": report.macro_precision,
            "macro_recall": report.macro_recall,
            "macro_f1": report.macro_f1,
            "checksum": hashlib.sha256(blob).hexdigest()[:16],
        }

    summary = kfold_cv(samples, k, train_fold, seed=seed)
    (out / "cv_summary.csv").write_text("\n".join(summary.to_csv_lines()) + "\n")
    print(f"cv: {k} folds, accuracy {summary.mean('accuracy'):.4f} "
          f"+/- {summary.std('accuracy'):.4f}, summary in {out}")
    return 0


def cmd_ttest(cfg, run_a, run_b):
    out = make_out_dir(cfg)
    for path in (run_a, run_b):
        if not Path(path).is_file():
            raise DataError(f"fold file {path} not found")
    a = CvSummary.from_csv_lines(Path(run_a).read_text().strip().splitlines())
    b = CvSummary.from_csv_lines(Path(run_b).read_text().strip().splitlines())
    metric = cfg["metric"]
    for summary, path in ((a, run_a), (b, run_b)):
        if metric not in summary.metric_names:
            raise DataError(f"{path} has no metric {metric!r}")
    if len(a.folds) != len(b.folds):
        raise DataError(f"fold count mismatch: {len(a.folds)} vs {len(b.folds)}")
    va = [f[metric] for f in a.folds]
    vb = [f[metric] for f in b.folds]
    t, p, df = paired_t_test(va, vb)
    significant = "yes" if p < 0.05 else "no"
    (out / "ttest.csv").write_text(
        "metric,t,p,df,significant\n"
        f"{metric},{t!r},{p!r},{df},{significant}\n")
    print(f"ttest: {metric} t={t:.4f} p={p:.5f} df={df} significant={significant}")
    return 0


def cmd_explain(cfg):
    if not cfg["checkpoint"]:
        raise ConfigError("explain requires --checkpoint")
    if not cfg["image"]:
        raise ConfigError("explain requires --image")
    method = cfg["method"]
    if method not in ("gradcam", "gradcampp", "lime"):
        raise ConfigError(f"unknown method {method!r}; choose gradcam, gradcampp or lime")
    if not Path(cfg["image"]).is_file():
        raise DataError(f"image {cfg['image']} not found")
    out = make_out_dir(cfg)
    exp_dir = out / "explanations"
    exp_dir.mkdir(exist_ok=True)
    model, model_cfg = load_checkpoint(cfg["checkpoint"])
    image = resize_image(_decode(cfg["image"]), model_cfg.input_size)
    requested = _cfg_int(cfg, "target_class")
    target = None if requested < 0 else requested
    stem = Path(cfg["image"]).stem
    seed = _cfg_int(cfg, "seed")

    if method == "lime":
        segments = xai.segment_grid(image, _cfg_int(cfg, "lime_segments"))
        if target is None:
            probs = xai.model_black_box(model)(image[None])
            target = int(np.argmax(probs[0]))
        explanation = xai.lime_explain(
            xai.model_black_box(model), image, target, segments,
            n_samples=_cfg_int(cfg, "lime_samples"),
            kernel_width=_cfg_float(cfg, "lime_kernel_width"),
            ridge_lambda=_cfg_float(cfg, "lime_ridge_lambda"),
            rng=np.random.default_rng(seed),
            workers=int(os.environ.get("CMF_THREADS", "1")))
        png = exp_dir / f"{stem}_lime.png"
        xai.render_lime_overlay(image, explanation, png)
        (exp_dir / f"{stem}_lime.json").write_text(explanation.to_json() + "\n")
        print(f"explain: lime class {target} r2={explanation.fit_r2:.4f}, files in {exp_dir}")
        return 0

    fn = xai.grad_cam if method == "gradcam" else xai.grad_cam_pp
    saliency = fn(model, image, target_class=target, tap_layer=cfg["tap_layer"])
    png = exp_dir / f"{stem}_{method}.png"
    xai.render_overlay(image, saliency, png)
    save_tensor(Tensor(saliency.map.astype(np.float32)),
                exp_dir / f"{stem}_{method}_saliency.bin")
    payload = {"method": method, "target_class": saliency.target_class,
               "tap_layer": cfg["tap_layer"],
               "map_max": float(saliency.map.max()), "map_min": float(saliency.map.min())}
    (exp_dir / f"{stem}_{method}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"explain: {method} class {saliency.target_class}, files in {exp_dir}")
    return 0


def cmd_gradcheck(cfg):
    results = checks.run_gradient_suite(include_models=True,
                                        seed=_cfg_int(cfg, "seed"))
    for line in checks.format_results(results):
        print(line, file=sys.stderr)
    failed = [r for r in results if not r.passed]
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} checks passed")
    return 3 if failed else 0


def cmd_params(cfg):
    out = make_out_dir(cfg)
    model_cfg = model_config_from(cfg)
    model = build_model(model_cfg, rng=np.random.default_rng(0))
    report = count_params_macs(model)
    lines = ["module,name,params,macs,reference_params"]
    for row in report.rows:
        top = row.module.split(".")[0]
        ref = REFERENCE_COUNTS.get(row.module, REFERENCE_COUNTS.get(top, ""))
        lines.append(f"{top},{row.module},{row.params},{row.macs},{ref}")
    lines.append(f"total,total,{report.total_params},{report.total_macs},"
                 f"{REFERENCE_COUNTS['total']}")
    (out / "params.csv").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line, file=sys.stderr)
    print(f"params: total {report.total_params} "
          f"(reference {REFERENCE_COUNTS['total']}), "
          f"macs {report.total_macs} (reference {REFERENCE_COUNTS['total_macs']}), "
          f"census in {out / 'params.csv'}")
    return 0


# -- argument plumbing ---------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="conmatformer",
        description="train, evaluate, cross-validate, test and explain the "
                    "hybrid attention classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--data", help="dataset root (one subdirectory per class)")
        p.add_argument("--out", help="output directory (default runs/<timestamp>-<tag>)")
        p.add_argument("--seed", help="global RNG seed")
        p.add_argument("--preset", help="configuration preset: paper, desk or toy")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")

    common(sub.add_parser("train", help="train and evaluate on the test split"))
    common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    common(p)
    p.add_argument("--folds", help="number of folds (default 4)")
    p.add_argument("--epochs", help="override training epochs per fold")
    p = sub.add_parser("ttest", help="paired t-test between two cv summaries")
    common(p)
    p.add_argument("run_a", help="cv_summary.csv of the first model")
    p.add_argument("run_b", help="cv_summary.csv of the second model")
    p.add_argument("--metric", help="fold metric to compare (default accuracy)")
    p = sub.add_parser("explain", help="write an explanation overlay for one image")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint to explain")
    p.add_argument("--image", help="input image path")
    p.add_argument("--method", help="gradcam, gradcampp or lime")
    common(sub.add_parser("gradcheck", help="run the finite-difference suite"))
    common(sub.add_parser("params", help="parameter and MAC census"))
    for name, cmd in sub.choices.items():
        if name in ("train", "eval"):
            cmd.add_argument("--checkpoint", help="checkpoint path (eval)")
            cmd.add_argument("--epochs", help="override training epochs")
    return parser


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "cv":
            return cmd_cv(cfg)
        if args.command == "ttest":
            return cmd_ttest(cfg, args.run_a, args.run_b)
        if args.command == "explain":
            return cmd_explain(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "params":
            return cmd_params(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    except DataError as exc:
        log.error("data error: %s", exc)
        return 2
    except (TrainingDiverged, FloatingPointError) as exc:
        log.error("numerical abort: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
