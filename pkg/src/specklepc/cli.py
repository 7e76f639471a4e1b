"""Command-line entry point: generate, train, adapt, eval, render-debug.

Settings resolve as defaults < ``--config`` JSON file < explicit flags; the
merged result is written to ``<out>/config.json``. Logs go to stderr as
``key=value`` lines and each command prints a one-line ``key=value`` summary.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from specklepc import __version__
from specklepc.adapt import SelfTrainConfig, UnlabeledSet, self_train, write_round_report
from specklepc.classify import (LabeledSet, TrainConfig, TrainingError, evaluate, extract_features_batch,
                                load_model, load_proba_csv, save_model, train)
from specklepc.geometry import load_mesh
from specklepc.pointcloud import write_ply
from specklepc.stereo import false_color, write_pfm
from specklepc.synth import (GenerationConfig, GenerationError, generate_dataset, generate_instance_products,
                             load_clouds, read_manifest)

log = logging.getLogger("specklepc")

OUTPUT_ROOT_ENV = "SPECKLEPC_OUTPUT_ROOT"


class CliError(RuntimeError):
    pass


def _kv(**items) -> str:
    parts = []
    for k, v in items.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        elif isinstance(v, (list, dict)):
            v = json.dumps(v, separators=(",", ":"))
        parts.append(f"{k}={v}")
    return " ".join(parts)


def _summary(**items) -> None:
    print(_kv(**items), flush=True)


def _out_dir(args) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError("config file must hold a JSON object")
    return cfg


def _section(file_cfg: dict, name: str, cls) -> dict:
    """Keys of ``cls`` from ``file_cfg[name]`` (or the top level when no section exists)."""
    src = file_cfg.get(name, file_cfg)
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in src.items() if k in names}


def _merge(cls, base: dict, overrides: dict):
    merged = dict(base)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _echo_config(out: Path, args, **sections) -> None:
    doc = {"command": args.command, "version": __version__, "seed": getattr(args, "seed", None)}
    for name, obj in sections.items():
        doc[name] = obj if isinstance(obj, dict) else obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# argument groups


def _add_generation_flags(p):
    g = p.add_argument_group("generation")
    g.add_argument("--mode", choices=("speckle", "clean", "surface"))
    g.add_argument("--n-views", type=int, dest="n_views")
    g.add_argument("--fps-points", type=int, dest="fps_points")
    g.add_argument("--resolution", type=int, help="square render resolution in pixels")
    g.add_argument("--focal-length", type=float, dest="focal_length_px")
    g.add_argument("--baseline", type=float, dest="baseline_m")
    g.add_argument("--downsample", type=int, dest="depth_downsample")
    g.add_argument("--light-samples", type=int, dest="light_samples")
    g.add_argument("--max-disparity", type=int, dest="max_disparity")
    g.add_argument("--window-radius", type=int, dest="window_radius")


def _generation_config(args, file_cfg) -> GenerationConfig:
    over = {k: getattr(args, k) for k in ("mode", "n_views", "fps_points", "focal_length_px", "baseline_m",
                                          "depth_downsample", "light_samples", "max_disparity", "window_radius")}
    if args.resolution is not None:
        over["render_resolution"] = (args.resolution, args.resolution)
    try:
        return _merge(GenerationConfig, _section(file_cfg, "generation", GenerationConfig), over)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid generation config: {exc}") from exc


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, dest="learning_rate")
    g.add_argument("--weight-decay", type=float, dest="weight_decay")
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--no-cosine", action="store_const", const=False, dest="cosine")
    g.add_argument("--mixup", action="store_true", help="augment batches with mixup pairs")
    g.add_argument("--input-points", type=int, default=None,
                   help="FPS reduction applied to every cloud before featurization (default 1024)")


def _train_config(args, file_cfg) -> TrainConfig:
    over = {k: getattr(args, k) for k in ("epochs", "learning_rate", "weight_decay", "batch_size", "cosine")}
    over["seed"] = args.seed
    try:
        return _merge(TrainConfig, _section(file_cfg, "train", TrainConfig), over)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from exc


def _input_points(args, file_cfg) -> int:
    if args.input_points is not None:
        return args.input_points
    return int(file_cfg.get("input_points", 1024))


def _mixup(args, file_cfg) -> bool:
    return bool(args.mixup or file_cfg.get("mixup", False))


def _labeled(manifest_path, input_points, need_clouds=False) -> tuple[LabeledSet, list[str]]:
    try:
        manifest = read_manifest(manifest_path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read manifest {manifest_path}: {exc}") from exc
    clouds = load_clouds(manifest, input_points)
    feats = extract_features_batch(clouds)
    return LabeledSet(feats, manifest.labels, clouds if need_clouds else None), manifest.class_names


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _generation_config(args, file_cfg)
    if not Path(args.meshes).is_dir():
        raise CliError(f"mesh directory not found: {args.meshes}")
    out = _out_dir(args)
    _echo_config(out, args, generation=cfg)
    t0 = time.perf_counter()
    manifest = generate_dataset(args.meshes, out, cfg, args.seed, args.repetitions, args.workers)
    _summary(command="generate", instances=len(manifest.entries), classes=len(manifest.class_names),
             mode=cfg.mode, seconds=time.perf_counter() - t0, manifest=out / "manifest.json")
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    tcfg = _train_config(args, file_cfg)
    mixup = _mixup(args, file_cfg)
    n_in = _input_points(args, file_cfg)
    out = _out_dir(args)
    data, names = _labeled(args.data, n_in, need_clouds=mixup)
    _echo_config(out, args, train=tcfg, inputs={"input_points": n_in, "mixup": mixup})
    model = train(data, tcfg, len(names), mixup_enabled=mixup)
    model.training_meta["class_names"] = names
    model.training_meta["input_points"] = n_in
    save_model(model, out / "model.ckpt")
    with open(out / "train_log.jsonl", "w") as fh:
        for epoch, loss in enumerate(model.training_meta["loss_curve"]):
            fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
    result = {"train_accuracy": 100 * model.training_meta["train_accuracy"]}
    if args.val is not None:
        val, _ = _labeled(args.val, n_in)
        result["val_accuracy"] = 100 * evaluate(model, val)["accuracy"]
    _summary(command="train", n_train=len(data), epochs=tcfg.epochs, mixup=mixup, **result,
             checkpoint=out / "model.ckpt")
    return 0


def cmd_adapt(args) -> int:
    file_cfg = _load_config_file(args.config)
    tcfg = _train_config(args, file_cfg)
    mixup = _mixup(args, file_cfg)
    n_in = _input_points(args, file_cfg)
    over = {"theta_0": args.theta0, "epsilon": args.eps, "rounds": args.rounds,
            "epochs_per_round": args.epochs_per_round, "inner_learning_rate": args.inner_lr,
            "inner_batch_size": args.inner_batch_size, "method": args.method,
            "cbst_proportion": args.cbst_proportion, "seed": args.seed}
    try:
        scfg = _merge(SelfTrainConfig, _section(file_cfg, "adapt", SelfTrainConfig), over)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid adaptation config: {exc}") from exc
    out = _out_dir(args)
    source, names = _labeled(args.source, n_in, need_clouds=mixup)
    target, target_names = _labeled(args.target, n_in)
    if target_names != names:
        raise CliError("source and target manifests list different classes")
    warmup = load_model(args.warmup) if args.warmup else None
    _echo_config(out, args, train=tcfg, adapt=scfg, inputs={"input_points": n_in, "mixup": mixup})
    eval_labels = target.labels if args.report_target_accuracy else None
    result = self_train(source, UnlabeledSet(target.features), scfg, tcfg, len(names),
                        mixup_enabled=mixup, warmup=warmup, eval_labels=eval_labels)
    write_round_report(result.rounds, out / "rounds.jsonl")
    save_model(result.warmup, out / "warmup.ckpt")
    if result.aborted:
        last = result.rounds[-1]
        log.error(_kv(event="selection_empty", round=last.round, theta=last.theta))
        _summary(command="adapt", method=scfg.method, rounds=len(result.rounds), aborted=True)
        return 3
    save_model(result.model, out / "model.ckpt")
    summary = {"command": "adapt", "method": scfg.method, "rounds": len(result.rounds), "aborted": False}
    if eval_labels is not None:
        summary["warmup_accuracy"] = 100 * evaluate(result.warmup, target)["accuracy"]
        summary["target_accuracy"] = 100 * evaluate(result.model, target)["accuracy"]
    _summary(**summary, checkpoint=out / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    if (args.model is None) == (args.proba is None):
        raise CliError("give exactly one of --model or --proba")
    try:
        manifest = read_manifest(args.data)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read manifest {args.data}: {exc}") from exc
    labels = manifest.labels
    k = len(manifest.class_names)
    if args.model is not None:
        model = load_model(args.model)
        if model.n_classes != k:
            raise CliError(f"checkpoint has {model.n_classes} classes, manifest has {k}")
        n_in = args.input_points or model.training_meta.get("input_points", 1024)
        feats = extract_features_batch(load_clouds(manifest, n_in))
        if feats.shape[1] != model.dim:
            raise CliError(f"feature dimension {feats.shape[1]} does not match checkpoint ({model.dim})")
        pred = np.argmax(model.logits(feats), axis=1)
    else:
        proba = load_proba_csv(args.proba)
        if proba.shape != (len(labels), k):
            raise CliError(f"probability matrix shape {proba.shape} != ({len(labels)}, {k})")
        pred = np.argmax(proba, axis=1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    metrics = {
        "accuracy": 100 * float((pred == labels).mean()),
        "per_class_accuracy": {n: (100 * float(conf[c, c] / conf[c].sum()) if conf[c].sum() else None)
                               for c, n in enumerate(manifest.class_names)},
        "confusion": conf.tolist(),
        "class_names": manifest.class_names,
        "n": int(len(labels)),
    }
    if args.out is not None:
        out = _out_dir(args)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    _summary(command="eval", n=metrics["n"], accuracy=metrics["accuracy"],
             per_class_accuracy=metrics["per_class_accuracy"], confusion=metrics["confusion"])
    return 0


def _save_gray_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8), mode="L").save(path)


def cmd_render_debug(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _generation_config(args, file_cfg)
    try:
        mesh = load_mesh(args.mesh)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load mesh {args.mesh}: {exc}") from exc
    out = _out_dir(args)
    _echo_config(out, args, generation=cfg)
    products = generate_instance_products(mesh, None, cfg, args.seed, keep_images=True, name=str(args.mesh))
    written, failed = [], []

    def attempt(name, fn):
        try:
            fn(out / name)
            written.append(name)
        except Exception as exc:  # report every artifact independently
            log.error(_kv(event="artifact_failed", artifact=name, error=repr(exc)))
            failed.append(name)

    view = products.views[0] if products.views else None
    if view is not None and view.left is not None:
        attempt("left.png", lambda p: _save_gray_png(p, view.left))
        attempt("right.png", lambda p: _save_gray_png(p, view.right))
        attempt("disparity.png", lambda p: Image.fromarray(
            false_color(view.disparity.values, view.disparity.valid), mode="RGB").save(p))
    if view is not None:
        attempt("depth.pfm", lambda p: write_pfm(p, view.depth.values))
    attempt("fused.ply", lambda p: write_ply(p, products.cloud))
    _summary(command="render-debug", mode=cfg.mode, artifacts=written, failed=failed)
    return 1 if failed else 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specklepc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required=True):
        p.add_argument("--config", help="JSON settings file; flags take precedence")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)

    p = sub.add_parser("generate", help="render a synthetic point-cloud dataset from a mesh directory")
    common(p)
    p.add_argument("--meshes", required=True, help="directory with one subdirectory of meshes per class")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--repetitions", type=int, default=1)
    _add_generation_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the classifier on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="manifest.json or its directory")
    p.add_argument("--val", help="optional labelled manifest for validation accuracy")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="self-training from a labelled source to an unlabelled target")
    common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True, help="target manifest; its labels never reach training")
    p.add_argument("--warmup", help="existing checkpoint to use instead of training a warm-up model")
    p.add_argument("--method", choices=("qbst", "spst", "cbst"))
    p.add_argument("--theta0", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs-per-round", type=int, dest="epochs_per_round")
    p.add_argument("--inner-lr", type=float, dest="inner_lr")
    p.add_argument("--inner-batch-size", type=int, dest="inner_batch_size")
    p.add_argument("--cbst-proportion", type=float, dest="cbst_proportion")
    p.add_argument("--no-target-accuracy", action="store_false", dest="report_target_accuracy",
                   help="skip target accuracy diagnostics in the round report")
    _add_train_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="accuracy, per-class accuracy and confusion matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="checkpoint")
    p.add_argument("--proba", help="CSV of externally computed class probabilities (n rows x K)")
    p.add_argument("--input-points", type=int)
    p.add_argument("--out", help="directory for metrics.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-debug", help="write intermediate products for one mesh")
    common(p)
    p.add_argument("--mesh", required=True)
    _add_generation_flags(p)
    p.set_defaults(func=cmd_render_debug)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)
    try:
        return args.func(args)
    except (CliError, GenerationError, TrainingError, ValueError, OSError) as exc:
        log.error(_kv(event="failed", command=args.command, error=json.dumps(str(exc))))
        return 2


if __name__ == "__main__":
    sys.exit(main())
