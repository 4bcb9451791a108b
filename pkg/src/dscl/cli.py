"""Operator entry point: reproducible generate / train / eval / bench runs.

One JSON document configures everything; ``--set key.path=value`` applies
point overrides.  Unknown keys are rejected (anti-typo), and every run
directory receives the fully resolved configuration plus a content hash
of the package version, making runs self-describing.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 contract violation.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DatasetSpec, export_dataset, generate_sample, kfold_split,
                   load_image_folder, N_CLASSES)
from .errors import (ConfigError, ContractViolationError, CorruptCheckpointError,
                     DatasetError, DsclError, NumericError, ParameterError)
from .metrics import build_report, export_embeddings, time_inference
from .nets import BackboneConfig
from .trainer import (TrainConfig, classifier_logits, extract_features, load_checkpoint,
                      predict_classes, save_checkpoint, stage2_train, train_stage1,
                      train_two_stage, uniform_views_for)
from .nets import build_bundle

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "source": "synthetic",        # "synthetic" | "folder"
        "folder": None,               # image-folder root when source == "folder"
        "n_per_class": 300,
        "resolution": 64,
        "lesion_min": 4.0,
        "lesion_max": 8.0,
        "clutter": 0.16,
        "blob_amplitude": 0.22,
        "dataset_seed": 7,
        "kfold": 5,
        "fold": 0,
    },
    "model": {
        "channels": [8, 16, 32, 64],
        "blocks_per_stage": 2,
        "input_size": 32,
        "projector_dim": 16,
        "n_classes": 3,
    },
    "train": {
        "batch_images": 8,
        "epochs_stage1": 30,
        "epochs_stage2": 10,
        "lr_sa": 0.02,
        "lr_fe": 0.01,
        "weight_decay": 5e-4,
        "momentum": 0.9,
        "tau": 0.07,
        "tau_o": 0.1,
        "augmentation": "sa",
        "loss": "dscl",
        "joint_gradients": False,
        "all_views_anchor": False,
        "decouple_all_positives": False,
        "saliency_floor": 1e-3,
        "kernel_sigma": None,
        "kernel_radius": None,
        "crop_scale_min": 0.4,
        "crop_scale_max": 1.0,
        "dtype": "float32",
    },
    "bench": {
        "warmup": 3,
        "reps": 11,
    },
}

_EXIT_CODES = (
    (ConfigError, 2),
    (ParameterError, 2),
    (CorruptCheckpointError, 3),
    (DatasetError, 3),
    (NumericError, 4),
    (ContractViolationError, 5),
)


def _merge_checked(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            out[key] = _merge_checked(base[key], value, where)
        else:
            out[key] = value
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set needs key.path=value, got {assignment!r}")
    key, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = _merge_checked(cfg, user)
    for assignment in overrides:
        _apply_set(cfg, assignment)
    return cfg


def dataset_spec_from(cfg: dict) -> DatasetSpec:
    d = cfg["data"]
    return DatasetSpec(n_per_class=d["n_per_class"], resolution=d["resolution"],
                       lesion_min=d["lesion_min"], lesion_max=d["lesion_max"],
                       clutter=d["clutter"], blob_amplitude=d["blob_amplitude"],
                       seed=d["dataset_seed"])


def backbone_cfg_from(cfg: dict) -> BackboneConfig:
    m = cfg["model"]
    return BackboneConfig(channels=tuple(m["channels"]), blocks_per_stage=m["blocks_per_stage"],
                          input_size=m["input_size"])


def train_cfg_from(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def _n_generation_workers() -> int:
    raw = os.environ.get("DSCL_NUM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"DSCL_NUM_THREADS must be an integer, got {raw!r}") from e
    return max(1, n)


def generate_dataset_parallel(spec: DatasetSpec) -> list:
    """Per-sample generation is pure, so worker count cannot change results."""
    jobs = [(label, i) for label in range(N_CLASSES) for i in range(spec.n_per_class)]
    workers = _n_generation_workers()
    if workers == 1:
        return [generate_sample(spec, label, i) for label, i in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: generate_sample(spec, *job), jobs))


def load_dataset(cfg: dict) -> list:
    d = cfg["data"]
    if d["source"] == "synthetic":
        return generate_dataset_parallel(dataset_spec_from(cfg))
    if d["source"] == "folder":
        if not d["folder"]:
            raise ConfigError("data.source is 'folder' but data.folder is not set")
        return load_image_folder(d["folder"], resolution=d["resolution"])
    raise ConfigError(f"unknown data.source {d['source']!r}")


def _version_hash() -> str:
    return hashlib.sha256(f"dscl-{__version__}".encode()).hexdigest()[:16]


def write_resolved_config(cfg: dict, run_dir: Path) -> None:
    resolved = copy.deepcopy(cfg)
    resolved["_version"] = __version__
    resolved["_version_hash"] = _version_hash()
    with open(run_dir / "resolved_config.json", "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")


def _fold_indices(dataset, cfg: dict):
    d = cfg["data"]
    folds = kfold_split(dataset, k=d["kfold"], seed=d["dataset_seed"])
    if not 0 <= d["fold"] < d["kfold"]:
        raise ConfigError(f"data.fold must be in [0, {d['kfold']}), got {d['fold']}")
    return folds[d["fold"]]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: dict, out_dir, force: bool) -> int:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    spec = dataset_spec_from(cfg)
    dataset = generate_dataset_parallel(spec)
    export_dataset(dataset, out)
    manifest = {
        "spec": {"n_per_class": spec.n_per_class, "resolution": spec.resolution,
                 "lesion_min": spec.lesion_min, "lesion_max": spec.lesion_max,
                 "clutter": spec.clutter, "blob_amplitude": spec.blob_amplitude,
                 "seed": spec.seed},
        "n_images": len(dataset),
        "classes": N_CLASSES,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(dataset)} images to {out}")
    return 0


def _train_metrics(models, dataset, test_idx, tcfg, n_classes) -> "object":
    preds = predict_classes(models, dataset, test_idx, tcfg)
    labels = np.array([dataset[i].label for i in test_idx])
    logits = classifier_logits(models, dataset, test_idx, tcfg)
    return build_report(preds, labels, n_classes, vectors=logits)


def cmd_train(cfg: dict, run_dir, stage: str) -> int:
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, run)
    dataset = load_dataset(cfg)
    train_idx, test_idx = _fold_indices(dataset, cfg)
    bcfg = backbone_cfg_from(cfg)
    tcfg = train_cfg_from(cfg)
    m = cfg["model"]

    if stage == "all":
        models, _, _ = train_two_stage(dataset, train_idx, test_idx, bcfg, tcfg,
                                       run_dir=str(run), projector_dim=m["projector_dim"],
                                       n_classes=m["n_classes"])
    elif stage == "1":
        models = build_bundle(bcfg, projector_dim=m["projector_dim"], n_classes=m["n_classes"],
                              seed=tcfg.seed, dtype=tcfg.np_dtype,
                              with_sa=tcfg.augmentation == "sa")
        train_stage1(dataset, train_idx, models, tcfg, run_dir=str(run))
        return 0
    else:  # stage 2 from an existing stage-1 checkpoint
        ckpt = run / "ckpt_stage1_last.dscl"
        if not ckpt.exists():
            raise CorruptCheckpointError(
                f"missing stage-1 checkpoint {ckpt}; run --stage 1 (or all) first")
        models = load_checkpoint(ckpt, dtype=tcfg.np_dtype)
        stage2_train(dataset, train_idx, models, tcfg, run_dir=str(run), test_idx=test_idx)

    report = _train_metrics(models, dataset, test_idx, tcfg, m["n_classes"])
    report.to_json(run / "metrics.json")
    print(f"fold {cfg['data']['fold']}: OA {report.oa:.4f} kappa {report.kappa:.4f}")
    return 0


def _eval_one(models, dataset, test_idx, tcfg, cfg, out_dir: Path):
    m = cfg["model"]
    report = _train_metrics(models, dataset, test_idx, tcfg, m["n_classes"])
    report.to_json(out_dir / "metrics.json")
    feats = extract_features(models.extractor,
                             uniform_views_for(dataset, test_idx, models.backbone_cfg.input_size,
                                               tcfg.np_dtype))
    labels = [dataset[i].label for i in test_idx]
    ids = [dataset[i].sample_id for i in test_idx]
    export_embeddings(feats, labels, out_dir / "embeddings.csv", ids=ids)
    return report


def cmd_eval(cfg: dict, checkpoint, out_dir, kfold_driver: bool) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    dataset = load_dataset(cfg)
    tcfg = train_cfg_from(cfg)
    m = cfg["model"]

    if not kfold_driver:
        if checkpoint is None:
            raise ConfigError("eval needs --checkpoint (or --kfold)")
        models = load_checkpoint(checkpoint, dtype=tcfg.np_dtype)
        _check_model_matches(models, cfg)
        _, test_idx = _fold_indices(dataset, cfg)
        report = _eval_one(models, dataset, test_idx, tcfg, cfg, out)
        print(f"OA {report.oa:.4f} kappa {report.kappa:.4f}")
        return 0

    # k-fold driver: train and evaluate every fold, then aggregate mean +/- std
    k = cfg["data"]["kfold"]
    folds = kfold_split(dataset, k=k, seed=cfg["data"]["dataset_seed"])
    bcfg = backbone_cfg_from(cfg)
    per_fold = []
    for fold, (train_idx, test_idx) in enumerate(folds):
        fold_dir = out / f"fold_{fold}"
        fold_dir.mkdir(exist_ok=True)
        models, _, _ = train_two_stage(dataset, train_idx, test_idx, bcfg, tcfg,
                                       run_dir=str(fold_dir), projector_dim=m["projector_dim"],
                                       n_classes=m["n_classes"])
        report = _eval_one(models, dataset, test_idx, tcfg, cfg, fold_dir)
        per_fold.append(report)
        print(f"fold {fold}: OA {report.oa:.4f}")
    agg = {}
    for name, values in (("oa", [r.oa for r in per_fold]),
                         ("cohens_kappa", [r.kappa for r in per_fold]),
                         ("n_rec", [float(r.recalls[0]) for r in per_fold]),
                         ("v_rec", [float(r.recalls[1]) for r in per_fold]),
                         ("i_rec", [float(r.recalls[2]) for r in per_fold])):
        agg[name] = {"mean": float(np.mean(values)), "std": float(np.std(values)),
                     "per_fold": values}
    with open(out / "aggregate.json", "w") as f:
        json.dump(agg, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"aggregate OA {agg['oa']['mean']:.4f} +/- {agg['oa']['std']:.4f}")
    return 0


def _check_model_matches(models, cfg: dict) -> None:
    m = cfg["model"]
    got = models.backbone_cfg
    want = backbone_cfg_from(cfg)
    if (got.channels, got.blocks_per_stage, got.input_size) != (
            want.channels, want.blocks_per_stage, want.input_size):
        raise ConfigError(
            f"checkpoint backbone {got.channels}/{got.blocks_per_stage}/{got.input_size} "
            f"does not match config {want.channels}/{want.blocks_per_stage}/{want.input_size}")
    if models.projector_dim != m["projector_dim"] or models.n_classes != m["n_classes"]:
        raise ConfigError("checkpoint projector/classifier dims do not match config")


def cmd_bench(cfg: dict, checkpoint, out_path) -> int:
    tcfg = train_cfg_from(cfg)
    models = load_checkpoint(checkpoint, dtype=tcfg.np_dtype)
    _check_model_matches(models, cfg)
    dataset = load_dataset(cfg)
    _, test_idx = _fold_indices(dataset, cfg)
    images = uniform_views_for(dataset, test_idx, models.backbone_cfg.input_size, tcfg.np_dtype)
    result = time_inference(models, images, warmup=cfg["bench"]["warmup"],
                            reps=cfg["bench"]["reps"])
    result["machine"] = f"{platform.platform()} / {platform.processor() or 'unknown-cpu'}"
    result["version_hash"] = _version_hash()
    text = json.dumps(result, indent=2, sort_keys=True)
    if out_path is not None:
        with open(out_path, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_export_embeddings(cfg: dict, checkpoint, out_path, use_logits: bool) -> int:
    tcfg = train_cfg_from(cfg)
    models = load_checkpoint(checkpoint, dtype=tcfg.np_dtype)
    _check_model_matches(models, cfg)
    dataset = load_dataset(cfg)
    _, test_idx = _fold_indices(dataset, cfg)
    labels = [dataset[i].label for i in test_idx]
    ids = [dataset[i].sample_id for i in test_idx]
    if use_logits:
        vectors = classifier_logits(models, dataset, test_idx, tcfg)
    else:
        vectors = extract_features(
            models.extractor,
            uniform_views_for(dataset, test_idx, models.backbone_cfg.input_size, tcfg.np_dtype))
    export_embeddings(vectors, labels, out_path, ids=ids)
    print(f"wrote {len(labels)} rows to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dscl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. --set train.loss=scl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic dataset as an image folder")
    p.add_argument("out_dir")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    p.add_argument("run_dir")
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")

    p = sub.add_parser("eval", help="evaluate a checkpoint (or drive all k folds)")
    p.add_argument("out_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--kfold", action="store_true",
                   help="train+evaluate every fold and aggregate mean/std")

    p = sub.add_parser("bench", help="time the stage-2 inference path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")

    p = sub.add_parser("export-embeddings", help="dump test-fold embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--logits", action="store_true",
                   help="export classifier logits instead of extractor features")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "generate":
            return cmd_generate(cfg, args.out_dir, args.force)
        if args.command == "train":
            return cmd_train(cfg, args.run_dir, args.stage)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.out_dir, args.kfold)
        if args.command == "bench":
            return cmd_bench(cfg, args.checkpoint, args.out)
        if args.command == "export-embeddings":
            return cmd_export_embeddings(cfg, args.checkpoint, args.out, args.logits)
        raise ConfigError(f"unknown command {args.command!r}")
    except DsclError as e:
        for exc_type, code in _EXIT_CODES:
            if isinstance(e, exc_type):
                print(f"error: {e}", file=sys.stderr)
                return code
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
