"""Shared end-to-end runner for the acceptance suite's training criteria.

Lives in its own module so ProcessPoolExecutor can pickle the job
function. All hyperparameters of the frozen acceptance setup are pinned
here; the dataset spec (synthetic, seed-pinned) and the desk-scale
training configuration are the ones reported with results.
"""

import numpy as np

from dscl.data import DatasetSpec, generate_dataset, kfold_split
from dscl.metrics import evaluate, similarity_stats
from dscl.nets import BackboneConfig, build_bundle
from dscl.trainer import (TrainConfig, classifier_logits, predict_classes, save_checkpoint,
                          stage2_train, train_ce_baseline, train_stage1)

# frozen acceptance setup: 300 images/class at 64px, folds from seed 7,
# evaluated on fold 0 (720 train / 180 test)
ACCEPT_SPEC = DatasetSpec(n_per_class=300, resolution=64, seed=7)
ACCEPT_BACKBONE = dict(channels=(8, 16, 32, 64), blocks_per_stage=1, input_size=32)
ACCEPT_TRAIN = dict(batch_images=16, epochs_stage1=24, epochs_stage2=10,
                    lr_sa=0.02, lr_fe=0.02)
ACCEPT_SEEDS = (0, 1, 2)
PROJECTOR_DIM = 16


def acceptance_dataset():
    ds = generate_dataset(ACCEPT_SPEC)
    train_idx, test_idx = kfold_split(ds, 5, ACCEPT_SPEC.seed)[0]
    return ds, train_idx, test_idx


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=1)
    except ImportError:
        pass


def run_pipeline(job):
    """One full two-stage run. job = (tag, seed, config overrides, ckpt path or None).

    Returns a plain dict (picklable) with the fold-0 test metrics.
    """
    tag, seed, overrides, ckpt_path = job
    _limit_threads()
    ds, train_idx, test_idx = acceptance_dataset()
    labels_test = np.array([ds[i].label for i in test_idx])
    bcfg = BackboneConfig(**ACCEPT_BACKBONE)
    cfg = TrainConfig(seed=seed, **{**ACCEPT_TRAIN, **overrides})
    models = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=seed,
                          with_sa=cfg.augmentation == "sa")
    stage1_log = train_stage1(ds, train_idx, models, cfg)
    if ckpt_path is not None:
        save_checkpoint(models, ckpt_path)
    stage2_log = stage2_train(ds, train_idx, models, cfg, test_idx=test_idx)
    preds = predict_classes(models, ds, test_idx, cfg)
    _, recalls, oa = evaluate(preds, labels_test, 3)
    logits = classifier_logits(models, ds, test_idx, cfg)
    intra, inter = similarity_stats(logits, labels_test)
    return {
        "tag": tag, "seed": seed, "oa": float(oa), "recalls": recalls.tolist(),
        "intra": intra, "inter": inter,
        "stage1_contrastive": [r["loss_dscl"] for r in stage1_log],
        "stage1_ce": [r["loss_ce"] for r in stage1_log],
        "probe_oa_by_epoch": [r["test_oa"] for r in stage2_log],
        "checkpoint": ckpt_path,
    }


def run_ce_baseline(job):
    """Plain supervised reference (extractor + classifier, CE on uniform views)."""
    tag, seed, epochs = job
    _limit_threads()
    ds, train_idx, test_idx = acceptance_dataset()
    labels_test = np.array([ds[i].label for i in test_idx])
    bcfg = BackboneConfig(**ACCEPT_BACKBONE)
    cfg = TrainConfig(seed=seed, **ACCEPT_TRAIN)
    models = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=seed, with_sa=False)
    train_ce_baseline(ds, train_idx, models, cfg, epochs=epochs)
    preds = predict_classes(models, ds, test_idx, cfg)
    _, recalls, oa = evaluate(preds, labels_test, 3)
    logits = classifier_logits(models, ds, test_idx, cfg)
    intra, inter = similarity_stats(logits, labels_test)
    return {"tag": tag, "seed": seed, "oa": float(oa), "recalls": recalls.tolist(),
            "intra": intra, "inter": inter}
