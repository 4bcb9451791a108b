"""Illumination nuisance sweep: CE vs DSCL."""
import sys, time
sys.path.insert(0, "tests")
import numpy as np
from dscl.data import DatasetSpec, generate_dataset, kfold_split
from dscl.metrics import similarity_stats
from dscl.nets import BackboneConfig, build_bundle
from dscl.trainer import (TrainConfig, classifier_logits, predict_classes, stage2_train,
                          train_ce_baseline, train_stage1)
from _ablation import ACCEPT_BACKBONE, ACCEPT_TRAIN, PROJECTOR_DIM

for illum in (0.35, 0.5):
    spec = DatasetSpec(n_per_class=300, resolution=64, clutter=0.25, illumination=illum, seed=7)
    ds = generate_dataset(spec)
    train_idx, test_idx = kfold_split(ds, 5, 7)[0]
    labels_test = np.array([ds[i].label for i in test_idx])
    bcfg = BackboneConfig(**ACCEPT_BACKBONE)
    cfg = TrainConfig(seed=0, **ACCEPT_TRAIN)

    t0 = time.time()
    models = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=0)
    train_stage1(ds, train_idx, models, cfg)
    stage2_train(ds, train_idx, models, cfg, test_idx=test_idx)
    preds = predict_classes(models, ds, test_idx, cfg)
    oa_d = (preds == labels_test).mean()
    li_d, le_d = similarity_stats(classifier_logits(models, ds, test_idx, cfg), labels_test)

    m2 = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=0, with_sa=False)
    train_ce_baseline(ds, train_idx, m2, cfg, epochs=ACCEPT_TRAIN["epochs_stage1"])
    preds = predict_classes(m2, ds, test_idx, cfg)
    oa_c = (preds == labels_test).mean()
    li_c, le_c = similarity_stats(classifier_logits(m2, ds, test_idx, cfg), labels_test)
    print(f"illum={illum}: dscl oa={oa_d:.3f} intra={li_d:.3f} inter={le_d:.3f} | "
          f"ce oa={oa_c:.3f} intra={li_c:.3f} inter={le_c:.3f}  secs={time.time()-t0:.0f}", flush=True)
