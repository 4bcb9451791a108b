"""Criterion-7 geometry: intra/inter cosine on logits vs extractor features
for the DSCL pipeline and the CE-only reference."""
import sys
sys.path.insert(0, "tests")
import numpy as np
from _ablation import ACCEPT_BACKBONE, ACCEPT_TRAIN, PROJECTOR_DIM, acceptance_dataset
from dscl.metrics import similarity_stats
from dscl.nets import BackboneConfig, build_bundle
from dscl.trainer import (TrainConfig, classifier_logits, extract_features, predict_classes,
                          stage2_train, train_ce_baseline, train_stage1, uniform_views_for)

ds, train_idx, test_idx = acceptance_dataset()
labels_test = np.array([ds[i].label for i in test_idx])
bcfg = BackboneConfig(**ACCEPT_BACKBONE)
cfg = TrainConfig(seed=0, **ACCEPT_TRAIN)


def describe(tag, models):
    logits = classifier_logits(models, ds, test_idx, cfg)
    feats = extract_features(models.extractor,
                             uniform_views_for(ds, test_idx, bcfg.input_size, cfg.np_dtype))
    preds = predict_classes(models, ds, test_idx, cfg)
    oa = (preds == labels_test).mean()
    li, le = similarity_stats(logits, labels_test)
    fi, fe_ = similarity_stats(feats, labels_test)
    mu = logits.mean(axis=0)
    dev = logits - mu
    print(f"{tag}: oa={oa:.3f}")
    print(f"  logits:   intra={li:.3f} inter={le:.3f}  |mu|={np.linalg.norm(mu):.2f} "
          f"|dev|={np.linalg.norm(dev, axis=1).mean():.2f} |logit|={np.linalg.norm(logits,axis=1).mean():.2f}")
    print(f"  features: intra={fi:.3f} inter={fe_:.3f}", flush=True)


models = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=0)
train_stage1(ds, train_idx, models, cfg)
stage2_train(ds, train_idx, models, cfg, test_idx=test_idx)
describe("sa_dscl", models)

m2 = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=0, with_sa=False)
train_ce_baseline(ds, train_idx, m2, cfg, epochs=ACCEPT_TRAIN["epochs_stage1"])
describe("ce_only(joint head)", m2)

# identical linear-probe protocol on the CE-trained representation
from dscl.nets import Dense
m2.classifier = Dense(np.random.default_rng(12345), bcfg.feature_dim, 3, cfg.np_dtype)
stage2_train(ds, train_idx, m2, cfg, test_idx=test_idx)
describe("ce_only(fresh probe)", m2)

# paper-protocol CE baseline (lr 0.01)
cfg3 = TrainConfig(seed=0, **{**ACCEPT_TRAIN, "lr_fe": 0.01})
m3 = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=0, with_sa=False)
train_ce_baseline(ds, train_idx, m3, cfg3, epochs=ACCEPT_TRAIN["epochs_stage1"])
m3.classifier = Dense(np.random.default_rng(12345), bcfg.feature_dim, 3, cfg3.np_dtype)
stage2_train(ds, train_idx, m3, cfg3, test_idx=test_idx)
describe("ce_only(lr01, fresh probe)", m3)
