import json, sys, time
import numpy as np
from dscl.data import DatasetSpec, generate_dataset, kfold_split
from dscl.metrics import evaluate, similarity_stats
from dscl.nets import BackboneConfig, build_bundle
from dscl.trainer import (TrainConfig, train_stage1, stage2_train, predict_classes,
                          classifier_logits, train_ce_baseline)

E1 = int(sys.argv[1]) if len(sys.argv) > 1 else 15
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
spec = DatasetSpec(n_per_class=300, resolution=64, seed=7)
ds = generate_dataset(spec)
train_idx, test_idx = kfold_split(ds, 5, 7)[0]
labels_test = np.array([ds[i].label for i in test_idx])
bcfg = BackboneConfig(channels=(8,16,32,64), blocks_per_stage=1, input_size=32)
out = {}

def run(tag, **kw):
    t0 = time.time()
    cfg = TrainConfig(seed=seed, batch_images=8, epochs_stage1=E1, epochs_stage2=10, **kw)
    models = build_bundle(bcfg, projector_dim=16, seed=seed, with_sa=cfg.augmentation=="sa")
    r1 = train_stage1(ds, train_idx, models, cfg)
    r2 = stage2_train(ds, train_idx, models, cfg, test_idx=test_idx)
    preds = predict_classes(models, ds, test_idx, cfg)
    _, recalls, oa = evaluate(preds, labels_test, 3)
    logits = classifier_logits(models, ds, test_idx, cfg)
    intra, inter = similarity_stats(logits, labels_test)
    out[tag] = dict(oa=oa, recalls=recalls.tolist(), intra=intra, inter=inter,
                    con0=r1[0]["loss_dscl"], conN=r1[-1]["loss_dscl"],
                    ce0=r1[0]["loss_ce"], ceN=r1[-1]["loss_ce"],
                    probe=[round(r["test_oa"],3) for r in r2], secs=round(time.time()-t0,1))
    print(tag, json.dumps(out[tag]), flush=True)

run("sa_dscl", augmentation="sa", loss="dscl")
run("sa_scl", augmentation="sa", loss="scl")
run("simclr5_dscl", augmentation="simclr5", loss="dscl")

cfg = TrainConfig(seed=seed, batch_images=8, epochs_stage1=E1, epochs_stage2=10)
m = build_bundle(bcfg, projector_dim=16, seed=seed, with_sa=False)
rce = train_ce_baseline(ds, train_idx, m, cfg, epochs=E1)
preds = predict_classes(m, ds, test_idx, cfg)
_, recalls, oa = evaluate(preds, labels_test, 3)
logits = classifier_logits(m, ds, test_idx, cfg)
intra, inter = similarity_stats(logits, labels_test)
print("ce_only", json.dumps(dict(oa=oa, recalls=recalls.tolist(), intra=intra, inter=inter,
                                 ceN=rce[-1]["loss_ce"])), flush=True)
