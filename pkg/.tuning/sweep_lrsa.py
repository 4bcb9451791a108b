"""Sweep lr_sa for stable augmentor CE training; report saliency-on-lesion mass."""
import sys
import numpy as np
import dscl.ndtensor as nd
from dscl.data import DatasetSpec, generate_dataset, kfold_split
from dscl.nets import BackboneConfig, build_bundle
from dscl.saliency import saliency_maps_batched
from dscl.trainer import TrainConfig, train_stage1, uniform_views_for

spec = DatasetSpec(n_per_class=300, resolution=64, seed=7)
ds = generate_dataset(spec)
train_idx, test_idx = kfold_split(ds, 5, 7)[0]
bcfg = BackboneConfig(channels=(8,16,32,64), blocks_per_stage=1, input_size=32)

def saliency_mass_in_box(models, cfg):
    """Mean saliency mass inside the lesion box (stage-0 map) over lesion test images."""
    lesion = [i for i in test_idx if ds[i].lesion_box is not None][:60]
    views = uniform_views_for(ds, lesion, 32, np.float32)
    with nd.no_grad():
        maps, _ = models.sa.forward(nd.constant(views))
        sal = saliency_maps_batched(maps[0], models.sa.sal_projs[0], cfg.tau_o).numpy()
    h = sal.shape[1]  # 16
    masses = []
    for j, i in enumerate(lesion):
        y0, y1, x0, x1 = ds[i].lesion_box
        sy0, sy1 = int(y0 / 64 * h), min(h - 1, int(np.ceil(y1 / 64 * h)))
        sx0, sx1 = int(x0 / 64 * h), min(h - 1, int(np.ceil(x1 / 64 * h)))
        masses.append(sal[j, sy0:sy1 + 1, sx0:sx1 + 1].sum())
    return float(np.mean(masses)), float(np.mean([ (y1-y0+1)*(x1-x0+1) ] ) if False else 0)

for lr_sa in (0.1, 0.05, 0.02, 0.01):
    cfg = TrainConfig(seed=0, batch_images=8, epochs_stage1=12, epochs_stage2=10, lr_sa=lr_sa)
    models = build_bundle(bcfg, projector_dim=16, seed=0)
    recs = train_stage1(ds, train_idx, models, cfg)
    mass, _ = saliency_mass_in_box(models, cfg)
    ces = [round(r["loss_ce"], 3) for r in recs]
    print(f"lr_sa={lr_sa}: ce {ces[0]}->{ces[-1]} (min {min(ces)}), sal-mass-in-box {mass:.3f}", flush=True)
