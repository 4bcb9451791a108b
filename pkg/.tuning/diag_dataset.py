"""Dataset difficulty bracket: CE-only on uniform 32px views (floor) vs
CE-only on ground-truth lesion-centered zoom views (ceiling), plus a raw-pixel
linear probe at 8x8."""
import sys
import numpy as np
import dscl.ndtensor as nd
from dscl.data import DatasetSpec, generate_dataset, kfold_split
from dscl.nets import BackboneConfig, build_bundle, Dense
from dscl.resampler import SamplingGrid, apply_grid, uniform_grid, uniform_downsample
from dscl.trainer import (TrainConfig, center_input, SGDNesterov, cosine_lr)
from dscl.losses import cross_entropy

clutter = float(sys.argv[1]) if len(sys.argv) > 1 else 0.25
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 15
spec = DatasetSpec(n_per_class=300, resolution=64, clutter=clutter, seed=7)
ds = generate_dataset(spec)
train_idx, test_idx = kfold_split(ds, 5, 7)[0]
labels_train = np.array([ds[i].label for i in train_idx])
labels_test = np.array([ds[i].label for i in test_idx])
bcfg = BackboneConfig(channels=(8, 16, 32, 64), blocks_per_stage=1, input_size=32)
cfg = TrainConfig(seed=0, batch_images=8, epochs_stage1=epochs, epochs_stage2=10)


def gt_zoom_view(li, size=32, factor=2.5):
    """Crop a window of factor x lesion-diameter centered on the box, resize."""
    img = li.image
    h = img.shape[1]
    if li.lesion_box is None:
        cy = cx = h / 2
        side = h / 2
    else:
        y0, y1, x0, x1 = li.lesion_box
        cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
        side = max(y1 - y0, x1 - x0) * factor
    si = int(round(min(max(side, 10), h)))
    top = min(max(cy - si / 2, 0), h - si)
    left = min(max(cx - si / 2, 0), h - si)
    base = uniform_grid(size, size, si, si)
    grid = SamplingGrid(x=base.x + left, y=base.y + top, src_h=h, src_w=h)
    return apply_grid(img, grid)


def train_ce_on(views_train, views_test, tag):
    m = build_bundle(bcfg, projector_dim=16, seed=0, with_sa=False)
    images = center_input(views_train.astype(np.float32))
    opt = SGDNesterov({"fe": [(n, t) for n, t in m.fe_parameters() if n.startswith("extractor.")],
                       "cls": m.classifier_parameters()}, cfg.momentum, cfg.weight_decay)
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, cfg.lr_fe)
        order = np.random.default_rng([0, 404, epoch]).permutation(len(images))
        for start in range(0, len(order), 8):
            sel = order[start:start + 8]
            opt.zero_grad()
            with nd.Graph() as g:
                loss = cross_entropy(m.classifier(m.extractor.features(nd.constant(images[sel]))),
                                     labels_train[sel])
                g.backward(loss)
            opt.step({"fe": lr, "cls": lr})
    with nd.no_grad():
        feats = m.extractor.features(nd.constant(center_input(views_test.astype(np.float32))))
        preds = m.classifier(feats).numpy().argmax(axis=1)
    print(f"clutter={clutter} {tag} OA: {(preds == labels_test).mean():.3f}", flush=True)


uni_train = np.stack([uniform_downsample(ds[i].image, 32, 32) for i in train_idx])
uni_test = np.stack([uniform_downsample(ds[i].image, 32, 32) for i in test_idx])
train_ce_on(uni_train, uni_test, "uniform32-CE")

zoom_train = np.stack([gt_zoom_view(ds[i]) for i in train_idx])
zoom_test = np.stack([gt_zoom_view(ds[i]) for i in test_idx])
train_ce_on(zoom_train, zoom_test, "gtzoom32-CE")

x8_train = np.stack([uniform_downsample(ds[i].image, 8, 8).reshape(-1) for i in train_idx]).astype(np.float32)
x8_test = np.stack([uniform_downsample(ds[i].image, 8, 8).reshape(-1) for i in test_idx]).astype(np.float32)
rngd = np.random.default_rng(0)
lin = Dense(rngd, x8_train.shape[1], 3, np.float32)
opt = SGDNesterov({"cls": [("w", lin.w), ("b", lin.b)]}, 0.9, 5e-4)
for epoch in range(30):
    lr = cosine_lr(epoch, 30, 0.05)
    order = np.random.default_rng([1, epoch]).permutation(len(x8_train))
    for start in range(0, len(order), 16):
        sel = order[start:start + 16]
        opt.zero_grad()
        with nd.Graph() as g:
            loss = cross_entropy(lin(nd.constant(x8_train[sel])), labels_train[sel])
            g.backward(loss)
        opt.step({"cls": lr})
with nd.no_grad():
    preds = lin(nd.constant(x8_test)).numpy().argmax(axis=1)
print(f"clutter={clutter} raw8x8-linear OA: {(preds == labels_test).mean():.3f}", flush=True)
