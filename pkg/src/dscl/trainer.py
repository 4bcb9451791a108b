"""Two-stage optimization: contrastive representation learning, then a linear probe.

Stage 1 trains the saliency augmentor with cross-entropy on its aux head
and the feature extractor (+projector) with a contrastive loss over
5-view batches (the uniform view plus four saliency-zoomed views per
image, or five generic random crops in ``simclr5`` mode).  By default the
two objectives are gradient-isolated: saliency maps, grids and zoomed
views are built outside the tape, so the contrastive loss never touches
augmentor parameters and cross-entropy never touches the extractor.
``joint_gradients`` re-enables end-to-end flow through the differentiable
sampler for experimentation.

Stage 2 discards the augmentor and projector, freezes the extractor
(enforced by parameter checksums) and trains the linear classifier with
cross-entropy on uniform views only.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from .errors import (BatchConstructionError, ContractViolationError,
                     CorruptCheckpointError, DimensionError, NumericError, ParameterError)
from .losses import EmbeddingBatch, cross_entropy, dscl_loss, scl_loss
from .ndtensor import Tensor
from .nets import Backbone, BackboneConfig, ModelBundle, build_bundle
from .resampler import uniform_downsample
from .saliency import (DistanceKernel, default_kernel, grid_coords_batched, make_kernel,
                       saliency_maps_batched)

CHECKPOINT_MAGIC = b"DSCL0001"
N_VIEWS = 5


@dataclass
class TrainConfig:
    seed: int = 0
    batch_images: int = 8
    epochs_stage1: int = 30
    epochs_stage2: int = 10
    lr_sa: float = 0.1
    lr_fe: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9            # Nesterov momentum coefficient
    tau: float = 0.07
    tau_o: float = 0.1
    augmentation: str = "sa"         # "sa" | "simclr5"
    loss: str = "dscl"               # "dscl" | "scl"
    joint_gradients: bool = False    # let DSCL reach SA through the sampler
    all_views_anchor: bool = False
    decouple_all_positives: bool = False
    saliency_floor: float = 1e-3     # uniform mass mixed into maps before grid building
    kernel_sigma: float | None = None    # default: low_size / 9
    kernel_radius: int | None = None     # default: ceil(3 sigma)
    crop_scale_min: float = 0.08     # SimCLR-style area range for simclr5 views
    crop_scale_max: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_images < 4 or self.batch_images % 2:
            raise ParameterError("batch_images must be an even number >= 4")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ParameterError("epochs must be >= 1")
        for name in ("lr_sa", "lr_fe", "tau", "tau_o"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be > 0")
        if self.weight_decay < 0 or not (0 <= self.momentum < 1):
            raise ParameterError("bad weight_decay/momentum")
        if self.augmentation not in ("sa", "simclr5"):
            raise ParameterError(f"unknown augmentation mode {self.augmentation!r}")
        if self.loss not in ("dscl", "scl"):
            raise ParameterError(f"unknown loss mode {self.loss!r}")
        if not (0 <= self.saliency_floor < 1):
            raise ParameterError("saliency_floor must be in [0, 1)")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def kernel_for(self, low_size: int) -> DistanceKernel:
        if self.kernel_sigma is None and self.kernel_radius is None:
            return default_kernel(low_size)
        sigma = self.kernel_sigma if self.kernel_sigma is not None else low_size / 9.0
        radius = self.kernel_radius if self.kernel_radius is not None else int(np.ceil(3 * sigma))
        return make_kernel(sigma, radius)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def cosine_lr(epoch: int, total_epochs: int, lr_max: float) -> float:
    """0.5 * lr_max * (1 + cos(pi * epoch / total)): lr_max at 0, 0 at total."""
    if not 0 <= epoch <= total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 0.5 * lr_max * (1.0 + np.cos(np.pi * epoch / total_epochs))


def sgd_nesterov_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float, weight_decay: float) -> None:
    """In-place Nesterov update: v <- mu v + (g + wd p); p -= lr (g + wd p + mu v)."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise DimensionError(
            f"optimizer shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}")
    d = grad + weight_decay * param
    velocity *= momentum
    velocity += d
    param -= lr * (d + momentum * velocity)


class SGDNesterov:
    """Per-group Nesterov SGD over named parameter lists."""

    def __init__(self, groups: dict, momentum: float, weight_decay: float):
        self.groups = groups  # group name -> list[(param name, Tensor)]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data)
                         for params in groups.values() for name, t in params}

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for _, t in params:
                t.grad = None

    def step(self, lrs: dict) -> None:
        """One update; ``lrs`` maps group name -> learning rate."""
        for gname, params in self.groups.items():
            lr = lrs[gname]
            for name, t in params:
                if t.grad is None:
                    continue
                sgd_nesterov_step(t.data, t.grad, self.velocity[name],
                                  lr, self.momentum, self.weight_decay)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class ContrastiveBatch:
    """One training batch: B images expanded to 5B views with role flags."""

    image_ids: list
    image_indices: np.ndarray
    image_labels: np.ndarray          # (B,)
    high_images: np.ndarray           # (B, 3, H, W)
    uniform_views: np.ndarray         # (B, 3, s, s)
    views: np.ndarray                 # (5B, 3, s, s)
    labels: np.ndarray                # (5B,)
    anchors: np.ndarray               # (5B,) bool
    mode: str
    saliency: list = field(default_factory=list)   # per-stage (B,h,w) arrays, sa mode
    grids: list = field(default_factory=list)      # per-stage (gx, gy) arrays, sa mode


def class_pair_batches(labels: np.ndarray, pool: np.ndarray, batch_images: int, rng) -> list:
    """Deterministic epoch plan: same-class pairs shuffled into batches.

    Every class present in a batch contributes at least one full pair, so
    each anchor is guaranteed a positive; batches are also guaranteed two
    distinct classes so negatives exist. At most one odd leftover image
    per class per epoch is dropped.
    """
    pairs = []
    for cls in np.unique(labels[pool]):
        idx = pool[labels[pool] == cls].copy()
        rng.shuffle(idx)
        idx = idx[: (idx.size // 2) * 2]
        pairs.extend(idx.reshape(-1, 2))
    pairs = np.array(pairs)
    rng.shuffle(pairs)
    per_batch = batch_images // 2
    batches = []
    for start in range(0, len(pairs) - per_batch + 1, per_batch):
        chunk = pairs[start:start + per_batch]
        batches.append(chunk)
    # fix single-class chunks by swapping a pair with a differing neighbor
    for bi, chunk in enumerate(batches):
        if np.unique(labels[chunk[:, 0]]).size >= 2:
            continue
        for bj, other in enumerate(batches):
            if bj == bi:
                continue
            swap = np.flatnonzero(labels[other[:, 0]] != labels[chunk[0, 0]])
            if swap.size and np.unique(labels[other[:, 0]]).size >= 2:
                keep = swap[0]
                chunk[0], other[keep] = other[keep].copy(), chunk[0].copy()
                break
    return [c.reshape(-1) for c in batches if np.unique(labels[c[:, 0]]).size >= 2]


INPUT_SHIFT = 0.5  # images live in [0,1]; the BN-free nets want centered inputs


def center_input(arr: np.ndarray) -> np.ndarray:
    return arr - INPUT_SHIFT


def uniform_views_for(dataset, indices, size: int, dtype) -> np.ndarray:
    """Centered uniform down-samples, ready to feed a network."""
    views = np.stack([uniform_downsample(dataset[i].image, size, size) for i in indices])
    return center_input(views.astype(dtype))


def _apply_saliency_floor(maps: Tensor, floor: float) -> Tensor:
    """Mix a uniform component into the maps; bounds peak dominance so the
    grid denominators cannot underflow even at extreme sharpness."""
    if floor == 0:
        return maps
    n, h, w = maps.shape
    return nd.add_scalar(nd.mul_scalar(maps, 1.0 - floor), floor / (h * w))


def make_sa_views(models: ModelBundle, batch_high: np.ndarray, uniform: np.ndarray,
                  cfg: TrainConfig, kernel: DistanceKernel):
    """Four saliency-zoomed views per image from the augmentor's stage maps.

    Runs under the ambient tape: wrap in ``nd.no_grad()`` for detached view
    construction, or leave recording on for joint-gradient experiments.
    Returns (views list per stage, saliency arrays, grid arrays).
    """
    b, _, high, _ = batch_high.shape
    low = uniform.shape[-1]
    il = nd.constant(uniform)
    stage_maps, _ = models.sa.forward(il)
    zoomed, sal_dump, grid_dump = [], [], []
    for s, fmap in enumerate(stage_maps):
        maps = saliency_maps_batched(fmap, models.sa.sal_projs[s], cfg.tau_o)
        maps = _apply_saliency_floor(maps, cfg.saliency_floor)
        gx, gy = grid_coords_batched(maps, kernel, low, low, high, high)
        stage_views = []
        for i in range(b):
            img = nd.constant(batch_high[i])
            gxi = nd.take(gx, [i], axis=0).reshape(low, low)
            gyi = nd.take(gy, [i], axis=0).reshape(low, low)
            stage_views.append(nd.add_scalar(nd.grid_sample(img, gxi, gyi), -INPUT_SHIFT))
        zoomed.append(stage_views)
        sal_dump.append(maps.numpy().copy())
        grid_dump.append((gx.numpy().copy(), gy.numpy().copy()))
    return zoomed, sal_dump, grid_dump


def build_batch(dataset, image_indices, models: ModelBundle, cfg: TrainConfig,
                rng=None, kernel: DistanceKernel | None = None) -> ContrastiveBatch:
    """Assemble the 5-view contrastive batch for the selected images.

    View construction is detached (no tape): the stage-1 step re-runs the
    augmentor forward on its own tape for the cross-entropy term, and
    rebuilds views on-tape itself when ``joint_gradients`` is set.
    """
    image_indices = np.asarray(image_indices)
    labels_b = np.array([dataset[i].label for i in image_indices])
    present, counts = np.unique(labels_b, return_counts=True)
    if (counts < 2).any() or present.size < 2:
        raise BatchConstructionError(
            f"batch needs >=2 images of each present class and >=2 classes, "
            f"got counts {dict(zip(present.tolist(), counts.tolist()))}; re-sample indices")
    dt = cfg.np_dtype
    low = models.backbone_cfg.input_size
    high_images = np.stack([dataset[i].image for i in image_indices]).astype(dt)
    uniform = uniform_views_for(dataset, image_indices, low, dt)
    b = len(image_indices)

    sal_dump, grid_dump = [], []
    if cfg.augmentation == "sa":
        kernel = kernel or cfg.kernel_for(low)
        with nd.no_grad():
            zoomed, sal_dump, grid_dump = make_sa_views(models, high_images, uniform, cfg, kernel)
        views = np.empty((N_VIEWS * b, 3, low, low), dtype=dt)
        for i in range(b):
            views[N_VIEWS * i] = uniform[i]
            for s in range(4):
                views[N_VIEWS * i + 1 + s] = zoomed[s][i].numpy()
        anchors = np.arange(N_VIEWS * b) % N_VIEWS == 0
    else:  # simclr5: five generic random crops/flips, all anchor-eligible
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        views = np.empty((N_VIEWS * b, 3, low, low), dtype=dt)
        for i, idx in enumerate(image_indices):
            li = dataset[idx]
            for v in range(N_VIEWS):
                views[N_VIEWS * i + v] = random_crop_view_cfg(li, rng, low, cfg)
        anchors = np.ones(N_VIEWS * b, dtype=bool)

    return ContrastiveBatch(
        image_ids=[dataset[i].sample_id for i in image_indices],
        image_indices=image_indices,
        image_labels=labels_b,
        high_images=high_images,
        uniform_views=uniform,
        views=views,
        labels=np.repeat(labels_b, N_VIEWS),
        anchors=anchors,
        mode=cfg.augmentation,
        saliency=sal_dump,
        grids=grid_dump,
    )


def random_crop_view_cfg(li, rng, low: int, cfg: TrainConfig) -> np.ndarray:
    """Generic (task-agnostic) random resized crop + flips for simclr5 views.

    Deliberately not lesion-preserving: the generic-augmentation baseline
    reproduces the failure mode where task-agnostic crops lose tiny
    structures. The data module's lesion-safe cropper stays available for
    supervised augmentation.
    """
    from .data import random_crop_view
    view = random_crop_view(li.image, None, rng, low,
                            scale_range=(cfg.crop_scale_min, cfg.crop_scale_max))
    return center_input(view.astype(cfg.np_dtype))


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def _contrastive_for(cfg: TrainConfig, all_views_anchor: bool):
    if cfg.loss == "dscl":
        return lambda batch: dscl_loss(batch, cfg.tau, all_views_anchor=all_views_anchor,
                                       decouple_all_positives=cfg.decouple_all_positives)
    return lambda batch: scl_loss(batch, cfg.tau, all_views_anchor=all_views_anchor)


def stage1_step(batch: ContrastiveBatch, models: ModelBundle, optimizer: SGDNesterov,
                cfg: TrainConfig, lr_sa: float, lr_fe: float,
                kernel: DistanceKernel | None = None) -> tuple[float, float]:
    """One optimization step of L_S1; returns (loss_ce, loss_contrastive).

    The total loss is their sum; with gradient isolation (default) the
    cross-entropy term only reaches augmentor parameters and the
    contrastive term only reaches extractor/projector parameters.
    """
    optimizer.zero_grad()
    all_anchor = cfg.all_views_anchor or batch.mode == "simclr5"
    with nd.Graph() as g:
        if batch.mode == "sa":
            if cfg.joint_gradients:
                kernel = kernel or cfg.kernel_for(models.backbone_cfg.input_size)
                zoomed, _, _ = make_sa_views(models, batch.high_images, batch.uniform_views,
                                             cfg, kernel)
                parts = []
                for i in range(len(batch.image_indices)):
                    parts.append(nd.reshape(nd.constant(batch.uniform_views[i]),
                                            (1,) + batch.uniform_views[i].shape))
                    for s in range(4):
                        v = zoomed[s][i]
                        parts.append(nd.reshape(v, (1,) + v.shape))
                views_t = nd.concat_rows(parts)
                _, aux_logits = models.sa.forward(nd.constant(batch.uniform_views))
            else:
                views_t = nd.constant(batch.views)
                _, aux_logits = models.sa.forward(nd.constant(batch.uniform_views))
            loss_ce = cross_entropy(aux_logits, batch.image_labels)
        else:
            views_t = nd.constant(batch.views)
            loss_ce = None

        r = models.extractor.features(views_t)
        z = models.projector(r)
        emb = EmbeddingBatch(z, batch.labels, batch.anchors, validate=False)
        loss_con = _contrastive_for(cfg, all_anchor)(emb)
        total = nd.add(loss_ce, loss_con) if loss_ce is not None else loss_con
        g.backward(total)
    optimizer.step({"sa": lr_sa, "fe": lr_fe})
    return (loss_ce.item() if loss_ce is not None else 0.0), loss_con.item()


def make_optimizer(models: ModelBundle, cfg: TrainConfig) -> SGDNesterov:
    groups = {"sa": models.sa_parameters(), "fe": models.fe_parameters()}
    return SGDNesterov(groups, cfg.momentum, cfg.weight_decay)


def train_stage1(dataset, train_idx, models: ModelBundle, cfg: TrainConfig,
                 run_dir=None) -> list:
    """Full stage-1 loop; returns per-epoch records (also appended to the log)."""
    labels = np.array([li.label for li in dataset])
    optimizer = make_optimizer(models, cfg)
    kernel = cfg.kernel_for(models.backbone_cfg.input_size) if cfg.augmentation == "sa" else None
    records = []
    best = np.inf
    for epoch in range(cfg.epochs_stage1):
        t0 = time.perf_counter()
        lr_sa = cosine_lr(epoch, cfg.epochs_stage1, cfg.lr_sa)
        lr_fe = cosine_lr(epoch, cfg.epochs_stage1, cfg.lr_fe)
        rng = np.random.default_rng([cfg.seed, 101, epoch])
        ce_sum = con_sum = 0.0
        batches = class_pair_batches(labels, np.asarray(train_idx), cfg.batch_images, rng)
        for step, image_indices in enumerate(batches):
            try:
                batch = build_batch(dataset, image_indices, models, cfg, rng=rng, kernel=kernel)
                ce, con = stage1_step(batch, models, optimizer, cfg, lr_sa, lr_fe, kernel=kernel)
            except NumericError as e:
                _dump_diagnostic(run_dir, epoch, step, image_indices, dataset, str(e))
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(images {[dataset[i].sample_id for i in image_indices]}): {e}") from e
            ce_sum += ce
            con_sum += con
        rec = {"stage": 1, "epoch": epoch, "lr_sa": lr_sa, "lr_fe": lr_fe,
               "loss_ce": ce_sum / max(1, len(batches)),
               "loss_dscl": con_sum / max(1, len(batches)),
               "wall_time_s": time.perf_counter() - t0}
        records.append(rec)
        if run_dir is not None:
            _append_log(run_dir, rec)
            save_checkpoint(models, f"{run_dir}/ckpt_stage1_last.dscl")
            total = rec["loss_ce"] + rec["loss_dscl"]
            if total < best:
                best = total
                save_checkpoint(models, f"{run_dir}/ckpt_stage1_best.dscl")
    return records


def _dump_diagnostic(run_dir, epoch, step, image_indices, dataset, message) -> None:
    if run_dir is None:
        return
    diag = {"epoch": epoch, "step": step, "error": message,
            "image_ids": [dataset[i].sample_id for i in np.asarray(image_indices)]}
    with open(f"{run_dir}/diagnostic_batch.json", "w") as f:
        json.dump(diag, f, indent=2)


def _append_log(run_dir, record) -> None:
    with open(f"{run_dir}/train_log.jsonl", "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stage 2 (linear probe) and the CE-only reference
# ---------------------------------------------------------------------------

def extract_features(extractor: Backbone, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with nd.no_grad():
        for start in range(0, len(images), batch):
            out.append(extractor.features(nd.constant(images[start:start + batch])).numpy())
    return np.concatenate(out, axis=0)


def params_checksum(named_params) -> str:
    h = hashlib.sha256()
    for name, t in named_params:
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


def stage2_train(dataset, train_idx, models: ModelBundle, cfg: TrainConfig,
                 run_dir=None, test_idx=None, epochs: int | None = None) -> list:
    """Linear-probe training on frozen extractor features of uniform views.

    The augmentor and projector never enter the graph; the extractor is
    frozen and checksum-verified.  With ``test_idx`` given, each record
    carries the probe's test overall accuracy for that epoch.
    """
    epochs = epochs or cfg.epochs_stage2
    dt = cfg.np_dtype
    low = models.backbone_cfg.input_size
    frozen_before = params_checksum(models.fe_parameters())

    feats = extract_features(models.extractor, uniform_views_for(dataset, train_idx, low, dt))
    labels = np.array([dataset[i].label for i in train_idx])
    test_feats = test_labels = None
    if test_idx is not None:
        test_feats = extract_features(models.extractor, uniform_views_for(dataset, test_idx, low, dt))
        test_labels = np.array([dataset[i].label for i in test_idx])

    optimizer = SGDNesterov({"cls": models.classifier_parameters()},
                            cfg.momentum, cfg.weight_decay)
    records = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, epochs, cfg.lr_fe)
        rng = np.random.default_rng([cfg.seed, 202, epoch])
        order = rng.permutation(len(train_idx))
        ce_sum = 0.0
        n_steps = 0
        for start in range(0, len(order), cfg.batch_images):
            sel = order[start:start + cfg.batch_images]
            optimizer.zero_grad()
            with nd.Graph() as g:
                logits = models.classifier(nd.constant(feats[sel]))
                loss = cross_entropy(logits, labels[sel])
                g.backward(loss)
            optimizer.step({"cls": lr})
            ce_sum += loss.item()
            n_steps += 1
        rec = {"stage": 2, "epoch": epoch, "lr": lr, "loss_ce": ce_sum / max(1, n_steps),
               "wall_time_s": time.perf_counter() - t0}
        if test_feats is not None:
            with nd.no_grad():
                preds = models.classifier(nd.constant(test_feats)).numpy().argmax(axis=1)
            rec["test_oa"] = float((preds == test_labels).mean())
        records.append(rec)
        if run_dir is not None:
            _append_log(run_dir, rec)

    frozen_after = params_checksum(models.fe_parameters())
    if frozen_before != frozen_after:
        raise ContractViolationError("stage-2 training mutated frozen extractor parameters")
    if run_dir is not None:
        save_checkpoint(models, f"{run_dir}/ckpt_stage2.dscl")
    return records


def train_ce_baseline(dataset, train_idx, models: ModelBundle, cfg: TrainConfig,
                      epochs: int | None = None) -> list:
    """Plain supervised reference: extractor + classifier trained jointly with
    cross-entropy on uniform views (no augmentor, no contrastive loss)."""
    epochs = epochs or cfg.epochs_stage1
    dt = cfg.np_dtype
    low = models.backbone_cfg.input_size
    images = uniform_views_for(dataset, train_idx, low, dt)
    labels = np.array([dataset[i].label for i in train_idx])
    groups = {"fe": [(n, t) for n, t in models.fe_parameters() if n.startswith("extractor.")],
              "cls": models.classifier_parameters()}
    optimizer = SGDNesterov(groups, cfg.momentum, cfg.weight_decay)
    records = []
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, cfg.lr_fe)
        rng = np.random.default_rng([cfg.seed, 303, epoch])
        order = rng.permutation(len(train_idx))
        ce_sum, n_steps = 0.0, 0
        for start in range(0, len(order), cfg.batch_images):
            sel = order[start:start + cfg.batch_images]
            optimizer.zero_grad()
            with nd.Graph() as g:
                logits = models.classifier(models.extractor.features(nd.constant(images[sel])))
                loss = cross_entropy(logits, labels[sel])
                g.backward(loss)
            optimizer.step({"fe": lr, "cls": lr})
            ce_sum += loss.item()
            n_steps += 1
        records.append({"stage": "ce", "epoch": epoch, "lr": lr,
                        "loss_ce": ce_sum / max(1, n_steps)})
    return records


def predict_classes(models: ModelBundle, dataset, indices, cfg: TrainConfig) -> np.ndarray:
    """Stage-2-style inference: uniform view -> frozen extractor -> classifier."""
    low = models.backbone_cfg.input_size
    images = uniform_views_for(dataset, indices, low, cfg.np_dtype)
    feats = extract_features(models.extractor, images)
    with nd.no_grad():
        logits = models.classifier(nd.constant(feats))
    return logits.numpy().argmax(axis=1)


def classifier_logits(models: ModelBundle, dataset, indices, cfg: TrainConfig) -> np.ndarray:
    low = models.backbone_cfg.input_size
    images = uniform_views_for(dataset, indices, low, cfg.np_dtype)
    feats = extract_features(models.extractor, images)
    with nd.no_grad():
        return models.classifier(nd.constant(feats)).numpy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _bundle_header(models: ModelBundle) -> dict:
    cfg = models.backbone_cfg
    return {
        "format": 1,
        "config": {
            "channels": list(cfg.channels),
            "blocks_per_stage": cfg.blocks_per_stage,
            "input_size": cfg.input_size,
            "in_channels": cfg.in_channels,
            "projector_dim": models.projector_dim,
            "n_classes": models.n_classes,
            "with_sa": models.sa is not None,
        },
    }


def save_checkpoint(models: ModelBundle, path) -> None:
    """Magic bytes, JSON header (names, shapes, offsets), float32 LE payload."""
    header = _bundle_header(models)
    params = []
    offset = 0
    payload = bytearray()
    for name, t in models.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        params.append([name, list(t.shape), offset])
        payload.extend(raw)
        offset += len(raw)
    header["params"] = params
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        f.write(bytes(payload))


def _read_checkpoint(path) -> tuple[dict, bytes]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"bad magic bytes in {path}")
    hlen = struct.unpack("<Q", blob[8:16])[0]
    if len(blob) < 16 + hlen:
        raise CorruptCheckpointError(f"truncated header in {path}")
    try:
        header = json.loads(blob[16:16 + hlen])
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"unparseable header in {path}: {e}") from e
    payload = blob[16 + hlen:]
    for name, shape, offset in header.get("params", []):
        need = offset + int(np.prod(shape)) * 4
        if len(payload) < need:
            raise CorruptCheckpointError(f"truncated payload in {path} at parameter {name}")
    return header, payload


def load_checkpoint_into(models: ModelBundle, path) -> None:
    """Load parameters by name into an existing bundle; shapes must match."""
    header, payload = _read_checkpoint(path)
    own = dict(models.named_parameters())
    stored = {name: (shape, offset) for name, shape, offset in header["params"]}
    if set(own) != set(stored):
        missing = sorted(set(own) ^ set(stored))
        raise CorruptCheckpointError(f"parameter set mismatch in {path}: {missing[:4]}...")
    for name, t in own.items():
        shape, offset = stored[name]
        if tuple(shape) != t.shape:
            raise DimensionError(
                f"checkpoint parameter {name} has shape {tuple(shape)}, model expects {t.shape}")
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        t.data[...] = arr.reshape(t.shape).astype(t.data.dtype)


def load_checkpoint(path, dtype=np.float32) -> ModelBundle:
    """Rebuild a bundle from the embedded configuration and load all parameters."""
    header, _ = _read_checkpoint(path)
    c = header["config"]
    bcfg = BackboneConfig(channels=tuple(c["channels"]), blocks_per_stage=c["blocks_per_stage"],
                          input_size=c["input_size"], in_channels=c["in_channels"])
    models = build_bundle(bcfg, projector_dim=c["projector_dim"], n_classes=c["n_classes"],
                          seed=0, dtype=dtype, with_sa=c["with_sa"])
    load_checkpoint_into(models, path)
    return models


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def train_two_stage(dataset, train_idx, test_idx, backbone_cfg: BackboneConfig,
                    cfg: TrainConfig, run_dir=None, projector_dim: int = 16,
                    n_classes: int = 3) -> tuple[ModelBundle, list, list]:
    """Stage 1 then stage 2 from scratch; returns (models, log1, log2)."""
    models = build_bundle(backbone_cfg, projector_dim=projector_dim, n_classes=n_classes,
                          seed=cfg.seed, dtype=cfg.np_dtype,
                          with_sa=cfg.augmentation == "sa")
    log1 = train_stage1(dataset, train_idx, models, cfg, run_dir=run_dir)
    log2 = stage2_train(dataset, train_idx, models, cfg, run_dir=run_dir, test_idx=test_idx)
    return models, log1, log2
