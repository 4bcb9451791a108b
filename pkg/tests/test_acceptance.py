"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Criteria 6, 7 and 12 share a module-scoped fixture that trains the full
two-stage pipeline for three configurations x three seeds (plus the
supervised reference) on the frozen synthetic dataset; runs execute in
parallel worker processes. Run with ``pytest tests/test_acceptance.py -s``
to watch progress.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

import dscl.ndtensor as nd
from dscl.cli import main as cli_main
from dscl.data import DatasetSpec, generate_dataset, kfold_split
from dscl.losses import EmbeddingBatch, dscl_loss, scl_loss
from dscl.metrics import cohens_kappa, evaluate, similarity_stats, time_forward
from dscl.nets import BackboneConfig, Dense, build_bundle
from dscl.resampler import apply_grid, uniform_downsample, uniform_grid
from dscl.saliency import default_kernel, grid_from_saliency, make_kernel
from dscl.trainer import (SGDNesterov, TrainConfig, cosine_lr, load_checkpoint,
                          params_checksum, stage2_train, uniform_views_for)
from dscl.losses import cross_entropy

from _ablation import (ACCEPT_BACKBONE, ACCEPT_SEEDS, ACCEPT_TRAIN, PROJECTOR_DIM,
                       acceptance_dataset, run_ce_baseline, run_pipeline)
from _oracles import (dscl_brute, grid_double_sum, random_embedding_batch, scl_brute,
                      similarity_pairs_brute)


def _report(num: int, desc: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {desc}"
    if detail:
        line += f"  ({detail})"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# criteria 1-3: loss gradients, oracle equivalence, strict decoupling order
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(101)
    worst = 0.0
    for trial in range(50):
        z, labels, anchors = random_embedding_batch(rng, n_min=6, n_max=8, d_max=8)
        zt = nd.tensor(z, requires_grad=True)
        loss_fn = dscl_loss if trial % 2 == 0 else scl_loss
        tau = float(rng.uniform(0.05, 1.0))

        def f(leaf):
            unit = nd.l2_normalize(leaf, axis=1)
            return loss_fn(EmbeddingBatch(unit, labels, anchors, validate=False), tau)

        worst = max(worst, nd.grad_check(f, [zt], step=1e-5))
    _report(1, "contrastive-loss gradients vs central differences < 1e-4",
            worst < 1e-4, f"max rel err {worst:.2e} over 50 batches")


def test_criterion_2_loss_oracle_equivalence():
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(200):
        z, labels, anchors = random_embedding_batch(rng, n_min=6, n_max=12)
        tau = float(rng.uniform(0.05, 1.5))
        batch = EmbeddingBatch(nd.constant(z), labels, anchors)
        worst = max(worst, abs(dscl_loss(batch, tau).item() - dscl_brute(z, labels, anchors, tau)))
        worst = max(worst, abs(scl_loss(batch, tau).item() - scl_brute(z, labels, anchors, tau)))
    _report(2, "dscl/scl match brute-force double-loop oracles to 1e-10",
            worst < 1e-10, f"max |diff| {worst:.2e} over 200 batches")


def test_criterion_3_strict_decoupling_ordering():
    rng = np.random.default_rng(103)
    violations = 0
    for _ in range(1000):
        z, labels, anchors = random_embedding_batch(rng)
        batch = EmbeddingBatch(nd.constant(z), labels, anchors)
        tau = float(rng.uniform(0.05, 2.0))
        if not dscl_loss(batch, tau).item() < scl_loss(batch, tau).item():
            violations += 1
    _report(3, "dscl < scl on 1000 random valid batches, zero violations",
            violations == 0, f"{violations} violations")


# ---------------------------------------------------------------------------
# criteria 4-5: grid and resampler invariants
# ---------------------------------------------------------------------------

def test_criterion_4_grid_correctness():
    out, src = 16, 64
    kernel = default_kernel(out)
    r = kernel.radius
    uni = uniform_grid(out, out, src, src)
    sal = np.full((out, out), 1.0 / out ** 2)
    g = grid_from_saliency(sal, kernel, out, out, src, src)
    sl = slice(r, out - r)
    uniform_ok = (np.max(np.abs(g.x[sl, sl] - uni.x[sl, sl])) < 1e-6
                  and np.max(np.abs(g.y[sl, sl] - uni.y[sl, sl])) < 1e-6)

    rng = np.random.default_rng(104)
    k2 = make_kernel(1.5, 4)
    bounds_ok = True
    for _ in range(500):
        logits = rng.normal(size=(out, out)) / rng.uniform(0.05, 1.0)
        e = np.exp(logits - logits.max())
        s = e / e.sum()
        gg = grid_from_saliency(s, k2, out, out, src, src)
        if not (gg.x.min() >= 0 and gg.x.max() <= src - 1
                and gg.y.min() >= 0 and gg.y.max() <= src - 1):
            bounds_ok = False
            break

    attraction_ok = True
    for _ in range(100):
        cy, cx = rng.integers(k2.radius, out - k2.radius, size=2)
        s = np.full((out, out), 1e-4)
        s[cy, cx] = 1.0
        s /= s.sum()
        gg = grid_from_saliency(s, k2, out, out, src, src)
        ox, oy = grid_double_sum(s, k2.sigma, k2.radius, (out, out), (src, src))
        if np.max(np.abs(gg.x - ox)) > 1e-9 or np.max(np.abs(gg.y - oy)) > 1e-9:
            attraction_ok = False
            break
        for dy in range(-k2.radius, k2.radius + 1):
            for dx in range(-k2.radius, k2.radius + 1):
                y, x = cy + dy, cx + dx
                if (dy == 0 and dx == 0) or not (
                        k2.radius <= y < out - k2.radius and k2.radius <= x < out - k2.radius):
                    continue
                d_new = math.hypot(gg.x[y, x] - uni.x[cy, cx], gg.y[y, x] - uni.y[cy, cx])
                d_uni = math.hypot(uni.x[y, x] - uni.x[cy, cx], uni.y[y, x] - uni.y[cy, cx])
                if not d_new < d_uni:
                    attraction_ok = False
    ok = uniform_ok and bounds_ok and attraction_ok
    _report(4, "uniform->uniform grid (interior), bounds on 500 maps, peak attraction x100",
            ok, f"uniform={uniform_ok} bounds={bounds_ok} attraction={attraction_ok}")


def test_criterion_5_resampler_identity():
    rng = np.random.default_rng(105)
    img = rng.uniform(0, 1, size=(3, 24, 24))
    a = apply_grid(img, uniform_grid(12, 12, 24, 24))
    b = uniform_downsample(img, 12, 12)
    bit_exact = np.array_equal(a, b)
    ident = apply_grid(img, uniform_grid(24, 24, 24, 24))
    identity_ok = np.array_equal(ident, img)
    _report(5, "apply_grid(uniform) == uniform_downsample bit-exact; identity grid exact",
            bit_exact and identity_ok, f"downsample={bit_exact} identity={identity_ok}")


# ---------------------------------------------------------------------------
# heavy fixture: full pipeline runs for criteria 6, 7, 12 (+ data example)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    jobs = []
    for seed in ACCEPT_SEEDS:
        jobs.append(("sa_dscl", seed, {}, str(root / f"sa_dscl_{seed}.dscl")))
        jobs.append(("sa_scl", seed, {"loss": "scl"}, None))
        jobs.append(("simclr5_dscl", seed, {"augmentation": "simclr5"}, None))
    results = {}
    with ProcessPoolExecutor(max_workers=2) as pool:
        for res in pool.map(run_pipeline, jobs):
            results[(res["tag"], res["seed"])] = res
        ce_jobs = [("ce_only", seed, ACCEPT_TRAIN["epochs_stage1"]) for seed in ACCEPT_SEEDS]
        for res in pool.map(run_ce_baseline, ce_jobs):
            results[(res["tag"], res["seed"])] = res
    return results


def _mean(results, tag, field="oa"):
    return float(np.mean([results[(tag, s)][field] for s in ACCEPT_SEEDS]))


def test_criterion_6_ablation_direction(ablation):
    sa_dscl = _mean(ablation, "sa_dscl")
    sa_scl = _mean(ablation, "sa_scl")
    simclr5 = _mean(ablation, "simclr5_dscl")
    ok = (sa_dscl > sa_scl) and (sa_dscl >= simclr5 + 0.10)
    _report(6, "OA(sa+dscl) > OA(sa+scl) and >= OA(simclr5+dscl) + 10pp (3-seed means)",
            ok, f"sa+dscl={sa_dscl:.3f} sa+scl={sa_scl:.3f} simclr5+dscl={simclr5:.3f}")


def test_criterion_7_similarity_direction(ablation):
    intra_d = _mean(ablation, "sa_dscl", "intra")
    inter_d = _mean(ablation, "sa_dscl", "inter")
    intra_c = _mean(ablation, "ce_only", "intra")
    inter_c = _mean(ablation, "ce_only", "inter")
    ok = intra_d > intra_c and inter_d < inter_c
    _report(7, "DSCL model: higher intra-class and lower inter-class cosine than CE-only",
            ok, f"intra {intra_d:.3f} vs {intra_c:.3f}; inter {inter_d:.3f} vs {inter_c:.3f}")


def test_criterion_12_probe_peaks_within_10_epochs(ablation):
    ds, train_idx, test_idx = acceptance_dataset()
    cfg = TrainConfig(seed=0, **ACCEPT_TRAIN)
    all_ok = True
    details = []
    for seed in ACCEPT_SEEDS:
        models = load_checkpoint(ablation[("sa_dscl", seed)]["checkpoint"],
                                 dtype=cfg.np_dtype)
        cfg_seed = TrainConfig(seed=seed, **ACCEPT_TRAIN)
        recs = stage2_train(ds, train_idx, models, cfg_seed, test_idx=test_idx, epochs=30)
        oas = [r["test_oa"] for r in recs]
        ok = max(oas[:10]) >= max(oas)
        details.append(f"seed{seed}: best@<=10 {max(oas[:10]):.3f} vs best@30 {max(oas):.3f}")
        all_ok = all_ok and ok
    _report(12, "stage-2 probe reaches its fold-best OA within 10 epochs, 3/3 seeds",
            all_ok, "; ".join(details))


def test_data_example_pipeline_vs_raw_pixels(ablation):
    """Generator contract: the lesion signal must largely vanish at 8x8 while
    the full pipeline clears 90% OA."""
    ds, train_idx, test_idx = acceptance_dataset()
    labels_train = np.array([ds[i].label for i in train_idx])
    labels_test = np.array([ds[i].label for i in test_idx])
    x_train = np.stack([uniform_downsample(ds[i].image, 8, 8).reshape(-1)
                        for i in train_idx]).astype(np.float32)
    x_test = np.stack([uniform_downsample(ds[i].image, 8, 8).reshape(-1)
                       for i in test_idx]).astype(np.float32)
    lin = Dense(np.random.default_rng(0), x_train.shape[1], 3, np.float32)
    opt = SGDNesterov({"cls": [("w", lin.w), ("b", lin.b)]}, 0.9, 5e-4)
    for epoch in range(30):
        lr = cosine_lr(epoch, 30, 0.05)
        order = np.random.default_rng([11, epoch]).permutation(len(x_train))
        for start in range(0, len(order), 16):
            sel = order[start:start + 16]
            opt.zero_grad()
            with nd.Graph() as g:
                loss = cross_entropy(lin(nd.constant(x_train[sel])), labels_train[sel])
                g.backward(loss)
            opt.step({"cls": lr})
    with nd.no_grad():
        preds = lin(nd.constant(x_test)).numpy().argmax(axis=1)
    raw_oa = float((preds == labels_test).mean())
    full_oa = _mean(ablation, "sa_dscl")
    ok = raw_oa < 0.80 and full_oa > 0.90
    _report(0, "raw 8x8 linear probe < 80% while full pipeline > 90% [data example]",
            ok, f"raw8x8={raw_oa:.3f} full={full_oa:.3f}")


# ---------------------------------------------------------------------------
# criteria 8-9: frozen/discard contracts and inference parity
# ---------------------------------------------------------------------------

def test_criterion_8_frozen_extractor_and_sa_discard():
    ds = generate_dataset(DatasetSpec(n_per_class=8, resolution=64, seed=3))
    bcfg = BackboneConfig(**ACCEPT_BACKBONE)
    cfg = TrainConfig(seed=0, batch_images=4, epochs_stage1=1, epochs_stage2=3,
                      lr_sa=ACCEPT_TRAIN["lr_sa"])
    models = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=0)
    before = params_checksum(models.fe_parameters())
    stage2_train(ds, np.arange(len(ds)), models, cfg)
    frozen_ok = params_checksum(models.fe_parameters()) == before

    sa_calls_before = models.sa.forward_calls
    images = uniform_views_for(ds, np.arange(len(ds)), bcfg.input_size, np.float32)
    time_forward(models, images, warmup=1, reps=3)
    sa_ok = models.sa.forward_calls == sa_calls_before
    _report(8, "stage-2 leaves extractor bit-identical; SA executes zero times in timing",
            frozen_ok and sa_ok, f"frozen={frozen_ok} sa_calls_ok={sa_ok}")


def test_criterion_9_inference_parity():
    ds, _, test_idx = acceptance_dataset()
    bcfg = BackboneConfig(**ACCEPT_BACKBONE)
    models = build_bundle(bcfg, projector_dim=PROJECTOR_DIM, seed=0)
    images = uniform_views_for(ds, test_idx, bcfg.input_size, np.float32)
    with_cls = time_forward(models, images, warmup=3, reps=15, include_classifier=True)
    without = time_forward(models, images, warmup=3, reps=15, include_classifier=False)
    ratio = with_cls / without
    ok = ratio < 1.05
    _report(9, "extractor+classifier within 5% of extractor-alone (median of 15 reps)",
            ok, f"ratio {ratio:.4f} ({with_cls:.3f} vs {without:.3f} ms/image)")


# ---------------------------------------------------------------------------
# criterion 10: determinism of seeded runs
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    args = ["--set", "data.n_per_class=8", "--set", "data.resolution=48",
            "--set", "model.channels=[4,6,8,10]", "--set", "model.blocks_per_stage=1",
            "--set", "model.projector_dim=6", "--set", "train.epochs_stage1=2",
            "--set", "train.epochs_stage2=2", "--set", "train.batch_images=4"]
    logs, metrics = [], []
    for name in ("d1", "d2"):
        run = tmp_path / name
        assert cli_main(args + ["train", str(run)]) == 0
        # wall-clock fields are telemetry; every numeric field must be identical
        recs = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
        logs.append([{k: v for k, v in r.items() if k != "wall_time_s"} for r in recs])
        metrics.append((run / "metrics.json").read_bytes())
    ok = logs[0] == logs[1] and metrics[0] == metrics[1]
    _report(10, "two identical seeded runs: identical train log and metrics JSON",
            ok, f"epochs logged={len(logs[0])}")


# ---------------------------------------------------------------------------
# criterion 11: metric oracles
# ---------------------------------------------------------------------------

def test_criterion_11_metric_oracles():
    kappa = cohens_kappa([[50, 10], [5, 35]])
    kappa_ok = abs(kappa - 0.6938775510204082) < 1e-6

    labels = [0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2]
    preds = [0, 0, 1, 0, 2, 0, 0, 1, 1, 0, 1, 2, 1, 2, 2, 2, 0, 2, 2, 1]
    confusion, recalls, oa = evaluate(preds, labels, 3)
    eval_ok = (np.array_equal(confusion, [[5, 1, 1], [1, 4, 1], [1, 1, 5]])
               and np.allclose(recalls, [5 / 7, 4 / 6, 5 / 7]) and oa == 14 / 20)

    rng = np.random.default_rng(111)
    sim_ok = True
    for _ in range(20):
        v = rng.normal(size=(6, 5))
        labs = np.array([0, 0, 0, 1, 1, 1])
        want = similarity_pairs_brute(v, labs)
        got = similarity_stats(v, labs)
        if abs(got[0] - want[0]) > 1e-12 or abs(got[1] - want[1]) > 1e-12:
            sim_ok = False
    _report(11, "kappa/eval/similarity match hand and pair-loop oracles",
            kappa_ok and eval_ok and sim_ok,
            f"kappa={kappa_ok} evaluate={eval_ok} similarity={sim_ok}")
