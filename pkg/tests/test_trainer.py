import json

import numpy as np
import pytest

import dscl.ndtensor as nd
from dscl.data import DatasetSpec, generate_dataset, kfold_split
from dscl.errors import (BatchConstructionError, ContractViolationError,
                         CorruptCheckpointError, DimensionError, ParameterError)
from dscl.nets import BackboneConfig, build_bundle
from dscl.trainer import (ContrastiveBatch, TrainConfig, build_batch, class_pair_batches,
                          cosine_lr, load_checkpoint, load_checkpoint_into, make_optimizer,
                          params_checksum, save_checkpoint, sgd_nesterov_step, stage1_step,
                          stage2_train, train_ce_baseline, train_stage1)

BCFG = BackboneConfig(channels=(4, 6, 8, 10), blocks_per_stage=1, input_size=32)


def tiny_dataset(n=6, seed=5):
    return generate_dataset(DatasetSpec(n_per_class=n, resolution=64, seed=seed))


def tiny_cfg(**kw):
    base = dict(seed=0, batch_images=4, epochs_stage1=2, epochs_stage2=2)
    base.update(kw)
    return TrainConfig(**base)


def make_models(cfg=None, seed=0, with_sa=True, saliency_init="mean"):
    return build_bundle(BCFG, projector_dim=6, seed=seed, with_sa=with_sa,
                        saliency_init=saliency_init)


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 10, 0.1) == pytest.approx(0.1)
        assert cosine_lr(10, 10, 0.1) == pytest.approx(0.0, abs=1e-15)
        assert cosine_lr(5, 10, 0.1) == pytest.approx(0.05)

    def test_out_of_range_epoch(self):
        with pytest.raises(ParameterError):
            cosine_lr(11, 10, 0.1)


class TestSgdNesterov:
    def test_plain_sgd_reduction(self):
        p = np.array([1.0, -2.0])
        g = np.array([0.5, 0.5])
        v = np.zeros(2)
        sgd_nesterov_step(p, g, v, lr=0.1, momentum=0.0, weight_decay=0.0)
        assert np.allclose(p, [0.95, -2.05])

    def test_hand_traced_two_steps(self):
        # theta=1, g=1, mu=0.9, wd=0, lr=0.1: step 1 gives v=1, theta=0.81
        p = np.array([1.0])
        v = np.zeros(1)
        sgd_nesterov_step(p, np.array([1.0]), v, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert v[0] == pytest.approx(1.0)
        assert p[0] == pytest.approx(0.81)
        # step 2 (same unit gradient): v=1.9, theta = 0.81 - 0.1*(1 + 0.9*1.9) = 0.539
        sgd_nesterov_step(p, np.array([1.0]), v, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert v[0] == pytest.approx(1.9)
        assert p[0] == pytest.approx(0.539)

    def test_weight_decay_shrinks_params(self):
        p = np.array([2.0])
        v = np.zeros(1)
        prev = p[0]
        for _ in range(10):
            sgd_nesterov_step(p, np.zeros(1), v, lr=0.1, momentum=0.0, weight_decay=0.1)
            assert 0 < p[0] < prev
            prev = p[0]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sgd_nesterov_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.9, 0.0)


class TestClassPairBatches:
    def test_every_batch_has_pairs_and_two_classes(self):
        labels = np.array([0] * 11 + [1] * 10 + [2] * 9)
        pool = np.arange(30)
        rng = np.random.default_rng(0)
        for _ in range(20):
            batches = class_pair_batches(labels, pool, 8, rng)
            for b in batches:
                assert len(b) == 8
                present, counts = np.unique(labels[b], return_counts=True)
                assert (counts >= 2).all() and present.size >= 2

    def test_deterministic_given_rng_seed(self):
        labels = np.array([0] * 10 + [1] * 10 + [2] * 10)
        a = class_pair_batches(labels, np.arange(30), 6, np.random.default_rng(7))
        b = class_pair_batches(labels, np.arange(30), 6, np.random.default_rng(7))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestBuildBatch:
    def test_five_views_two_anchors(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        models = make_models()
        batch = build_batch(ds, [0, 1, 6, 7], models, cfg)
        assert batch.views.shape == (20, 3, 32, 32)
        assert batch.anchors.sum() == 4
        assert list(batch.labels[:5]) == [0] * 5
        # anchors are exactly the uniform views
        assert np.array_equal(np.flatnonzero(batch.anchors), np.arange(0, 20, 5))
        for i in range(4):
            assert np.array_equal(batch.views[5 * i], batch.uniform_views[i])

    def test_zero_saliency_weights_give_uniform_views(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(dtype="float64")  # oracle-mode width for the 1e-6 bound
        models = build_bundle(BCFG, projector_dim=6, seed=0, dtype=np.float64,
                              saliency_init="zero")
        kernel = cfg.kernel_for(32)
        batch = build_batch(ds, [0, 1, 6, 7], models, cfg)
        r = kernel.radius
        interior = (slice(None), slice(r, 32 - r), slice(r, 32 - r))
        for i in range(4):
            for s in range(4):
                zoom = batch.views[5 * i + 1 + s]
                assert np.max(np.abs(zoom[interior] - batch.uniform_views[i][interior])) < 1e-6

    def test_simclr5_views_vary(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(augmentation="simclr5")
        models = make_models(with_sa=False)
        rng = np.random.default_rng(3)
        batch = build_batch(ds, [0, 1, 6, 7], models, cfg, rng=rng)
        assert batch.views.shape == (20, 3, 32, 32)
        assert batch.anchors.all()
        distinct = any(not np.array_equal(batch.views[0], batch.views[v]) for v in range(1, 5))
        assert distinct

    def test_class_singleton_rejected(self):
        ds = tiny_dataset()
        with pytest.raises(BatchConstructionError):
            build_batch(ds, [0, 1, 2, 6], make_models(), tiny_cfg())

    def test_stagewise_grids_distinct(self):
        ds = tiny_dataset()
        models = make_models(saliency_init="he", seed=3)
        batch = build_batch(ds, [0, 1, 6, 7], models, tiny_cfg())
        for a in range(4):
            for b in range(a + 1, 4):
                dist = np.max(np.abs(batch.grids[a][0] - batch.grids[b][0]))
                assert dist > 0


class TestStage1Step:
    def test_total_is_sum_of_parts(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(dtype="float64")  # 1e-12 equality is an oracle-mode bound
        models = build_bundle(BCFG, projector_dim=6, seed=0, dtype=np.float64)
        batch = build_batch(ds, [0, 1, 6, 7], models, cfg)
        from dscl.losses import EmbeddingBatch, cross_entropy, dscl_loss
        with nd.Graph():
            _, aux = models.sa.forward(nd.constant(batch.uniform_views))
            ce = cross_entropy(aux, batch.image_labels)
            z = models.projector(models.extractor.features(nd.constant(batch.views)))
            con = dscl_loss(EmbeddingBatch(z, batch.labels, batch.anchors, validate=False), cfg.tau)
            total = nd.add(ce, con)
        assert total.item() == pytest.approx(ce.item() + con.item(), abs=1e-12)

    def test_zero_lr_leaves_params_bitexact(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        models = make_models()
        opt = make_optimizer(models, cfg)
        before = {n: t.data.copy() for n, t in models.named_parameters()}
        batch = build_batch(ds, [0, 1, 6, 7], models, cfg)
        stage1_step(batch, models, opt, cfg, lr_sa=0.0, lr_fe=0.0)
        for n, t in models.named_parameters():
            assert np.array_equal(before[n], t.data), n

    def test_gradient_isolation_sa_grads_independent_of_contrastive(self):
        ds = tiny_dataset()
        models = make_models(seed=1)
        batch = build_batch(ds, [0, 1, 6, 7], models, tiny_cfg())

        def sa_grads(cfg):
            opt = make_optimizer(models, cfg)
            opt.zero_grad()
            import dscl.trainer as tr
            with nd.Graph() as g:
                _, aux = models.sa.forward(nd.constant(batch.uniform_views))
                from dscl.losses import cross_entropy as ce_fn
                loss_ce = ce_fn(aux, batch.image_labels)
                r = models.extractor.features(nd.constant(batch.views))
                z = models.projector(r)
                from dscl.losses import EmbeddingBatch, dscl_loss
                emb = EmbeddingBatch(z, batch.labels, batch.anchors, validate=False)
                total = nd.add(loss_ce, dscl_loss(emb, cfg.tau)) if cfg.loss == "dscl" else loss_ce
                g.backward(total)
            return {n: (None if t.grad is None else t.grad.copy())
                    for n, t in models.sa_parameters()}

        with_dscl = sa_grads(tiny_cfg(loss="dscl"))
        models2 = make_models(seed=1)
        batch2 = build_batch(ds, [0, 1, 6, 7], models2, tiny_cfg())

        opt = make_optimizer(models2, tiny_cfg())
        opt.zero_grad()
        with nd.Graph() as g:
            _, aux = models2.sa.forward(nd.constant(batch2.uniform_views))
            from dscl.losses import cross_entropy as ce_fn
            loss_ce = ce_fn(aux, batch2.image_labels)
            g.backward(loss_ce)
        ce_only = {n: (None if t.grad is None else t.grad.copy())
                   for n, t in models2.sa_parameters()}

        for n in with_dscl:
            a, b = with_dscl[n], ce_only[n]
            if a is None and b is None:
                continue
            a = np.zeros(1) if a is None else a
            b = np.zeros(1) if b is None else b
            assert np.max(np.abs(a - b)) == 0.0, n

    def test_joint_gradients_reach_sa_through_sampler(self):
        ds = tiny_dataset()
        cfg = tiny_cfg(joint_gradients=True, saliency_floor=1e-3)
        models = make_models(seed=2, saliency_init="he")
        opt = make_optimizer(models, cfg)
        batch = build_batch(ds, [0, 1, 6, 7], models, cfg)
        before = {n: t.data.copy() for n, t in models.sa_parameters() if "sal_proj" in n}
        stage1_step(batch, models, opt, cfg, lr_sa=0.05, lr_fe=0.0)
        moved = any(not np.array_equal(before[n], t.data)
                    for n, t in models.sa_parameters() if "sal_proj" in n)
        assert moved  # the 1x1 saliency convs only get gradient through the sampler


class TestStage2:
    def test_extractor_frozen_checksum(self):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        models = make_models()
        before = params_checksum(models.fe_parameters())
        stage2_train(ds, np.arange(12), models, cfg)
        assert params_checksum(models.fe_parameters()) == before

    def test_projector_untouched_by_stage2(self):
        ds = tiny_dataset()
        models = make_models()
        before = {n: t.data.copy() for n, t in models.projector.params()}
        stage2_train(ds, np.arange(12), models, tiny_cfg())
        for n, t in models.projector.params():
            assert np.array_equal(before[f"{n}"], t.data)

    def test_probe_reaches_full_accuracy_on_separable_features(self):
        # classifier alone on linearly separable synthetic features
        rng = np.random.default_rng(0)
        models = make_models()
        n = 30
        labels = np.repeat([0, 1, 2], n // 3)
        feats = np.zeros((n, 10), dtype=np.float32)
        feats[np.arange(n), labels] = 4.0
        feats += rng.normal(scale=0.05, size=feats.shape).astype(np.float32)

        from dscl.losses import cross_entropy
        from dscl.trainer import SGDNesterov
        cfg = tiny_cfg()
        opt = SGDNesterov({"cls": models.classifier_parameters()}, cfg.momentum, 0.0)
        for epoch in range(10):
            lr = cosine_lr(epoch, 10, 0.5)
            order = np.random.default_rng(epoch).permutation(n)
            for start in range(0, n, 6):
                sel = order[start:start + 6]
                opt.zero_grad()
                with nd.Graph() as g:
                    loss = cross_entropy(models.classifier(nd.constant(feats[sel])), labels[sel])
                    g.backward(loss)
                opt.step({"cls": lr})
        with nd.no_grad():
            preds = models.classifier(nd.constant(feats)).numpy().argmax(axis=1)
        assert (preds == labels).mean() == 1.0


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        models = make_models(seed=4)
        p1 = tmp_path / "a.dscl"
        p2 = tmp_path / "b.dscl"
        save_checkpoint(models, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for (na, ta), (nb, tb) in zip(models.named_parameters(), loaded.named_parameters()):
            assert na == nb and np.array_equal(ta.numpy(), tb.numpy())

    def test_truncated_file_rejected(self, tmp_path):
        models = make_models(seed=5)
        p = tmp_path / "c.dscl"
        save_checkpoint(models, p)
        blob = p.read_bytes()
        p.write_bytes(blob[:len(blob) - 17])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "d.dscl"
        p.write_bytes(b"NOTDSCL0" + b"\x00" * 64)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(p)

    def test_mismatched_config_names_parameter(self, tmp_path):
        models = make_models(seed=6)
        p = tmp_path / "e.dscl"
        save_checkpoint(models, p)
        other = build_bundle(BackboneConfig(channels=(6, 6, 8, 10), blocks_per_stage=1,
                                            input_size=32), projector_dim=6, seed=0)
        with pytest.raises(DimensionError) as e:
            load_checkpoint_into(other, p)
        assert "stage0" in str(e.value)


class TestTrainingLoops:
    def test_stage1_deterministic_and_logged(self, tmp_path):
        ds = tiny_dataset()
        cfg = tiny_cfg()
        logs = []
        for run in range(2):
            run_dir = tmp_path / f"run{run}"
            run_dir.mkdir()
            models = make_models(seed=cfg.seed)
            recs = train_stage1(ds, np.arange(len(ds)), models, cfg, run_dir=str(run_dir))
            logs.append((recs, (run_dir / "train_log.jsonl").read_text()))
            assert (run_dir / "ckpt_stage1_last.dscl").exists()
            assert (run_dir / "ckpt_stage1_best.dscl").exists()
        a, b = logs
        for ra, rb in zip(a[0], b[0]):
            assert ra["loss_ce"] == rb["loss_ce"]
            assert ra["loss_dscl"] == rb["loss_dscl"]
        strip = lambda text: [{k: v for k, v in json.loads(line).items() if k != "wall_time_s"}
                              for line in text.strip().splitlines()]
        assert strip(a[1]) == strip(b[1])

    def test_ce_baseline_trains(self):
        ds = tiny_dataset()
        models = make_models(with_sa=False)
        recs = train_ce_baseline(ds, np.arange(len(ds)), models, tiny_cfg(), epochs=3)
        assert len(recs) == 3
        assert recs[-1]["loss_ce"] <= recs[0]["loss_ce"] * 1.5  # sanity: no blow-up


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(batch_images=3)
    with pytest.raises(ParameterError):
        TrainConfig(augmentation="mixup")
    with pytest.raises(ParameterError):
        TrainConfig(loss="tripletloss")
    with pytest.raises(ParameterError):
        TrainConfig(tau=0.0)
