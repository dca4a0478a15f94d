import numpy as np
import pytest

from saflab.features import (
    DESCRIPTOR_DIM,
    Adam,
    FeatTrainConfig,
    FeatureStandardizer,
    ProjectionHead,
    extract_descriptor,
    sample_batch,
    supcon_loss,
    supcon_loss_grad,
    train_feature_head,
    tubes_co_occur,
    tubes_far_apart,
)
from saflab.tubes import Tube, TubeSet


def blob_scene(color=(40, 180, 60), at=(5, 5), size=(6, 9), shape=(32, 32)):
    img = np.full(shape + (3,), 100, dtype=np.uint8)
    mask = np.zeros(shape, dtype=bool)
    mask[at[0]:at[0] + size[0], at[1]:at[1] + size[1]] = True
    img[mask] = color
    return img, mask


class TestDescriptor:
    def test_shape_and_dtype(self):
        img, mask = blob_scene()
        d = extract_descriptor(img, mask)
        assert d.shape == (DESCRIPTOR_DIM,)
        assert np.all(np.isfinite(d))

    def test_translation_invariance(self):
        img_a, mask_a = blob_scene(at=(3, 4))
        img_b, mask_b = blob_scene(at=(15, 18))
        da = extract_descriptor(img_a, mask_a)
        db = extract_descriptor(img_b, mask_b)
        assert np.allclose(da, db)

    def test_empty_mask_rejected(self):
        img, _ = blob_scene()
        with pytest.raises(ValueError):
            extract_descriptor(img, np.zeros((32, 32), dtype=bool))

    def test_color_changes_histogram(self):
        img_a, mask = blob_scene(color=(250, 10, 10))
        img_b, _ = blob_scene(color=(10, 10, 250))
        da = extract_descriptor(img_a, mask)
        db = extract_descriptor(img_b, mask)
        assert not np.allclose(da[:24], db[:24])
        # shape block identical, same mask
        assert np.allclose(da[24:31], db[24:31])

    def test_histogram_normalized(self):
        img, mask = blob_scene()
        d = extract_descriptor(img, mask)
        assert d[:24].sum() == pytest.approx(3.0)

    def test_moment_block_rotation_invariant(self):
        _, mask = blob_scene(size=(5, 12))
        img = np.full((32, 32, 3), 77, dtype=np.uint8)
        d_orig = extract_descriptor(img, mask)
        mask_rot = np.rot90(mask).copy()
        d_rot = extract_descriptor(img, mask_rot)
        assert np.allclose(d_orig[24:31], d_rot[24:31], atol=1e-9)

    def test_size_changes_stats(self):
        img, mask_small = blob_scene(size=(4, 6))
        _, mask_big = blob_scene(size=(8, 20))
        ds = extract_descriptor(img, mask_small)
        db = extract_descriptor(img, mask_big)
        assert ds[31] != db[31]  # log area differs

    def test_single_pixel_instance(self):
        img, _ = blob_scene()
        mask = np.zeros((32, 32), dtype=bool)
        mask[7, 9] = True
        d = extract_descriptor(img, mask)
        assert np.all(np.isfinite(d))


class TestStandardizer:
    def test_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        X = rng.normal(3.0, 2.5, (100, 8))
        std = FeatureStandardizer().fit(X)
        Xs = std.transform(X)
        assert np.allclose(Xs.mean(axis=0), 0, atol=1e-12)
        assert np.allclose(Xs.std(axis=0), 1, atol=1e-9)

    def test_constant_column_guarded(self):
        X = np.ones((10, 3))
        Xs = FeatureStandardizer().fit_transform(X)
        assert np.all(np.isfinite(Xs))

    def test_unfitted_raises(self):
        with pytest.raises(RuntimeError):
            FeatureStandardizer().transform(np.zeros((2, 2)))

    def test_round_trip_dict(self):
        X = np.random.default_rng(1).normal(size=(20, 4))
        std = FeatureStandardizer().fit(X)
        clone = FeatureStandardizer.from_dict(std.to_dict())
        assert np.allclose(std.transform(X), clone.transform(X))


class TestProjectionHead:
    def test_unit_norm_output(self):
        rng = np.random.default_rng(2)
        head = ProjectionHead(seed=5)
        X = rng.normal(size=(17, DESCRIPTOR_DIM))
        Z = head.embed(X)
        assert Z.shape == (17, 16)
        assert np.allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-6)

    def test_deterministic_init(self):
        a = ProjectionHead(seed=3)
        b = ProjectionHead(seed=3)
        for pa, pb in zip(a.params, b.params):
            assert np.array_equal(pa, pb)
        c = ProjectionHead(seed=4)
        assert not np.array_equal(a.w1, c.w1)

    def test_round_trip_dict(self):
        head = ProjectionHead(seed=1)
        clone = ProjectionHead.from_dict(head.to_dict())
        X = np.random.default_rng(0).normal(size=(5, DESCRIPTOR_DIM))
        assert np.allclose(head.embed(X), clone.embed(X))


def naive_supcon(Z, ids, tau):
    """Direct per-anchor loop of the contrastive loss definition."""
    n = len(ids)
    losses = []
    for i in range(n):
        pos = [p for p in range(n) if p != i and ids[p] == ids[i]]
        if not pos:
            continue
        denom = sum(np.exp(Z[i] @ Z[a] / tau) for a in range(n) if a != i)
        term = 0.0
        for p in pos:
            term += np.log(np.exp(Z[i] @ Z[p] / tau) / denom)
        losses.append(-term / len(pos))
    return float(np.mean(losses))


class TestSupConLoss:
    def rand_batch(self, seed, n=10, d=5):
        rng = np.random.default_rng(seed)
        Z = rng.normal(size=(n, d))
        Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        ids = rng.integers(0, 3, size=n)
        if len(set(ids.tolist())) == n:  # ensure at least one positive pair
            ids[1] = ids[0]
        return Z, ids

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_naive_loop(self, seed):
        Z, ids = self.rand_batch(seed)
        assert supcon_loss(Z, ids, 0.1) == pytest.approx(
            naive_supcon(Z, ids, 0.1), rel=1e-10)

    def test_anchors_without_positives_skipped(self):
        rng = np.random.default_rng(7)
        Z = rng.normal(size=(5, 4))
        Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        ids = [0, 0, 1, 2, 3]  # only rows 0,1 have positives
        assert supcon_loss(Z, ids, 0.1) == pytest.approx(
            naive_supcon(Z, ids, 0.1), rel=1e-10)

    def test_degenerate_batch_raises(self):
        Z = np.eye(4)
        with pytest.raises(ValueError, match="degenerate"):
            supcon_loss(Z, [0, 1, 2, 3], 0.1)

    def test_too_few_embeddings(self):
        with pytest.raises(ValueError):
            supcon_loss(np.ones((1, 4)), [0], 0.1)

    def test_bad_temperature(self):
        Z = np.eye(3)
        with pytest.raises(ValueError):
            supcon_loss(Z, [0, 0, 1], 0.0)

    def test_gradient_matches_finite_differences(self):
        Z, ids = self.rand_batch(11, n=8, d=4)
        _, dz = supcon_loss_grad(Z, ids, 0.1)
        h = 1e-6
        for i in range(8):
            for j in range(4):
                zp = Z.copy()
                zm = Z.copy()
                zp[i, j] += h
                zm[i, j] -= h
                fd = (supcon_loss(zp, ids, 0.1) - supcon_loss(zm, ids, 0.1)) / (2 * h)
                assert dz[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_head_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        head = ProjectionHead(d_in=6, d_hidden=7, d_out=4, seed=2)
        X = rng.normal(size=(8, 6))
        ids = [0, 0, 1, 1, 2, 2, 0, 1]
        _, grads = head.loss_and_grads(X, ids, 0.1)
        h = 1e-6
        for p, g in zip(head.params, grads):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            probe = rng.choice(flat.size, size=min(25, flat.size), replace=False)
            for k in probe:
                old = flat[k]
                flat[k] = old + h
                up = head.loss_and_grads(X, ids, 0.1)[0]
                flat[k] = old - h
                dn = head.loss_and_grads(X, ids, 0.1)[0]
                flat[k] = old
                fd = (up - dn) / (2 * h)
                assert gflat[k] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def make_tubes():
    t0 = Tube(0, [(f, 0) for f in range(10)])
    t1 = Tube(1, [(f, 1) for f in range(5, 15)])    # co-occurs with t0
    t2 = Tube(2, [(f, 0) for f in range(100, 110)])  # far from t0 and t1
    t3 = Tube(3, [(f, 0) for f in range(20, 30)])    # neither, wrt t0
    return [t0, t1, t2, t3]


class TestTubeRelations:
    def test_co_occurrence(self):
        t0, t1, t2, t3 = make_tubes()
        assert tubes_co_occur(t0, t1)
        assert not tubes_co_occur(t0, t2)
        assert not tubes_co_occur(t0, t3)

    def test_far_apart(self):
        t0, t1, t2, t3 = make_tubes()
        assert tubes_far_apart(t0, t2, 50)
        assert not tubes_far_apart(t0, t3, 50)
        assert not tubes_far_apart(t0, t1, 50)


class TestSampleBatch:
    def test_batch_structure(self):
        tubes = make_tubes()
        rng = np.random.default_rng(0)
        batch = sample_batch(tubes, 16, rng)
        assert len(batch) == 16
        ids = [tid for tid, _ in batch]
        # four entries per tube slot, every anchor has three positives
        for grp in range(4):
            assert len(set(ids[grp * 4:(grp + 1) * 4])) == 1

    def test_entries_unique_for_long_tubes(self):
        tubes = make_tubes()
        rng = np.random.default_rng(1)
        for _ in range(20):
            batch = sample_batch(tubes, 8, rng)
            for grp in range(2):
                entries = [e for _, e in batch[grp * 4:(grp + 1) * 4]]
                assert len(set(entries)) == 4

    def test_preference_weights(self):
        # conditioned on the first tube being t0: co-occurring t1 twice as
        # likely as far-away t2; disallowed t3 never drawn
        tubes = make_tubes()
        rng = np.random.default_rng(2)
        counts = {1: 0, 2: 0, 3: 0}
        trials = 0
        for _ in range(6000):
            batch = sample_batch(tubes, 8, rng)
            first = batch[0][0]
            second = batch[4][0]
            if first != 0:
                continue
            trials += 1
            counts[second] = counts.get(second, 0) + 1
        assert trials > 1000
        assert counts[3] == 0
        ratio = counts[1] / max(counts[2], 1)
        assert 2.0 * 0.85 <= ratio <= 2.0 * 1.15

    def test_short_tubes_excluded(self):
        tubes = [Tube(0, [(0, 0)]), Tube(1, [(0, 1), (1, 1)])]
        with pytest.raises(ValueError):
            sample_batch(tubes, 8, np.random.default_rng(0))

    def test_tiny_batch_rejected(self):
        with pytest.raises(ValueError):
            sample_batch(make_tubes(), 4, np.random.default_rng(0))

    def test_fewer_tubes_than_slots_allows_repeats(self):
        tubes = [Tube(0, [(f, 0) for f in range(6)]),
                 Tube(1, [(f, 1) for f in range(6)])]
        batch = sample_batch(tubes, 16, np.random.default_rng(3))
        assert len(batch) == 16


def synthetic_training_set(seed=0, n_tubes=4, per_tube=12):
    """Descriptors drawn from one Gaussian blob per tube."""
    rng = np.random.default_rng(seed)
    X = []
    tubes = []
    row_of = {}
    row = 0
    for k in range(n_tubes):
        center = rng.normal(0, 3.0, DESCRIPTOR_DIM)
        entries = []
        for f in range(per_tube):
            X.append(center + rng.normal(0, 0.4, DESCRIPTOR_DIM))
            entry = (f, k)
            entries.append(entry)
            row_of[entry] = row
            row += 1
        tubes.append(Tube(k, entries))
    return np.array(X), TubeSet(tubes, per_tube), row_of


class TestTraining:
    def test_zero_epochs_returns_init(self):
        X, ts, row_of = synthetic_training_set()
        cfg = FeatTrainConfig(epochs=0, seed=9)
        head, _ = train_feature_head(X, ts, row_of, cfg)
        fresh = ProjectionHead(seed=9)
        for a, b in zip(head.params, fresh.params):
            assert np.array_equal(a, b)

    def test_training_separates_tubes(self):
        X, ts, row_of = synthetic_training_set(seed=1)
        cfg = FeatTrainConfig(epochs=40, lr=1e-3, batch_size=16, seed=0)
        head, std = train_feature_head(X, ts, row_of, cfg)
        Z = head.embed(std.transform(X))
        ids = np.repeat(np.arange(4), 12)
        sim = Z @ Z.T
        same = sim[(ids[:, None] == ids[None, :]) & ~np.eye(48, dtype=bool)]
        diff = sim[ids[:, None] != ids[None, :]]
        assert same.mean() - diff.mean() > 0.2

    def test_training_lowers_loss(self):
        X, ts, row_of = synthetic_training_set(seed=2)
        ids = np.repeat(np.arange(4), 12)
        std = FeatureStandardizer().fit(X)
        Xs = std.transform(X)
        init = ProjectionHead(seed=0)
        loss_before = supcon_loss(init.embed(Xs), ids, 0.1)
        cfg = FeatTrainConfig(epochs=30, lr=1e-3, batch_size=16, seed=0)
        head, _ = train_feature_head(X, ts, row_of, cfg)
        loss_after = supcon_loss(head.embed(Xs), ids, 0.1)
        assert loss_after < loss_before

    def test_deterministic(self):
        X, ts, row_of = synthetic_training_set(seed=3)
        cfg = FeatTrainConfig(epochs=5, lr=1e-3, batch_size=16, seed=4)
        h1, s1 = train_feature_head(X, ts, row_of, cfg)
        h2, s2 = train_feature_head(X, ts, row_of, cfg)
        for a, b in zip(h1.params, h2.params):
            assert np.array_equal(a, b)


class TestAdam:
    def test_converges_on_quadratic(self):
        # minimize ||x - 3||^2, gradient 2(x - 3)
        x = np.array([0.0])
        opt = Adam([x], lr=0.1)
        for _ in range(500):
            opt.step([2 * (x - 3.0)])
        assert abs(x[0] - 3.0) < 1e-3

    def test_bias_correction_first_step(self):
        # after one step the update is lr * g / (|g| + eps), independent of
        # the raw moment scale
        x = np.array([10.0])
        opt = Adam([x], lr=0.5)
        opt.step([np.array([4.0])])
        assert x[0] == pytest.approx(10.0 - 0.5, abs=1e-6)
