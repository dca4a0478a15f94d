import math

import numpy as np
import pytest

from saflab.weak_classify import (
    ClassifierMLP,
    ClsTrainConfig,
    ClusterModel,
    assignment_cost,
    auto_label_prototypes,
    count_label_sets,
    enumerate_label_sets,
    kmeans_pp,
    match_weak_labels,
    propagate_labels,
    select_prototypes,
    train_student,
    train_teacher,
)


def make_blobs(rng, centers, per=15, sigma=0.3):
    xs = []
    ys = []
    for c, mu in enumerate(centers):
        xs.append(rng.normal(mu, sigma, (per, len(mu))))
        ys.extend([c] * per)
    return np.concatenate(xs, axis=0), np.asarray(ys)


def naive_lloyd(X, k, rng, iters=60):
    """Plain random-init Lloyd, for the restart oracle."""
    centers = X[rng.choice(len(X), k, replace=False)].copy()
    assign = np.zeros(len(X), dtype=np.int64)
    for _ in range(iters):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for c in range(k):
            if (assign == c).any():
                centers[c] = X[assign == c].mean(axis=0)
    return ((X - centers[assign]) ** 2).sum()


class TestKMeans:
    def test_shapes_and_determinism(self):
        rng = np.random.default_rng(0)
        X, _ = make_blobs(rng, [(0, 0), (8, 0), (0, 8)])
        a = kmeans_pp(X, 3, seed=7)
        b = kmeans_pp(X, 3, seed=7)
        assert a.centroids.shape == (3, 2)
        assert a.assignment.shape == (45,)
        assert np.array_equal(a.centroids, b.centroids)
        assert np.array_equal(a.assignment, b.assignment)

    def test_inertia_close_to_restart_oracle(self):
        # D^2 seeding plus Lloyd should land within 5% of the best of many
        # random restarts.
        rng = np.random.default_rng(1)
        X, _ = make_blobs(rng, [(0, 0), (8, 0), (0, 8), (8, 8)], per=15)
        best = min(naive_lloyd(X, 4, np.random.default_rng(i))
                   for i in range(100))
        model = kmeans_pp(X, 4, seed=3)
        assert model.inertia <= 1.05 * best + 1e-9

    def test_recovers_separated_blobs(self):
        rng = np.random.default_rng(2)
        X, y = make_blobs(rng, [(0, 0), (20, 0), (0, 20)], per=20, sigma=0.2)
        model = kmeans_pp(X, 3, seed=0)
        # each cluster should be pure
        for c in range(3):
            members = y[model.assignment == c]
            assert members.size > 0
            assert np.unique(members).size == 1

    def test_one_cluster_per_point(self):
        X = np.array([[0.0], [5.0], [9.0]])
        model = kmeans_pp(X, 3, seed=0)
        assert model.inertia == pytest.approx(0.0)
        assert np.unique(model.assignment).size == 3

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            kmeans_pp(np.zeros((2, 3)), 5)
        with pytest.raises(ValueError):
            kmeans_pp(np.zeros((2, 3)), 0)

    def test_all_identical_points(self):
        # Seeding distances are all zero and the spare cluster can never win
        # a point; the run must still terminate with every point together.
        X = np.ones((6, 2)) * 3.0
        model = kmeans_pp(X, 2, seed=0)
        assert np.array_equal(model.assignment, np.zeros(6, dtype=np.int64))
        assert model.inertia == pytest.approx(0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        X, _ = make_blobs(rng, [(0, 0), (6, 6)])
        model = kmeans_pp(X, 2, seed=1)
        back = ClusterModel.from_dict(model.to_dict())
        assert np.allclose(back.centroids, model.centroids)
        assert np.array_equal(back.assignment, model.assignment)


class TestPrototypes:
    def test_nearest_member_is_chosen(self):
        X = np.array([[0.0], [0.9], [2.0], [10.0], [11.5]])
        model = ClusterModel(np.array([[1.0], [10.5]]),
                             np.array([0, 0, 0, 1, 1]))
        protos = select_prototypes(model, X)
        assert protos == [(0, 1), (1, 3)]

    def test_tie_goes_to_lowest_row(self):
        X = np.array([[0.0], [2.0]])
        model = ClusterModel(np.array([[1.0]]), np.array([0, 0]))
        assert select_prototypes(model, X) == [(0, 0)]

    def test_empty_cluster_rejected(self):
        model = ClusterModel(np.zeros((2, 1)), np.array([0, 0]))
        with pytest.raises(ValueError, match="empty"):
            select_prototypes(model, np.zeros((2, 1)))

    def test_auto_label_picks_best_overlap(self):
        pred = np.zeros((8, 8), dtype=bool)
        pred[2:6, 2:6] = True
        gt_a = np.zeros((8, 8), dtype=bool)
        gt_a[2:6, 2:4] = True   # IoU 8/16
        gt_b = np.zeros((8, 8), dtype=bool)
        gt_b[2:6, 2:6] = True   # IoU 1
        labels = auto_label_prototypes([pred], [[(gt_a, 4), (gt_b, 7)]])
        assert labels == [7]

    def test_auto_label_none_without_overlap(self):
        pred = np.zeros((8, 8), dtype=bool)
        pred[0:2, 0:2] = True
        gt = np.zeros((8, 8), dtype=bool)
        gt[6:8, 6:8] = True
        assert auto_label_prototypes([pred], [[(gt, 1)]]) == [None]

    def test_propagate_spreads_and_masks(self):
        model = ClusterModel(np.zeros((3, 1)), np.array([0, 0, 1, 1, 2]))
        out = propagate_labels(model, {0: 5, 1: None, 2: 7})
        assert np.array_equal(out, [5, 5, -1, -1, 7])


class TestEnumeration:
    def test_fewer_instances_than_classes(self):
        got = enumerate_label_sets(1, {1, 0})
        assert got == [(0,), (1,)]
        got = enumerate_label_sets(2, [0, 1, 2])
        assert got == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]

    def test_equal_counts_are_permutations(self):
        got = enumerate_label_sets(2, {0, 1})
        assert got == [(0, 1), (1, 0)]

    def test_more_instances_than_classes(self):
        got = enumerate_label_sets(3, {0, 1})
        assert len(got) == 8
        assert got[0] == (0, 0, 0)
        assert got[-1] == (1, 1, 1)
        assert got == sorted(got)

    def test_counts_match_closed_form(self):
        for n, weak in [(1, {0, 1, 2}), (3, {0, 1, 2}), (5, {0, 1, 2}),
                        (2, {4, 9}), (4, {1, 2, 3, 5})]:
            assert len(enumerate_label_sets(n, weak)) == \
                count_label_sets(n, len(weak))

    def test_duplicates_in_weak_set_collapse(self):
        assert enumerate_label_sets(1, [2, 2, 2]) == [(2,)]

    def test_blow_up_is_detected_without_materializing(self):
        # perm(10, 8) = 1814400 candidates
        assert math.perm(10, 8) > 1_000_000
        with pytest.raises(RuntimeError, match="combinatorial blow-up"):
            enumerate_label_sets(8, set(range(10)))
        # 2**21 functions
        with pytest.raises(RuntimeError, match="combinatorial blow-up"):
            enumerate_label_sets(21, {0, 1})

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            enumerate_label_sets(2, set())
        with pytest.raises(ValueError):
            enumerate_label_sets(0, {0, 1})


class TestAssignmentCost:
    def test_hand_computed(self):
        probs = np.array([[0.8, 0.2], [0.4, 0.6]])
        want = -(np.log(0.8) + np.log(0.6)) / 2
        assert assignment_cost(probs, (0, 1)) == pytest.approx(want)

    def test_two_instance_example(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]])
        assert assignment_cost(probs, (0, 1)) == pytest.approx(
            (-np.log(0.7) - np.log(0.8)) / 2)
        assert assignment_cost(probs, (0, 1)) == pytest.approx(0.290, abs=5e-3)
        assert assignment_cost(probs, (1, 0)) == pytest.approx(
            (-np.log(0.2) - np.log(0.1)) / 2)
        assert match_weak_labels(probs, {0, 1}) == (0, 1)

    def test_uniform_probs_cost_log_n(self):
        probs = np.full((3, 4), 0.25)
        for tup in [(0, 1, 2), (3, 3, 3), (2, 0, 1)]:
            assert assignment_cost(probs, tup) == pytest.approx(np.log(4))

    def test_single_instance_single_weak_label(self):
        probs = np.array([[0.99, 0.01]])
        assert match_weak_labels(probs, {1}) == (1,)

    def test_zero_probability_is_clamped(self):
        probs = np.array([[1.0, 0.0]])
        assert np.isfinite(assignment_cost(probs, (1,)))
        assert assignment_cost(probs, (1,)) == pytest.approx(-np.log(1e-7))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            assignment_cost(np.full((2, 2), 0.5), (0,))

    def test_match_equals_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(1, 4))
            weak = set(rng.choice(5, size=int(rng.integers(1, 4)),
                                  replace=False).tolist())
            probs = rng.dirichlet(np.ones(5), size=n)
            got = match_weak_labels(probs, weak)
            candidates = enumerate_label_sets(n, weak)
            costs = [assignment_cost(probs, c) for c in candidates]
            assert got == candidates[int(np.argmin(costs))]

    def test_match_tie_takes_first_candidate(self):
        probs = np.full((2, 2), 0.5)
        assert match_weak_labels(probs, {0, 1}) == (0, 1)

    def test_match_prefers_confident_assignment(self):
        probs = np.array([[0.05, 0.95], [0.9, 0.1]])
        assert match_weak_labels(probs, {0, 1}) == (1, 0)


class TestClassifier:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        model = ClassifierMLP(5, 3, d_hidden=7, seed=2)
        X = rng.normal(size=(6, 5))
        y = rng.integers(0, 3, size=6)
        _, grads, _ = model.loss_and_grads(X, y)
        h = 1e-6
        for p, g in zip(model.params, grads):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            probes = rng.choice(flat.size, size=min(20, flat.size),
                                replace=False)
            for i in probes:
                orig = flat[i]
                flat[i] = orig + h
                up, _, _ = model.loss_and_grads(X, y)
                flat[i] = orig - h
                dn, _, _ = model.loss_and_grads(X, y)
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                assert gflat[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_running_stats_pure_in_loss(self):
        model = ClassifierMLP(4, 2, d_hidden=6, seed=0)
        before = model.run_mean.copy()
        rng = np.random.default_rng(0)
        model.loss_and_grads(rng.normal(size=(5, 4)),
                             rng.integers(0, 2, size=5))
        assert np.array_equal(model.run_mean, before)

    def test_single_row_batch_rejected(self):
        model = ClassifierMLP(4, 2)
        with pytest.raises(ValueError):
            model.loss_and_grads(np.zeros((1, 4)), np.zeros(1, dtype=int))

    def test_fits_separated_blobs(self):
        rng = np.random.default_rng(6)
        X, y = make_blobs(rng, [(0, 0), (6, 0), (0, 6)], per=40, sigma=0.5)
        cfg = ClsTrainConfig(epochs=150, lr=1e-2, batch_size=32,
                             seed=0, d_hidden=32)
        model = train_teacher(X, y, n_classes=3, cfg=cfg)
        pred = model.predict_proba(X).argmax(axis=1)
        assert (pred == y).mean() >= 0.95

    def test_prediction_independent_of_batching(self):
        rng = np.random.default_rng(7)
        X, y = make_blobs(rng, [(0, 0), (5, 5)], per=20, sigma=0.4)
        cfg = ClsTrainConfig(epochs=30, lr=1e-2, batch_size=16,
                             seed=0, d_hidden=16)
        model = train_teacher(X, y, n_classes=2, cfg=cfg)
        whole = model.predict_proba(X)
        rows = np.stack([model.predict_proba(x)[0] for x in X])
        assert np.allclose(whole, rows)

    def test_classify_returns_argmax_and_probs(self):
        rng = np.random.default_rng(8)
        X, y = make_blobs(rng, [(0, 0), (8, 8)], per=20, sigma=0.3)
        cfg = ClsTrainConfig(epochs=40, lr=1e-2, batch_size=16,
                             seed=0, d_hidden=16)
        model = train_teacher(X, y, n_classes=2, cfg=cfg)
        cls, probs = model.classify(np.array([8.0, 8.0]))
        assert cls == 1
        assert probs.shape == (2,)
        assert probs.sum() == pytest.approx(1.0)

    def test_degenerate_labels_rejected(self):
        model = ClassifierMLP(3, 2)
        with pytest.raises(ValueError, match="degenerate labels"):
            model.train(np.zeros((4, 3)), np.zeros(4, dtype=int))

    def test_labels_outside_range_rejected(self):
        model = ClassifierMLP(3, 2)
        with pytest.raises(ValueError):
            model.train(np.zeros((4, 3)), np.array([0, 1, 2, 1]))

    def test_unlabelled_rows_excluded_from_teacher(self):
        rng = np.random.default_rng(9)
        X, y = make_blobs(rng, [(0, 0), (7, 0)], per=20, sigma=0.3)
        labels = y.copy()
        labels[::3] = -1  # unlabelled clusters drop out
        cfg = ClsTrainConfig(epochs=60, lr=1e-2, batch_size=16,
                             seed=0, d_hidden=16)
        model = train_teacher(X, labels, n_classes=2, cfg=cfg)
        pred = model.predict_proba(X).argmax(axis=1)
        assert (pred == y).mean() >= 0.95
        with pytest.raises(ValueError, match="no labelled rows"):
            train_teacher(X, np.full(len(X), -1), n_classes=2, cfg=cfg)

    def test_leftover_single_row_batch_is_skipped(self):
        rng = np.random.default_rng(10)
        X, y = make_blobs(rng, [(0, 0), (5, 0)], per=20, sigma=0.3)
        X, y = X[:33], y[:33]  # 32 + 1 leftover
        cfg = ClsTrainConfig(epochs=5, lr=1e-2, batch_size=32,
                             seed=0, d_hidden=8)
        ClassifierMLP(2, 2, d_hidden=8, seed=0).train(X, y, cfg)

    def test_training_deterministic(self):
        rng = np.random.default_rng(12)
        X, y = make_blobs(rng, [(0, 0), (5, 5)], per=15, sigma=0.4)
        cfg = ClsTrainConfig(epochs=10, lr=1e-2, batch_size=16,
                            seed=3, d_hidden=8)
        a = ClassifierMLP(2, 2, d_hidden=8, seed=1).train(X, y, cfg)
        b = ClassifierMLP(2, 2, d_hidden=8, seed=1).train(X, y, cfg)
        assert np.array_equal(a.w1, b.w1)
        assert np.array_equal(a.run_mean, b.run_mean)

    def test_round_trip_preserves_predictions(self):
        rng = np.random.default_rng(13)
        X, y = make_blobs(rng, [(0, 0), (6, 6)], per=15, sigma=0.4)
        cfg = ClsTrainConfig(epochs=20, lr=1e-2, batch_size=16,
                             seed=0, d_hidden=8)
        model = ClassifierMLP(2, 2, d_hidden=8, seed=0).train(X, y, cfg)
        back = ClassifierMLP.from_dict(model.to_dict())
        assert np.allclose(back.predict_proba(X), model.predict_proba(X))


class TestStudent:
    def test_matching_and_student_recover_labels(self):
        # Teacher sees a labelled subset; the student is trained purely from
        # weak presence sets matched per frame.
        rng = np.random.default_rng(14)
        centers = [(0.0, 0.0), (8.0, 0.0), (0.0, 8.0)]
        X, y = make_blobs(rng, centers, per=30, sigma=0.4)
        cfg = ClsTrainConfig(epochs=150, lr=1e-2, batch_size=32,
                             seed=0, d_hidden=32)
        teacher = train_teacher(X, y, n_classes=3, cfg=cfg)

        frames = []
        truth = []
        for _ in range(40):
            classes = rng.choice(3, size=2, replace=False)
            emb = np.stack([rng.normal(centers[c], 0.4) for c in classes])
            frames.append((emb, set(int(c) for c in classes)))
            truth.append(tuple(int(c) for c in classes))
        frames.append((np.zeros((0, 2)), {0}))   # skipped: no instances
        frames.append((np.zeros((1, 2)), set()))  # skipped: no weak labels

        student, matched = train_student(frames, teacher, n_classes=3,
                                         cfg=cfg)
        assert matched[-1] is None and matched[-2] is None
        hits = sum(m == t for m, t in zip(matched[:40], truth))
        assert hits >= 38

        probe, probe_y = make_blobs(np.random.default_rng(15), centers,
                                    per=10, sigma=0.4)
        pred = student.predict_proba(probe).argmax(axis=1)
        assert (pred == probe_y).mean() >= 0.9

    def test_all_frames_skipped_rejected(self):
        teacher = ClassifierMLP(2, 2)
        with pytest.raises(ValueError):
            train_student([(np.zeros((0, 2)), {0})], teacher, n_classes=2)
