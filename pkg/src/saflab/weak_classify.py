"""Weak-label instance classification.

Embeddings of predicted instances are clustered (k-means++), one prototype
per cluster is labelled (by a human through the labelling service, or
automatically from ground truth), the labels propagate over clusters to train
a teacher classifier, and the teacher's per-frame probabilities are matched
against the frame's weak presence labels by enumerating candidate label
assignments and taking the cheapest. The matched labels then train the
student.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .eval_metrics import iou
from .features import Adam

ENUMERATION_CAP = 1_000_000
PROB_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# clustering and prototypes


@dataclass
class ClusterModel:
    centroids: np.ndarray   # (k, d)
    assignment: np.ndarray  # (n,)

    @property
    def n_clusters(self):
        return self.centroids.shape[0]

    @property
    def inertia(self):
        return 0.0 if self.assignment.size == 0 else self._inertia

    def to_dict(self):
        return {"centroids": self.centroids.tolist(),
                "assignment": self.assignment.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centroids"], dtype=np.float64),
                   np.asarray(d["assignment"], dtype=np.int64))


def kmeans_pp(X, n_clusters, seed=0, max_iter=300):
    """k-means with D^2 seeding and Lloyd iterations to an assignment
    fixpoint. Empty clusters are re-seeded at the point farthest from its
    assigned centroid. Deterministic for a given seed."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if n < n_clusters:
        raise ValueError("cannot make %d clusters out of %d points"
                         % (n_clusters, n))
    rng = np.random.default_rng(seed)

    centers = np.empty((n_clusters, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, n_clusters):
        total = d2.sum()
        if total == 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))

    prev = None
    assignment = None
    for _ in range(max_iter):
        dist2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assignment = np.argmin(dist2, axis=1)  # ties to the lowest cluster
        if prev is not None and np.array_equal(assignment, prev):
            break
        point_d2 = dist2[np.arange(n), assignment]
        for c in range(n_clusters):
            members = assignment == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(point_d2))
                centers[c] = X[far]
                point_d2[far] = 0.0
        prev = assignment

    model = ClusterModel(centers, assignment)
    model._inertia = float(((X - centers[assignment]) ** 2).sum())
    return model


def select_prototypes(model, X):
    """The member nearest its cluster centroid, per cluster.

    Returns [(cluster_id, row index)] for every cluster in id order; ties go
    to the lowest row index.
    """
    X = np.asarray(X, dtype=np.float64)
    out = []
    for c in range(model.n_clusters):
        members = np.nonzero(model.assignment == c)[0]
        if members.size == 0:
            raise ValueError("cluster %d is empty" % c)
        d2 = ((X[members] - model.centroids[c]) ** 2).sum(axis=1)
        out.append((c, int(members[int(np.argmin(d2))])))
    return out


def auto_label_prototypes(pred_masks, gt_instances_per_proto):
    """Label each prototype by the ground-truth class it overlaps most.

    pred_masks: the prototype instances' predicted masks.
    gt_instances_per_proto: per prototype, a list of (gt mask, class id) for
    its frame. A prototype overlapping nothing gets label None.
    """
    labels = []
    for pred, gts in zip(pred_masks, gt_instances_per_proto):
        best = 0.0
        best_cls = None
        for gt_mask, cls in gts:
            v = iou(pred, gt_mask)
            if v > best:
                best = v
                best_cls = cls
        labels.append(best_cls)
    return labels


def propagate_labels(model, cluster_labels):
    """Spread prototype labels over their clusters.

    cluster_labels: {cluster_id: label or None}. Rows of clusters labelled
    None get -1 (excluded from teacher training).
    """
    out = np.full(model.assignment.shape[0], -1, dtype=np.int64)
    for c, label in cluster_labels.items():
        if label is None:
            continue
        out[model.assignment == c] = label
    return out


# ---------------------------------------------------------------------------
# classifier


@dataclass
class ClsTrainConfig:
    epochs: int = 40
    lr: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    d_hidden: int = 512


class ClassifierMLP:
    """Two-layer classifier with batch normalization before the ReLU.

    Batch statistics drive training; inference uses the frozen running
    estimates, so predictions do not depend on how queries are batched.
    """

    BN_EPS = 1e-5
    BN_MOMENTUM = 0.1

    def __init__(self, d_in, n_classes, d_hidden=512, seed=0):
        rng = np.random.default_rng(seed)
        self.w1 = rng.uniform(-1, 1, (d_in, d_hidden)) / np.sqrt(d_in)
        self.b1 = rng.uniform(-1, 1, d_hidden) / np.sqrt(d_in)
        self.gamma = np.ones(d_hidden)
        self.beta = np.zeros(d_hidden)
        self.w2 = rng.uniform(-1, 1, (d_hidden, n_classes)) / np.sqrt(d_hidden)
        self.b2 = rng.uniform(-1, 1, n_classes) / np.sqrt(d_hidden)
        self.run_mean = np.zeros(d_hidden)
        self.run_var = np.ones(d_hidden)
        self.n_classes = n_classes

    @property
    def params(self):
        return [self.w1, self.b1, self.gamma, self.beta, self.w2, self.b2]

    @staticmethod
    def _softmax(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        a = X @ self.w1 + self.b1
        xhat = (a - self.run_mean) / np.sqrt(self.run_var + self.BN_EPS)
        r = np.maximum(self.gamma * xhat + self.beta, 0.0)
        return self._softmax(r @ self.w2 + self.b2)

    def classify(self, embedding):
        probs = self.predict_proba(embedding)[0]
        return int(np.argmax(probs)), probs

    def loss_and_grads(self, X, y):
        """Cross-entropy loss and parameter gradients using batch statistics
        (pure: running estimates are not touched here)."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        bsz = X.shape[0]
        if bsz < 2:
            raise ValueError("batch norm needs at least two rows")

        a = X @ self.w1 + self.b1
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        std = np.sqrt(var + self.BN_EPS)
        xhat = (a - mu) / std
        bn = self.gamma * xhat + self.beta
        r = np.maximum(bn, 0.0)
        logits = r @ self.w2 + self.b2
        probs = self._softmax(logits)
        loss = float(-np.log(np.clip(probs[np.arange(bsz), y],
                                     PROB_CLAMP, None)).mean())

        dlogits = probs.copy()
        dlogits[np.arange(bsz), y] -= 1.0
        dlogits /= bsz
        gw2 = r.T @ dlogits
        gb2 = dlogits.sum(axis=0)
        dr = dlogits @ self.w2.T
        dbn = dr * (bn > 0)
        ggamma = (dbn * xhat).sum(axis=0)
        gbeta = dbn.sum(axis=0)
        dxhat = dbn * self.gamma
        da = (dxhat - dxhat.mean(axis=0)
              - xhat * (dxhat * xhat).mean(axis=0)) / std
        gw1 = X.T @ da
        gb1 = da.sum(axis=0)
        return loss, [gw1, gb1, ggamma, gbeta, gw2, gb2], (mu, var)

    def train(self, X, y, cfg=None):
        if cfg is None:
            cfg = ClsTrainConfig()
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] != y.shape[0]:
            raise ValueError("one label per row required")
        if np.unique(y).size < 2:
            raise ValueError("degenerate labels: need at least two classes")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("labels outside the class range")

        rng = np.random.default_rng(cfg.seed)
        opt = Adam(self.params, cfg.lr)
        n = X.shape[0]
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                rows = order[start:start + cfg.batch_size]
                if rows.size < 2:
                    continue  # batch statistics are meaningless on one row
                loss, grads, (mu, var) = self.loss_and_grads(X[rows], y[rows])
                if not np.isfinite(loss):
                    raise RuntimeError("non-finite classifier loss at epoch %d"
                                       % epoch)
                opt.step(grads)
                m = self.BN_MOMENTUM
                self.run_mean = (1 - m) * self.run_mean + m * mu
                self.run_var = (1 - m) * self.run_var + m * var
        return self

    def to_dict(self):
        return {"w1": self.w1.tolist(), "b1": self.b1.tolist(),
                "gamma": self.gamma.tolist(), "beta": self.beta.tolist(),
                "w2": self.w2.tolist(), "b2": self.b2.tolist(),
                "run_mean": self.run_mean.tolist(),
                "run_var": self.run_var.tolist(),
                "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d):
        out = cls.__new__(cls)
        out.w1 = np.asarray(d["w1"], dtype=np.float64)
        out.b1 = np.asarray(d["b1"], dtype=np.float64)
        out.gamma = np.asarray(d["gamma"], dtype=np.float64)
        out.beta = np.asarray(d["beta"], dtype=np.float64)
        out.w2 = np.asarray(d["w2"], dtype=np.float64)
        out.b2 = np.asarray(d["b2"], dtype=np.float64)
        out.run_mean = np.asarray(d["run_mean"], dtype=np.float64)
        out.run_var = np.asarray(d["run_var"], dtype=np.float64)
        out.n_classes = int(d["n_classes"])
        return out


def train_teacher(X, labels, n_classes, cfg=None):
    """Train the prototype-label classifier on rows with a real label."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels >= 0
    if not keep.any():
        raise ValueError("no labelled rows")
    if cfg is None:
        cfg = ClsTrainConfig()
    model = ClassifierMLP(X.shape[1], n_classes, cfg.d_hidden, seed=cfg.seed)
    model.train(X[keep], labels[keep], cfg)
    return model


# ---------------------------------------------------------------------------
# weak-label matching


def count_label_sets(n_instances, n_weak):
    if n_instances > n_weak:
        return n_weak ** n_instances
    # injective assignments: n_weak * (n_weak - 1) * ...
    return math.perm(n_weak, n_instances)


def enumerate_label_sets(n_instances, weak_labels):
    """All candidate label tuples for n instances under a weak presence set.

    Fewer instances than present classes: injective assignments (each class
    used at most once). Equal: permutations of the full set. More instances:
    every function from instances to the present classes. Tuples come out in
    lexicographic order of the sorted label set.
    """
    weak = tuple(sorted(set(weak_labels)))
    if not weak:
        raise ValueError("empty weak label set")
    if n_instances < 1:
        raise ValueError("no instances to label")
    total = count_label_sets(n_instances, len(weak))
    if total > ENUMERATION_CAP:
        raise RuntimeError(
            "combinatorial blow-up: %d candidate label sets for %d instances "
            "over %d classes (cap %d)"
            % (total, n_instances, len(weak), ENUMERATION_CAP))
    if n_instances > len(weak):
        return list(itertools.product(weak, repeat=n_instances))
    return list(itertools.permutations(weak, n_instances))


def assignment_cost(probs, label_tuple):
    """Mean negative log probability of assigning label_tuple to the rows of
    probs, with probabilities clamped away from zero."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = list(label_tuple)
    if probs.shape[0] != len(labels):
        raise ValueError("one label per instance required")
    p = np.clip(probs[np.arange(len(labels)), labels],
                PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.log(p).mean())


def match_weak_labels(probs, weak_labels):
    """The cheapest candidate label tuple under the assignment cost; ties go
    to the earliest tuple in enumeration order."""
    probs = np.asarray(probs, dtype=np.float64)
    candidates = enumerate_label_sets(probs.shape[0], weak_labels)
    cand = np.asarray(candidates, dtype=np.int64)
    logp = -np.log(np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP))
    costs = logp[np.arange(cand.shape[1])[None, :], cand].mean(axis=1)
    return candidates[int(np.argmin(costs))]


def train_student(frame_data, teacher, n_classes, cfg=None):
    """Match every frame's instances against its weak labels with the frozen
    teacher, then train the student on the matched labels.

    frame_data: list of (embeddings (m, e), weak label set) per frame; frames
    with no instances or an empty weak set are skipped.
    Returns (student, matched) where matched[i] is the label tuple for frame
    i or None if it was skipped.
    """
    if cfg is None:
        cfg = ClsTrainConfig()
    xs = []
    ys = []
    matched = []
    for emb, weak in frame_data:
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        if emb.shape[0] == 0 or not weak:
            matched.append(None)
            continue
        labels = match_weak_labels(teacher.predict_proba(emb), weak)
        matched.append(labels)
        xs.append(emb)
        ys.extend(labels)
    if not xs:
        raise ValueError("no frames with instances and weak labels")
    X = np.concatenate(xs, axis=0)
    y = np.asarray(ys, dtype=np.int64)
    student = ClassifierMLP(X.shape[1], n_classes, cfg.d_hidden, seed=cfg.seed)
    student.train(X, y, cfg)
    return student, matched
