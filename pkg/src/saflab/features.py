"""Instance appearance features and tube-contrastive embedding learning.

Each predicted instance gets a 48-d hand-crafted descriptor (color histogram,
invariant shape moments, size/intensity statistics). A small two-layer
projection head maps standardized descriptors onto the unit sphere and is
trained with a supervised contrastive loss where instances of the same tube
are the positives. Batches are built from a few tubes at a time, preferring
tube pairs that either co-occur in some frame (guaranteed different objects)
or are far apart in time (likely different arrangements).
"""

from dataclasses import dataclass

import numpy as np

DESCRIPTOR_DIM = 48


def extract_descriptor(image, instance_mask):
    """48-d translation-invariant appearance/shape descriptor of one instance.

    Layout: 24 color histogram bins (8 per channel over the masked pixels,
    normalized), 7 log-scaled rotation/scale-invariant moment combinations of
    the mask, 17 shape and intensity statistics.
    """
    mask = np.asarray(instance_mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("empty instance mask")
    if image.shape[:2] != mask.shape:
        raise ValueError("image and mask shapes differ")

    pix = image[ys, xs].astype(np.float64)
    if pix.ndim == 1:
        pix = np.repeat(pix[:, None], 3, axis=1)

    hist = []
    for c in range(3):
        h, _ = np.histogram(pix[:, c], bins=8, range=(0.0, 256.0))
        hist.append(h / xs.size)
    hist = np.concatenate(hist)

    moments = _invariant_moments(xs, ys)

    area = float(xs.size)
    inner = _boundary_count(mask)
    w_box = float(xs.max() - xs.min() + 1)
    h_box = float(ys.max() - ys.min() + 1)
    cov = np.cov(np.stack([xs, ys]).astype(np.float64)) if xs.size > 1 \
        else np.zeros((2, 2))
    evals = np.sort(np.linalg.eigvalsh(np.atleast_2d(cov)))[::-1]
    lam1, lam2 = float(max(evals[0], 0.0)), float(max(evals[-1], 0.0))
    gray = pix.mean(axis=1)
    stats = np.array([
        np.log(area),
        np.log(inner + 1.0),
        inner ** 2 / (4.0 * np.pi * area),
        np.log(w_box),
        np.log(h_box),
        w_box / h_box,
        area / (w_box * h_box),
        np.log(np.sqrt(lam1) + 1.0),
        np.log(np.sqrt(lam2) + 1.0),
        np.log(lam1 / (lam2 + 1e-9) + 1.0),
        gray.mean() / 255.0,
        gray.std() / 255.0,
        pix[:, 0].mean() / 255.0,
        pix[:, 1].mean() / 255.0,
        pix[:, 2].mean() / 255.0,
        np.percentile(gray, 10) / 255.0,
        np.percentile(gray, 90) / 255.0,
    ])

    out = np.concatenate([hist, moments, stats])
    assert out.shape == (DESCRIPTOR_DIM,)
    return out


def _boundary_count(mask):
    from .maskops import boundary_inner
    return float(boundary_inner(mask).sum())


def _invariant_moments(xs, ys):
    """The seven classic invariant combinations of normalized central
    moments, squashed through arcsinh to keep their wild scales usable."""
    x = xs - xs.mean()
    y = ys - ys.mean()
    m00 = float(xs.size)

    def mu(p, q):
        return float(np.sum(x ** p * y ** q))

    def eta(p, q):
        return mu(p, q) / m00 ** (1.0 + (p + q) / 2.0)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    h1 = n20 + n02
    h2 = (n20 - n02) ** 2 + 4 * n11 ** 2
    h3 = (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2
    h4 = (n30 + n12) ** 2 + (n21 + n03) ** 2
    h5 = (n30 - 3 * n12) * (n30 + n12) * ((n30 + n12) ** 2 - 3 * (n21 + n03) ** 2) + \
         (3 * n21 - n03) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2)
    h6 = (n20 - n02) * ((n30 + n12) ** 2 - (n21 + n03) ** 2) + \
         4 * n11 * (n30 + n12) * (n21 + n03)
    h7 = (3 * n21 - n03) * (n30 + n12) * ((n30 + n12) ** 2 - 3 * (n21 + n03) ** 2) - \
         (n30 - 3 * n12) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2)
    return np.arcsinh(1e3 * np.array([h1, h2, h3, h4, h5, h6, h7]))


class FeatureStandardizer:
    """Per-dimension mean/std scaling fitted on the training descriptors."""

    def __init__(self):
        self.mean = None
        self.std = None

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.mean = X.mean(axis=0)
        self.std = np.maximum(X.std(axis=0), 1e-8)
        return self

    def transform(self, X):
        if self.mean is None:
            raise RuntimeError("standardizer not fitted")
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def fit_transform(self, X):
        return self.fit(X).transform(X)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        out = cls()
        out.mean = np.asarray(d["mean"], dtype=np.float64)
        out.std = np.asarray(d["std"], dtype=np.float64)
        return out


# ---------------------------------------------------------------------------
# projection head


class ProjectionHead:
    """48 -> 64 -> 16 MLP with ReLU, output L2-normalized row-wise."""

    def __init__(self, d_in=DESCRIPTOR_DIM, d_hidden=64, d_out=16, seed=0):
        rng = np.random.default_rng(seed)
        self.w1 = rng.uniform(-1, 1, (d_in, d_hidden)) / np.sqrt(d_in)
        self.b1 = rng.uniform(-1, 1, d_hidden) / np.sqrt(d_in)
        self.w2 = rng.uniform(-1, 1, (d_hidden, d_out)) / np.sqrt(d_hidden)
        self.b2 = rng.uniform(-1, 1, d_out) / np.sqrt(d_hidden)

    @property
    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def _forward(self, X):
        pre = X @ self.w1 + self.b1
        hid = np.maximum(pre, 0.0)
        y = hid @ self.w2 + self.b2
        norms = np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
        z = y / norms
        return pre, hid, y, norms, z

    def embed(self, X):
        """Unit-norm embeddings for standardized descriptors."""
        return self._forward(np.asarray(X, dtype=np.float64))[4]

    def loss_and_grads(self, X, tube_ids, tau=0.1):
        """Contrastive loss on a batch plus gradients for every parameter."""
        X = np.asarray(X, dtype=np.float64)
        pre, hid, y, norms, z = self._forward(X)
        loss, dz = supcon_loss_grad(z, tube_ids, tau)
        # back through row normalization: y / ||y||
        dy = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms
        gw2 = hid.T @ dy
        gb2 = dy.sum(axis=0)
        dh = dy @ self.w2.T
        dh[pre <= 0] = 0.0
        gw1 = X.T @ dh
        gb1 = dh.sum(axis=0)
        return loss, [gw1, gb1, gw2, gb2]

    def to_dict(self):
        return {"w1": self.w1.tolist(), "b1": self.b1.tolist(),
                "w2": self.w2.tolist(), "b2": self.b2.tolist()}

    @classmethod
    def from_dict(cls, d):
        out = cls.__new__(cls)
        out.w1 = np.asarray(d["w1"], dtype=np.float64)
        out.b1 = np.asarray(d["b1"], dtype=np.float64)
        out.w2 = np.asarray(d["w2"], dtype=np.float64)
        out.b2 = np.asarray(d["b2"], dtype=np.float64)
        return out


# ---------------------------------------------------------------------------
# supervised contrastive loss on tube labels


def supcon_loss(Z, tube_ids, tau=0.1):
    return _supcon(Z, tube_ids, tau, want_grad=False)[0]


def supcon_loss_grad(Z, tube_ids, tau=0.1):
    return _supcon(Z, tube_ids, tau, want_grad=True)


def _supcon(Z, tube_ids, tau, want_grad):
    Z = np.asarray(Z, dtype=np.float64)
    ids = np.asarray(tube_ids)
    n = Z.shape[0]
    if n < 2:
        raise ValueError("need at least two embeddings")
    if ids.shape[0] != n:
        raise ValueError("one tube id per embedding required")
    if tau <= 0:
        raise ValueError("temperature must be positive")

    sim = Z @ Z.T / tau
    pos = ids[:, None] == ids[None, :]
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise ValueError("degenerate batch: no anchor has a positive")

    off = ~np.eye(n, dtype=bool)
    # row-wise logsumexp over a != i
    m = np.where(off, sim, -np.inf).max(axis=1, keepdims=True)
    ex = np.where(off, np.exp(sim - m), 0.0)
    lse = m[:, 0] + np.log(ex.sum(axis=1))

    with np.errstate(invalid="ignore", divide="ignore"):
        mean_pos = np.where(anchors, (sim * pos).sum(axis=1) / np.maximum(n_pos, 1), 0.0)
    per_anchor = lse - mean_pos
    loss = float(per_anchor[anchors].mean())

    if not want_grad:
        return loss, None

    n_anchor = int(anchors.sum())
    softmax = ex / ex.sum(axis=1, keepdims=True)
    g = np.zeros((n, n))
    g[anchors] = (softmax[anchors] -
                  pos[anchors] / n_pos[anchors][:, None]) / n_anchor
    g[:, :] *= off  # no self terms
    dz = (g + g.T) @ Z / tau
    return loss, dz


# ---------------------------------------------------------------------------
# batch sampling over tubes


def tubes_co_occur(a, b):
    """Two tubes sharing a frame are guaranteed distinct objects."""
    return bool(set(a.frames) & set(b.frames))


def tubes_far_apart(a, b, t_far):
    a0, a1 = a.span()
    b0, b1 = b.span()
    gap = max(0, b0 - a1, a0 - b1)
    return gap >= t_far


def sample_batch(tubes, batch_size, rng, t_far=50):
    """Draw a contrastive batch: batch_size // 4 tubes, four entries each.

    The first tube is uniform; subsequent tubes are drawn with weight 2 when
    they co-occur with an already chosen tube and weight 1 when they are at
    least `t_far` frames away from all chosen ones, other tubes are excluded
    (falling back to uniform when nothing qualifies). Entries are drawn
    without replacement when the tube is long enough.

    Returns a list of (tube_id, (frame, instance index)) pairs.
    """
    k = batch_size // 4
    if k < 2:
        raise ValueError("batch_size must allow at least two tubes of four")
    usable = [t for t in tubes if len(t.entries) >= 2]
    if len(usable) < 2:
        raise ValueError("need at least two tubes with more than one entry")

    chosen = [usable[int(rng.integers(len(usable)))]]
    while len(chosen) < k:
        chosen_ids = {t.tube_id for t in chosen}
        remaining = [t for t in usable if t.tube_id not in chosen_ids]
        if not remaining:
            remaining = usable  # fewer usable tubes than slots: allow repeats
        weights = []
        for t in remaining:
            if any(tubes_co_occur(t, c) for c in chosen):
                weights.append(2.0)
            elif all(tubes_far_apart(t, c, t_far) for c in chosen):
                weights.append(1.0)
            else:
                weights.append(0.0)
        weights = np.array(weights)
        if weights.sum() == 0:
            weights[:] = 1.0
        weights /= weights.sum()
        chosen.append(remaining[int(rng.choice(len(remaining), p=weights))])

    batch = []
    for tube in chosen:
        n = len(tube.entries)
        replace = n < 4
        idx = rng.choice(n, size=4, replace=replace)
        for i in idx:
            batch.append((tube.tube_id, tube.entries[int(i)]))
    return batch


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class FeatTrainConfig:
    epochs: int = 80
    lr: float = 5e-5
    batch_size: int = 32
    tau: float = 0.1
    t_far: int = 50
    seed: int = 0
    d_hidden: int = 64
    d_out: int = 16


def train_feature_head(X, tube_set, row_of, cfg=None):
    """Fit the standardizer and train the projection head on tube labels.

    X: (n, 48) raw descriptors, one row per predicted instance.
    tube_set: the tubes over those instances.
    row_of: maps a tube entry (frame, instance index) to its row in X.
    Returns (head, standardizer).
    """
    if cfg is None:
        cfg = FeatTrainConfig()
    X = np.asarray(X, dtype=np.float64)
    std = FeatureStandardizer().fit(X)
    Xs = std.transform(X)
    head = ProjectionHead(X.shape[1], cfg.d_hidden, cfg.d_out, seed=cfg.seed)
    if cfg.epochs == 0:
        return head, std

    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(head.params, cfg.lr)
    steps_per_epoch = max(1, X.shape[0] // cfg.batch_size)
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            batch = sample_batch(tube_set.tubes, cfg.batch_size, rng, cfg.t_far)
            rows = [row_of[entry] for _, entry in batch]
            ids = [tid for tid, _ in batch]
            loss, grads = head.loss_and_grads(Xs[rows], ids, cfg.tau)
            if not np.isfinite(loss):
                raise RuntimeError("non-finite contrastive loss at epoch %d"
                                   % epoch)
            opt.step(grads)
    return head, std
