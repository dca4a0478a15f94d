"""Tube tracking: link per-frame instances across time by projecting their
centroids with optical flow and greedily matching nearest centroids.

A tube is the trajectory of one instance: a list of (frame, instance index)
entries. Flow comes either straight from the simulator ground truth or from a
simple block-matching estimator on the frames themselves.
"""

from dataclasses import dataclass, field

import numpy as np

BLOCK = 16
SEARCH_RADIUS = 8


def estimate_flow(frame_t, frame_t1, method="block_match", gt_flow=None):
    """Dense flow from frame t to t+1.

    method "gt" passes through the simulator flow supplied in `gt_flow`;
    method "block_match" runs SAD block matching with 16x16 blocks and a
    +-8 px search window, ties going to the smallest displacement.
    """
    if method == "gt":
        if gt_flow is None:
            raise ValueError("method 'gt' needs the simulator flow")
        return gt_flow
    if method != "block_match":
        raise ValueError("unknown flow method %r" % (method,))
    if frame_t.shape != frame_t1.shape:
        raise ValueError("frame shapes differ")
    h, w = frame_t.shape[:2]
    if h % BLOCK or w % BLOCK:
        raise ValueError("frame size %dx%d not divisible by block size %d"
                         % (w, h, BLOCK))

    a = frame_t.astype(np.float32)
    b = frame_t1.astype(np.float32)
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)

    # pad the target frame so out-of-range comparisons are expensive instead
    # of undefined
    pad = SEARCH_RADIUS
    padded = np.full((h + 2 * pad, w + 2 * pad), 1e6, dtype=np.float32)
    padded[pad:pad + h, pad:pad + w] = b

    offsets = [(dy, dx)
               for dy in range(-SEARCH_RADIUS, SEARCH_RADIUS + 1)
               for dx in range(-SEARCH_RADIUS, SEARCH_RADIUS + 1)]
    offsets.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))

    nby, nbx = h // BLOCK, w // BLOCK
    best_sad = np.full((nby, nbx), np.inf, dtype=np.float64)
    best_dy = np.zeros((nby, nbx), dtype=np.float32)
    best_dx = np.zeros((nby, nbx), dtype=np.float32)
    for dy, dx in offsets:
        shifted = padded[pad + dy:pad + dy + h, pad + dx:pad + dx + w]
        sad = np.abs(a - shifted).reshape(nby, BLOCK, nbx, BLOCK).sum(axis=(1, 3))
        better = sad < best_sad  # strict: earlier (smaller) offsets win ties
        best_sad[better] = sad[better]
        best_dy[better] = dy
        best_dx[better] = dx

    flow = np.zeros((h, w, 2), dtype=np.float32)
    flow[..., 0] = np.repeat(np.repeat(best_dx, BLOCK, axis=0), BLOCK, axis=1)
    flow[..., 1] = np.repeat(np.repeat(best_dy, BLOCK, axis=0), BLOCK, axis=1)
    return flow


def project_centroid(centroid, flow, mask=None):
    """Move a centroid by the flow at its rounded pixel; if that pixel is not
    part of the instance (thin or concave shapes), fall back to the mean flow
    over the instance mask."""
    h, w = flow.shape[:2]
    px = int(np.clip(round(centroid[0]), 0, w - 1))
    py = int(np.clip(round(centroid[1]), 0, h - 1))
    if mask is not None and not mask[py, px]:
        ys, xs = np.nonzero(mask)
        if xs.size:
            v = flow[ys, xs].mean(axis=0)
        else:
            v = flow[py, px]
    else:
        v = flow[py, px]
    return (centroid[0] + float(v[0]), centroid[1] + float(v[1]))


def track_step(centroids_t, flow, centroids_t1, max_dist=40.0, masks_t=None):
    """Match instances of frame t to frame t+1.

    Centroids of frame t are projected by the flow, then candidate pairs
    within `max_dist` are taken greedily in ascending distance order (ties by
    source index, then target index). Returns {index_t: index_t1}; unmatched
    instances on either side are simply absent.
    """
    if max_dist <= 0:
        raise ValueError("max_dist must be positive")
    projected = []
    for i, c in enumerate(centroids_t):
        mask = masks_t[i] if masks_t is not None else None
        projected.append(project_centroid(c, flow, mask))

    pairs = []
    for i, p in enumerate(projected):
        for j, c in enumerate(centroids_t1):
            d = float(np.hypot(p[0] - c[0], p[1] - c[1]))
            if d <= max_dist:
                pairs.append((d, i, j))
    pairs.sort()

    matching = {}
    taken = set()
    for d, i, j in pairs:
        if i in matching or j in taken:
            continue
        matching[i] = j
        taken.add(j)
    return matching


@dataclass
class Tube:
    tube_id: int
    entries: list = field(default_factory=list)  # (frame, instance index)

    @property
    def frames(self):
        return [t for t, _ in self.entries]

    def span(self):
        fr = self.frames
        return fr[0], fr[-1]


@dataclass
class TubeSet:
    tubes: list
    n_frames: int

    def __iter__(self):
        return iter(self.tubes)

    def __len__(self):
        return len(self.tubes)

    def entry_index(self):
        """(frame, instance) -> tube_id lookup."""
        out = {}
        for tube in self.tubes:
            for entry in tube.entries:
                out[entry] = tube.tube_id
        return out


def build_tubes(centroid_seq, flows, max_dist=40.0, mask_seq=None):
    """Link per-frame instance lists into tubes.

    centroid_seq: per frame, a list of (x, y) centroids.
    flows: flows[t] maps frame t to t+1 (length len(centroid_seq) - 1).
    mask_seq: optional per-frame instance masks for the projection fallback.

    Every instance of frame 0 starts a tube; afterwards matched instances
    extend their tube and unmatched ones start new tubes, so tube ids are
    dense and ordered by creation.
    """
    n_frames = len(centroid_seq)
    if n_frames and len(flows) != n_frames - 1:
        raise ValueError("need exactly one flow per frame transition")

    tubes = []
    current = {}  # instance index in latest frame -> tube
    for idx in range(len(centroid_seq[0]) if n_frames else 0):
        tube = Tube(len(tubes), [(0, idx)])
        tubes.append(tube)
        current[idx] = tube

    for t in range(n_frames - 1):
        masks_t = mask_seq[t] if mask_seq is not None else None
        matching = track_step(centroid_seq[t], flows[t], centroid_seq[t + 1],
                              max_dist, masks_t)
        nxt = {}
        for i, j in matching.items():
            tube = current[i]
            tube.entries.append((t + 1, j))
            nxt[j] = tube
        for j in range(len(centroid_seq[t + 1])):
            if j not in nxt:
                tube = Tube(len(tubes), [(t + 1, j)])
                tubes.append(tube)
                nxt[j] = tube
        current = nxt
    return TubeSet(tubes, n_frames)
