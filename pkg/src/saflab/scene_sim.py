"""Synthetic scene simulator.

Generates short sequences of a static low-frequency background with rigid
elongated tools pivoting around anchors fixed on the left/right image border.
Every tool is a capsule shaft plus a triangular tip; appearance (color, width,
length, texture) is tied to the tool class so instances of one class look
alike across sequences. The simulator also emits exact ground truth: per-frame
instance masks with class and track ids, dense optical flow of the rigid
motion, and scheduled vs frame-wise class presence.

Geometry conventions: positions are (x, y), arrays are indexed [y, x], flow
and displacement fields are (H, W, 2) float32 with channels [dx, dy].
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .maskops import centroid_field, is_connected, min_separation_ok

log = logging.getLogger(__name__)

# per-class appearance tables (index class_id % 8)
_PALETTE = np.array([
    (202, 204, 210),   # light steel
    (72, 94, 168),     # blue
    (64, 146, 80),     # green
    (152, 64, 134),    # purple
    (214, 176, 64),    # yellow
    (84, 172, 184),    # teal
    (134, 90, 54),     # brown
    (228, 124, 124),   # salmon
], dtype=np.float64)
_WIDTH_F = np.array([0.042, 0.052, 0.036, 0.058, 0.046, 0.050, 0.040, 0.054])
_LEN_F = np.array([0.50, 0.55, 0.46, 0.58, 0.48, 0.53, 0.45, 0.56])


class _GenerationFailed(Exception):
    pass


@dataclass
class SimConfig:
    W: int = 256
    H: int = 256
    n_classes: int = 4
    n_frames: int = 100
    max_instances_per_frame: int = 4
    overlap_probability: float = 0.3
    motion_px_per_frame: float = 6.0
    absent_class_fraction: float = 0.0

    def validate(self):
        if self.W < 64 or self.H < 64:
            raise ValueError("image too small, need at least 64x64")
        if self.n_classes < 1:
            raise ValueError("need at least one tool class")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")
        if self.max_instances_per_frame < 0:
            raise ValueError("negative instance cap")
        if not 0.0 <= self.overlap_probability <= 1.0:
            raise ValueError("overlap_probability outside [0, 1]")
        if not 0.0 <= self.absent_class_fraction <= 1.0:
            raise ValueError("absent_class_fraction outside [0, 1]")
        if self.motion_px_per_frame <= 0:
            raise ValueError("motion budget must be positive")
        # a frame cannot fit the requested instances if their combined area
        # would exceed half the image
        min_area = (_LEN_F.min() * self.W) * (_WIDTH_F.min() * self.W)
        if self.max_instances_per_frame * min_area > 0.5 * self.W * self.H:
            raise ValueError("instance cap does not fit the image area")


@dataclass
class SimInstance:
    mask: np.ndarray
    class_id: int
    track_id: int


@dataclass
class SyntheticSequence:
    config: SimConfig
    seed: int
    frames: list            # (H, W, 3) uint8 per frame
    instances: list         # per frame: list of SimInstance
    flows: list             # (H, W, 2) float32, flows[t] maps frame t -> t+1
    presence_sw: list       # sorted class ids scheduled for the sequence
    presence_fw: list       # per frame: sorted class ids actually visible
    overlap_frames: list = field(default_factory=list)

    def binary_mask(self, t):
        m = np.zeros((self.config.H, self.config.W), dtype=bool)
        for inst in self.instances[t]:
            m |= inst.mask
        return m

    def semantic_map(self, t):
        """Per-pixel class labels, 0 background, class_id + 1 elsewhere."""
        sem = np.zeros((self.config.H, self.config.W), dtype=np.int64)
        for inst in self.instances[t]:
            sem[inst.mask] = inst.class_id + 1
        return sem


def gt_instances(seq, t):
    return seq.instances[t]


def gt_flow(seq, t):
    if not 0 <= t < len(seq.flows):
        raise IndexError("no flow for frame %d (sequence has %d transitions)"
                         % (t, len(seq.flows)))
    return seq.flows[t]


def gt_displacement(masks, shape):
    """Ground-truth displacement field: each tool pixel points at the
    arithmetic-mean centroid of its own instance, background stays zero."""
    return centroid_field(masks, shape)


def rigid_flow(mask, pivot_t, pivot_t1, rotation):
    """Dense flow of a rigid motion applied to the pixels of `mask`.

    The motion rotates by `rotation` radians about `pivot_t` and then
    translates the pivot to `pivot_t1`. Pixels outside the mask stay zero.
    """
    h, w = mask.shape
    flow = np.zeros((h, w, 2), dtype=np.float32)
    _rigid_flow_into(flow, mask, pivot_t, pivot_t1, rotation)
    return flow


def _rigid_flow_into(flow, mask, pivot_t, pivot_t1, rotation):
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return
    c = np.cos(rotation)
    s = np.sin(rotation)
    rx = xs - pivot_t[0]
    ry = ys - pivot_t[1]
    flow[ys, xs, 0] = (c * rx - s * ry) + pivot_t1[0] - xs
    flow[ys, xs, 1] = (s * rx + c * ry) + pivot_t1[1] - ys


# ---------------------------------------------------------------------------
# tool geometry and appearance


@dataclass
class _ToolSpec:
    class_id: int
    shaft_len: float
    radius: float
    tip_len: float
    color: np.ndarray
    texture: np.ndarray

    @property
    def reach(self):
        return self.shaft_len + self.tip_len


def _tool_spec(class_id, w):
    k = class_id % 8
    width = max(6.0, _WIDTH_F[k] * w)
    shaft = _LEN_F[k] * w
    tip = 2.0 * width
    radius = width / 2.0
    # texture lives in tool-local coordinates so it moves rigidly with the
    # tool; same class -> same pattern, independent of the sequence seed
    th = int(2 * radius + 10)
    tw = int(shaft + tip + 2 * radius + 10)
    rng = np.random.default_rng(7919 * (class_id + 1))
    tex = gaussian_filter(rng.normal(0.0, 1.0, (th, tw)), 2.2)
    tex /= max(tex.std(), 1e-6)
    np.clip(tex, -2.5, 2.5, out=tex)
    return _ToolSpec(class_id, shaft, radius, tip, _PALETTE[k].copy(), tex)


def _raster_tool(shape, spec, anchor, alpha):
    """Boolean mask of a capsule shaft plus triangular tip."""
    h, w = shape
    ax, ay = anchor
    ux, uy = np.cos(alpha), np.sin(alpha)
    end = (ax + ux * spec.shaft_len, ay + uy * spec.shaft_len)
    apex = (ax + ux * spec.reach, ay + uy * spec.reach)
    r = spec.radius

    x0 = int(np.floor(min(ax, end[0], apex[0]) - r - 2))
    x1 = int(np.ceil(max(ax, end[0], apex[0]) + r + 2))
    y0 = int(np.floor(min(ay, end[1], apex[1]) - r - 2))
    y1 = int(np.ceil(max(ay, end[1], apex[1]) + r + 2))
    x0, x1 = max(x0, 0), min(x1, w - 1)
    y0, y1 = max(y0, 0), min(y1, h - 1)
    if x1 < x0 or y1 < y0:
        return np.zeros(shape, dtype=bool)

    px, py = np.meshgrid(np.arange(x0, x1 + 1, dtype=np.float64),
                         np.arange(y0, y1 + 1, dtype=np.float64))
    wx = px - ax
    wy = py - ay
    tproj = np.clip(wx * ux + wy * uy, 0.0, spec.shaft_len)
    dx = wx - tproj * ux
    dy = wy - tproj * uy
    local = dx * dx + dy * dy <= r * r

    # tip triangle: base across the shaft end, apex ahead of it
    nx, ny = -uy, ux
    v0 = (end[0] + nx * r, end[1] + ny * r)
    v1 = (end[0] - nx * r, end[1] - ny * r)
    s0 = (v1[0] - v0[0]) * (py - v0[1]) - (v1[1] - v0[1]) * (px - v0[0])
    s1 = (apex[0] - v1[0]) * (py - v1[1]) - (apex[1] - v1[1]) * (px - v1[0])
    s2 = (v0[0] - apex[0]) * (py - apex[1]) - (v0[1] - apex[1]) * (px - apex[0])
    eps = 1e-9
    tri = ((s0 >= -eps) & (s1 >= -eps) & (s2 >= -eps)) | \
          ((s0 <= eps) & (s1 <= eps) & (s2 <= eps))
    local |= tri

    mask = np.zeros(shape, dtype=bool)
    mask[y0:y1 + 1, x0:x1 + 1] = local
    return mask


def _paint_tool(image, mask, spec, anchor, alpha):
    """Color the mask pixels by sampling the class texture in tool-local
    coordinates, so the pattern translates/rotates with the tool."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return
    ca, sa = np.cos(alpha), np.sin(alpha)
    rx = xs - anchor[0]
    ry = ys - anchor[1]
    qx = ca * rx + sa * ry
    qy = -sa * rx + ca * ry
    th, tw = spec.texture.shape
    ix = np.clip(np.rint(qx + spec.radius + 4).astype(int), 0, tw - 1)
    iy = np.clip(np.rint(qy + spec.radius + 4).astype(int), 0, th - 1)
    v = spec.texture[iy, ix]
    rgb = spec.color[None, :] * (1.0 + 0.16 * v[:, None])
    image[ys, xs] = np.clip(rgb, 0, 255).astype(np.uint8)


def _background(cfg, rng):
    base = np.array([142.0, 86.0, 80.0])
    amp = np.array([20.0, 13.0, 12.0])
    n = gaussian_filter(rng.normal(0.0, 1.0, (cfg.H, cfg.W)), cfg.W / 10.0)
    n /= max(n.std(), 1e-6)
    bg = base[None, None, :] + amp[None, None, :] * n[:, :, None]
    return np.clip(bg, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# per-instance kinematic state


class _ToolState:
    def __init__(self, slot, spec, side, cfg):
        self.slot = slot
        self.spec = spec
        self.side = side                      # +1 entering from x=0, -1 from x=W-1
        self.anchor_x = 0.0 if side > 0 else float(cfg.W - 1)
        self.alpha_ref = 0.0 if side > 0 else np.pi
        self.y = 0.0
        self.alpha = self.alpha_ref
        self.band = (0.0, 0.0)
        self.a_lim = 0.0

    def set_band(self, lo, hi, cfg):
        self.band = (lo, hi)
        mid = 0.5 * (lo + hi)
        margin = min(mid, cfg.H - 1 - mid) - self.spec.radius - 4
        s_lim = margin / self.spec.reach
        self.a_lim = float(np.arcsin(np.clip(s_lim, 0.06, 0.55)))

    def anchor(self):
        return (self.anchor_x, self.y)

    def clamp_alpha(self, alpha):
        return float(np.clip(alpha, self.alpha_ref - self.a_lim,
                             self.alpha_ref + self.a_lim))

    def raster(self, shape, y=None, alpha=None):
        y = self.y if y is None else y
        alpha = self.alpha if alpha is None else alpha
        return _raster_tool(shape, self.spec, (self.anchor_x, y), alpha)


def _angle_diff(a, b):
    return float(np.arctan2(np.sin(a - b), np.cos(a - b)))


# ---------------------------------------------------------------------------
# sequence generation


def gen_sequence(config, seed):
    """Generate one deterministic synthetic sequence for (config, seed)."""
    config.validate()
    last_err = None
    for attempt in range(6):
        try:
            return _generate(config, seed, attempt)
        except _GenerationFailed as err:
            last_err = err
            log.warning("sequence generation retry %d for seed %d: %s",
                        attempt + 1, seed, err)
    raise RuntimeError("could not generate a valid sequence for seed %d: %s"
                       % (seed, last_err))


def _generate(cfg, seed, attempt):
    rng = np.random.default_rng([seed, attempt])
    shape = (cfg.H, cfg.W)
    n_inst = min(cfg.max_instances_per_frame, cfg.n_classes)

    background = _background(cfg, rng)
    if n_inst == 0:
        frames = [background.copy() for _ in range(cfg.n_frames)]
        zero = np.zeros((cfg.H, cfg.W, 2), dtype=np.float32)
        return SyntheticSequence(cfg, seed, frames,
                                 [[] for _ in range(cfg.n_frames)],
                                 [zero.copy() for _ in range(cfg.n_frames - 1)],
                                 [], [[] for _ in range(cfg.n_frames)])

    classes = sorted(rng.choice(cfg.n_classes, size=n_inst, replace=False).tolist())
    states = []
    for slot, cls in enumerate(classes):
        side = 1 if slot % 2 == 0 else -1
        states.append(_ToolState(slot, _tool_spec(cls, cfg.W), side, cfg))

    # overlap episode: first left tool and first right tool approach each
    # other mid-sequence until their masks touch
    pair = None
    sides = {st.side for st in states}
    if len(sides) == 2 and rng.random() < cfg.overlap_probability:
        a = next(st for st in states if st.side > 0)
        b = next(st for st in states if st.side < 0)
        if a.spec.reach + b.spec.reach >= 1.02 * (cfg.W - 1):
            pair = (a.slot, b.slot)
    t0 = max(1, cfg.n_frames // 4)
    t1 = min(cfg.n_frames - 1, t0 + max(10, cfg.n_frames // 2))

    _assign_bands(cfg, states, pair, rng)
    _initial_poses(cfg, states, pair, rng, shape)

    dalpha_max = {st.slot: 0.7 * cfg.motion_px_per_frame / st.spec.reach
                  for st in states}
    da_max = 0.3 * cfg.motion_px_per_frame

    presence_sw = classes
    frames = []
    instances = []
    flows = []
    presence_fw = []
    overlap_frames = []
    prev_poses = None
    pair_touching = False

    pair_states = None
    if pair is not None:
        pair_states = (next(s for s in states if s.slot == pair[0]),
                       next(s for s in states if s.slot == pair[1]))

    for t in range(cfg.n_frames):
        in_window = pair is not None and t0 <= t <= t1
        # visibility draw happens first so the stream is independent of the
        # back-off iterations below; while the episode pair is interacting its
        # classes stay visible so the contact is never between ghosts
        hidden_cls = -1
        if cfg.absent_class_fraction > 0 and rng.random() < cfg.absent_class_fraction:
            candidates = classes
            if pair is not None and (in_window or pair_touching):
                banned = {st.spec.class_id for st in pair_states}
                candidates = [c for c in classes if c not in banned]
            if candidates:
                hidden_cls = int(rng.choice(candidates))

        if t == 0:
            deltas = {st.slot: (0.0, 0.0) for st in states}
        else:
            deltas = {}
            for st in states:
                noise_a = rng.normal(0.0, 0.5) * dalpha_max[st.slot]
                noise_y = rng.normal(0.0, 0.5) * da_max
                steering = in_window and pair is not None and st.slot in pair
                if steering and pair_touching:
                    da, dy = 0.0, 0.0
                elif steering:
                    # close in on the partner using the full motion budget
                    other = pair_states[1] if st.slot == pair[0] else pair_states[0]
                    frac = 0.6 if st.slot == pair[1] else 0.9
                    target = (other.anchor_x + frac * other.spec.shaft_len * np.cos(other.alpha),
                              other.y + frac * other.spec.shaft_len * np.sin(other.alpha))
                    want = np.arctan2(target[1] - st.y, target[0] - st.anchor_x)
                    lim = cfg.motion_px_per_frame / st.spec.reach
                    da = np.clip(_angle_diff(want, st.alpha), -lim, lim)
                    dy = 0.0
                else:
                    pull = 0.25 * _angle_diff(st.alpha_ref, st.alpha)
                    da = np.clip(pull + noise_a, -dalpha_max[st.slot], dalpha_max[st.slot])
                    dy = np.clip(noise_y, -da_max, da_max)
                alpha_new = st.clamp_alpha(st.alpha + da)
                y_new = float(np.clip(st.y + dy, st.band[0], st.band[1]))
                deltas[st.slot] = (y_new - st.y, alpha_new - st.alpha)

        contact_ok = pair is not None and (in_window or pair_touching)
        committed = None
        scale = 1.0
        for trial in range(7):
            trial_poses = {st.slot: (st.y + scale * deltas[st.slot][0],
                                     st.alpha + scale * deltas[st.slot][1])
                           for st in states}
            ok, masks, touching = _compose_frame(
                cfg, shape, states, trial_poses, pair, contact_ok)
            if ok:
                committed = (trial_poses, masks, touching)
                break
            if t == 0:
                raise _GenerationFailed("initial layout invalid")
            scale = 0.0 if trial == 5 else scale * 0.5
        if committed is None:
            raise _GenerationFailed("frame %d could not be made valid" % t)

        trial_poses, masks, touching = committed
        pair_touching = touching
        if touching:
            overlap_frames.append(t)
        for st in states:
            st.y, st.alpha = trial_poses[st.slot]

        img = background.copy()
        frame_insts = []
        for st in states:
            if st.spec.class_id == hidden_cls:
                continue
            m = masks[st.slot]
            _paint_tool(img, m, st.spec, st.anchor(), st.alpha)
            frame_insts.append(SimInstance(m, st.spec.class_id, st.slot))
        frames.append(img)
        instances.append(frame_insts)
        presence_fw.append(sorted({i.class_id for i in frame_insts}))

        if t > 0:
            flow = np.zeros((cfg.H, cfg.W, 2), dtype=np.float32)
            for inst in instances[t - 1]:
                st = next(s for s in states if s.slot == inst.track_id)
                y_prev, a_prev = prev_poses[st.slot]
                _rigid_flow_into(flow, inst.mask,
                                 (st.anchor_x, y_prev), (st.anchor_x, st.y),
                                 st.alpha - a_prev)
            flows.append(flow)
        prev_poses = {st.slot: (st.y, st.alpha) for st in states}

    return SyntheticSequence(cfg, seed, frames, instances, flows,
                             presence_sw, presence_fw, overlap_frames)


def _assign_bands(cfg, states, pair, rng):
    # one horizontal band per instance over the middle of the image; the most
    # central bands go to the earliest slots, and since sides alternate by
    # slot, vertical neighbours anchor on opposite borders
    n = len(states)
    lo, hi = 0.20 * cfg.H, 0.80 * cfg.H
    spacing = (hi - lo) / n
    centers = [lo + (j + 0.5) * spacing for j in range(n)]
    centers.sort(key=lambda c: abs(c - cfg.H / 2))
    for st, c in zip(states, centers):
        half = 0.25 * spacing
        st.set_band(c - half, c + half, cfg)
        st.y = float(np.clip(c + rng.uniform(-half, half), *st.band))
    if pair is not None:
        # pin the episode pair near mid-height so the tips can reach; the
        # left tool sits slightly above and tilts down, the right tool sits
        # slightly below and tilts up, so their shafts cross mid-image
        for slot, frac in zip(pair, (0.465, 0.535)):
            st = next(s for s in states if s.slot == slot)
            mid = frac * cfg.H
            half = 0.02 * cfg.H
            st.set_band(mid - half, mid + half, cfg)
            st.y = mid


def _initial_poses(cfg, states, pair, rng, shape):
    placed = []
    for st in states:
        forced = None
        if pair is not None and st.slot in pair:
            # tilt the pair apart at t=0 (left tool down, right tool up);
            # steering brings them together later
            forced = st.clamp_alpha(st.alpha_ref + 0.3)
        ok = False
        for _ in range(40):
            alpha = forced if forced is not None else \
                st.clamp_alpha(st.alpha_ref + rng.normal(0.0, 0.18))
            y = float(np.clip(st.y + rng.uniform(-3, 3), *st.band))
            m = st.raster(shape, y=y, alpha=alpha)
            if not m.any() or not is_connected(m):
                continue
            if not _touches_entry(m, st, cfg.W):
                continue
            if all(min_separation_ok(pm, m, radius=3) for pm in placed):
                st.alpha, st.y = alpha, y
                placed.append(m)
                ok = True
                break
            if forced is not None:
                forced = st.clamp_alpha(alpha + 0.05)
        if not ok:
            raise _GenerationFailed("could not place instance %d" % st.slot)


def _touches_entry(mask, st, w):
    col = 0 if st.side > 0 else w - 1
    return bool(mask[:, col].any())


def _compose_frame(cfg, shape, states, poses, pair, contact_ok):
    """Rasterize every tool (hidden ones included, so their poses stay legal
    for when they reappear), resolve the allowed episode contact by carving
    the later slot, and verify the frame invariants. Returns (ok, masks by
    slot, episode pair currently touching)."""
    raw = {}
    for st in states:
        y, alpha = poses[st.slot]
        raw[st.slot] = _raster_tool(shape, st.spec, (st.anchor_x, y), alpha)

    touching = False
    if pair is not None:
        inter = raw[pair[0]] & raw[pair[1]]
        if inter.any():
            if not contact_ok:
                return False, None, False
            touching = True
            raw[pair[1]] = raw[pair[1]] & ~raw[pair[0]]

    ordered = sorted(states, key=lambda s: s.slot)
    for st in ordered:
        m = raw[st.slot]
        if not m.any() or not is_connected(m):
            return False, None, False
        if not _touches_entry(m, st, cfg.W):
            return False, None, False
    for i, sa in enumerate(ordered):
        for sb in ordered[i + 1:]:
            if pair is not None and {sa.slot, sb.slot} == set(pair):
                if touching:
                    continue
                if contact_ok:
                    # approach phase: only forbid actual intersection
                    if (raw[sa.slot] & raw[sb.slot]).any():
                        return False, None, False
                    continue
            if not min_separation_ok(raw[sa.slot], raw[sb.slot], radius=2):
                return False, None, False
    return True, raw, touching


# ---------------------------------------------------------------------------
# imperfect upstream emulation


def noisy_oracle(gt_field, gt_mask, sigma_px=2.0, boundary_iters=3, seed=0):
    """Corrupt a ground-truth mask and displacement field the way an imperfect
    upstream segmenter would.

    The mask boundary is randomized by alternating dilation/erosion passes
    that each flip candidate boundary pixels with probability 0.5; the field
    gets iid Gaussian pixel noise of scale `sigma_px` and is zeroed outside
    the corrupted mask. All-zero settings return the inputs unchanged.
    """
    if gt_field.shape[:2] != gt_mask.shape:
        raise ValueError("field and mask shapes differ")
    if sigma_px < 0 or boundary_iters < 0:
        raise ValueError("noise parameters must be non-negative")
    rng = np.random.default_rng(seed)
    mask = gt_mask.copy()
    from .maskops import boundary_inner, boundary_outer
    for i in range(boundary_iters):
        if i % 2 == 0:
            cand = boundary_outer(mask)
            mask |= cand & (rng.random(mask.shape) < 0.5)
        else:
            cand = boundary_inner(mask)
            mask &= ~(cand & (rng.random(mask.shape) < 0.5))
    field = gt_field.astype(np.float32).copy()
    if sigma_px > 0:
        field += rng.normal(0.0, sigma_px, gt_field.shape)
    field *= mask[..., None]
    return field, mask
