"""Unsupervised tool instantiation from binary masks.

The training-signal side fabricates per-pixel displacement targets from
connected components of a binary mask (plus an overlap flag that knocks the
regression term out where components merged across the full image width, and
an augmentation that pastes a donor instance into a scene). The inference
side reads instances back out of a displacement field by counting where each
tool pixel's vector converges on a coarse grid.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .maskops import centroid_field, connected_components

log = logging.getLogger(__name__)


def cc_label(binary_mask):
    """Connected components (8-conn) of a binary mask as individual masks,
    ordered by bounding-box (min row, min col)."""
    return connected_components(np.asarray(binary_mask, dtype=bool), connectivity=8)


def detect_overlap(cc_masks, width=None, shape=None):
    """Flag components whose column support spans the full image width.

    Tools enter from the left or right border, so a component touching both
    border columns can only be several tools merged across the image; its
    pixels are returned set in the overlap mask. Adding pixels to a flagged
    component can only widen its support, never clear the flag.
    """
    if cc_masks:
        shape = cc_masks[0].shape
    if shape is None:
        raise ValueError("need at least one mask or an explicit shape")
    if width is None:
        width = shape[1]
    overlap = np.zeros(shape, dtype=bool)
    for m in cc_masks:
        cols = m.any(axis=0)
        if cols[0] and cols[width - 1]:
            overlap |= m
    return overlap


def fabricate_field(cc_masks, shape):
    """Displacement targets built from connected components: every pixel of a
    component points at that component's arithmetic-mean centroid."""
    return centroid_field(cc_masks, shape)


def mask_field(field, mask):
    """Zero a displacement field outside a binary mask."""
    if field.shape[:2] != mask.shape:
        raise ValueError("field and mask shapes differ")
    return (field * np.asarray(mask, dtype=bool)[..., None]).astype(np.float32)


def augm_paste(image, binary_mask, field, donor_image, donor_mask,
               placement_seed, max_attempts=10):
    """Paste a donor instance into a scene at a seeded random placement.

    The pasted pixels take the donor's appearance; the pasted region's
    displacement vectors point at the centroid of the pasted mask recomputed
    after clipping at the image borders; everything outside the pasted region
    is untouched. A placement that would bury an existing connected component
    completely is redrawn, and after `max_attempts` failed draws the inputs
    are returned unchanged.
    """
    if image.shape[:2] != binary_mask.shape or field.shape[:2] != binary_mask.shape:
        raise ValueError("scene arrays disagree on shape")
    if donor_image.shape[:2] != donor_mask.shape:
        raise ValueError("donor arrays disagree on shape")
    dys, dxs = np.nonzero(donor_mask)
    if dxs.size == 0:
        raise ValueError("donor mask is empty")

    h, w = binary_mask.shape
    rng = np.random.default_rng(placement_seed)
    existing = cc_label(binary_mask)

    y0, y1 = dys.min(), dys.max()
    x0, x1 = dxs.min(), dxs.max()
    dh, dw = y1 - y0 + 1, x1 - x0 + 1

    for _ in range(max_attempts):
        # the top-left corner may fall partially outside; clipping below
        # keeps whatever lands inside the image
        ty = int(rng.integers(-dh // 3, h - (2 * dh) // 3 + 1))
        tx = int(rng.integers(-dw // 3, w - (2 * dw) // 3 + 1))
        pasted = np.zeros((h, w), dtype=bool)
        src_y = dys - y0 + ty
        src_x = dxs - x0 + tx
        inside = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
        if not inside.any():
            continue
        pasted[src_y[inside], src_x[inside]] = True
        if any(not (comp & ~pasted).any() for comp in existing):
            continue

        out_img = image.copy()
        out_img[src_y[inside], src_x[inside]] = donor_image[dys[inside], dxs[inside]]
        out_mask = binary_mask | pasted
        out_field = field.copy()
        pys, pxs = np.nonzero(pasted)
        cx = pxs.mean()
        cy = pys.mean()
        out_field[pys, pxs, 0] = (cx - pxs).astype(np.float32)
        out_field[pys, pxs, 1] = (cy - pys).astype(np.float32)
        return out_img, out_mask, out_field

    log.warning("augm_paste gave up after %d placements", max_attempts)
    return image, binary_mask, field


def loss_fs(field_gt, field_pred):
    """Mean absolute error between two displacement fields, averaged over all
    pixels and both channels."""
    if field_gt.shape != field_pred.shape:
        raise ValueError("field shapes differ")
    return float(np.mean(np.abs(field_gt.astype(np.float64) -
                                field_pred.astype(np.float64))))


def loss_instantiation(field_cc, field_pred, overlap_mask, binary_mask, mask_probs):
    """Training loss for the instantiation head: L1 on the fabricated
    displacement targets restricted to non-overlap pixels, plus a mean pixel
    binary cross-entropy of the mask probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log; values
    outside [0, 1] are an error rather than something to silently clamp.
    """
    if field_cc.shape != field_pred.shape:
        raise ValueError("field shapes differ")
    if overlap_mask.shape != binary_mask.shape or mask_probs.shape != binary_mask.shape:
        raise ValueError("mask shapes differ")
    if np.any(mask_probs < 0) or np.any(mask_probs > 1):
        raise ValueError("mask probabilities outside [0, 1]")

    keep = ~np.asarray(overlap_mask, dtype=bool)
    if keep.any():
        diff = np.abs(field_cc.astype(np.float64) - field_pred.astype(np.float64))
        l1 = float(diff[keep].mean())
    else:
        l1 = 0.0

    p = np.clip(mask_probs.astype(np.float64), 1e-7, 1.0 - 1e-7)
    y = np.asarray(binary_mask, dtype=np.float64)
    bce = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
    return l1 + bce


@dataclass
class GridParams:
    grid_squares_per_side: int = 32
    eps_c: float = 5.0

    def validate(self, shape):
        g = self.grid_squares_per_side
        if g < 1:
            raise ValueError("grid must have at least one square per side")
        if shape[0] % g or shape[1] % g:
            raise ValueError("grid of %d squares does not divide %dx%d"
                             % (g, shape[1], shape[0]))
        if self.eps_c <= 0:
            raise ValueError("eps_c must be positive")


def extract_instances(field, binary_mask, params=None):
    """Instances recovered from a displacement field; see
    extract_instances_full for the scored variant."""
    masks, _, _ = extract_instances_full(field, binary_mask, params)
    return masks


def extract_instances_full(field, binary_mask, params=None):
    """Group tool pixels into instances by where their vectors converge.

    The image is tiled with a square grid; a grid square's convergence is the
    number of tool pixels whose (border-clipped) target p + field[p] lands in
    it, divided by the square's pixel area. Squares strictly above eps_c are
    kept and grouped 4-connectively into candidate centroid regions; each
    region's position is the convergence-weighted mean of its square centers,
    and every tool pixel joins the region nearest to its own target point
    (ties to the lowest region index). Regions that end up with no pixels are
    dropped. If no square clears eps_c the whole mask is returned as a single
    instance.

    Returns (masks, positions, scores): positions are (x, y) region centers,
    scores are each region's share of the total convergence count.
    """
    if params is None:
        params = GridParams()
    binary_mask = np.asarray(binary_mask, dtype=bool)
    h, w = binary_mask.shape
    params.validate((h, w))
    if field.shape[:2] != (h, w):
        raise ValueError("field and mask shapes differ")

    ys, xs = np.nonzero(binary_mask)
    if xs.size == 0:
        return [], [], []

    g = params.grid_squares_per_side
    sq_w = w // g
    sq_h = h // g
    tx = np.clip(xs + field[ys, xs, 0], 0, w - 1)
    ty = np.clip(ys + field[ys, xs, 1], 0, h - 1)
    bx = (tx // sq_w).astype(np.int64)
    by = (ty // sq_h).astype(np.int64)
    counts = np.bincount(by * g + bx, minlength=g * g).reshape(g, g)
    conv = counts / float(sq_w * sq_h)

    keep = conv > params.eps_c
    if not keep.any():
        log.warning("no grid square above eps_c=%.3g, falling back to the "
                    "whole mask as one instance", params.eps_c)
        cx = float(xs.mean())
        cy = float(ys.mean())
        return [binary_mask.copy()], [(cx, cy)], [1.0]

    labelled, n_regions = ndimage.label(keep)  # 4-connectivity
    slices = ndimage.find_objects(labelled)
    order = sorted(range(n_regions),
                   key=lambda k: (slices[k][0].start, slices[k][1].start))

    positions = []
    weights = []
    for k in order:
        rby, rbx = np.nonzero(labelled == k + 1)
        wgt = counts[rby, rbx].astype(np.float64)
        cx = float(np.average((rbx + 0.5) * sq_w, weights=wgt))
        cy = float(np.average((rby + 0.5) * sq_h, weights=wgt))
        positions.append((cx, cy))
        weights.append(float(wgt.sum()))

    pos = np.array(positions)
    d2 = (tx[:, None] - pos[None, :, 0]) ** 2 + (ty[:, None] - pos[None, :, 1]) ** 2
    owner = np.argmin(d2, axis=1)  # ties resolve to the lowest region index

    masks = []
    out_pos = []
    out_scores = []
    total = sum(weights)
    for k in range(len(positions)):
        sel = owner == k
        if not sel.any():
            continue
        m = np.zeros((h, w), dtype=bool)
        m[ys[sel], xs[sel]] = True
        masks.append(m)
        out_pos.append(positions[k])
        out_scores.append(weights[k] / total)
    return masks, out_pos, out_scores
