"""Small shared primitives on binary masks and displacement fields.

Conventions used across the package:
  - masks are (H, W) bool arrays
  - displacement fields / flows are (H, W, 2) float32, last axis [dx, dy]
  - positions are (x, y) in pixel units, arrays indexed [y, x]
"""

import numpy as np
from scipy import ndimage

STRUCT8 = np.ones((3, 3), dtype=bool)


def centroid(mask):
    """Arithmetic mean (x, y) of the pixels set in `mask`."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("centroid of empty mask")
    return float(xs.mean()), float(ys.mean())


def centroid_field(masks, shape):
    """Per-pixel displacement toward the owning instance centroid.

    For each mask, every set pixel gets the vector [cx - px, cy - py] where
    (cx, cy) is the arithmetic mean of that mask's pixels. Background stays
    [0, 0]. Masks are assumed pairwise disjoint; later masks would overwrite
    earlier ones on shared pixels.
    """
    h, w = shape
    field = np.zeros((h, w, 2), dtype=np.float32)
    for mask in masks:
        ys, xs = np.nonzero(mask)
        if xs.size == 0:
            continue
        cx = xs.mean()
        cy = ys.mean()
        field[ys, xs, 0] = (cx - xs).astype(np.float32)
        field[ys, xs, 1] = (cy - ys).astype(np.float32)
    return field


def connected_components(mask, connectivity=8):
    """Split a binary mask into connected components.

    Returns a list of boolean masks ordered by the (min row, min col) of each
    component's bounding box, so the ordering is deterministic and does not
    depend on labelling internals.
    """
    structure = STRUCT8 if connectivity == 8 else None
    labelled, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return []
    slices = ndimage.find_objects(labelled)
    order = sorted(range(n), key=lambda k: (slices[k][0].start, slices[k][1].start))
    return [labelled == k + 1 for k in order]


def boundary_inner(mask):
    """Pixels of `mask` adjacent (8-conn) to background."""
    return mask & ~ndimage.binary_erosion(mask, structure=STRUCT8)


def boundary_outer(mask):
    """Background pixels adjacent (8-conn) to `mask`."""
    return ndimage.binary_dilation(mask, structure=STRUCT8) & ~mask


def min_separation_ok(mask_a, mask_b, radius=2):
    """True when no pixel of `mask_b` is within `radius` (Chebyshev) of `mask_a`."""
    grown = ndimage.binary_dilation(mask_a, structure=STRUCT8, iterations=radius)
    return not np.any(grown & mask_b)


def is_connected(mask, connectivity=8):
    structure = STRUCT8 if connectivity == 8 else None
    _, n = ndimage.label(mask, structure=structure)
    return n == 1
