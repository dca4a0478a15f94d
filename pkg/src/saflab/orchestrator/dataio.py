"""On-disk artifact formats.

Float tensors go into a small self-describing container (magic ``SAFT``) so
no array-library file dialect leaks into the artifacts; masks are 8-bit
palette-free PNGs where 0 is background and i is instance id i-1; everything
row-shaped (tube entries, label sessions, per-frame metadata) is JSON lines.
"""

import json
import struct

import numpy as np
from PIL import Image

MAGIC = b"SAFT"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("uint8"): 2}


def write_tensor(path, arr):
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_OF:
        raise ValueError("tensor dtype must be float32 or uint8, got %s"
                         % arr.dtype)
    code = _CODE_OF[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBB", VERSION, code, arr.ndim))
        fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(_DTYPE_CODES[code]).tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError("%s is not a SAFT tensor (bad magic %r)"
                             % (path, magic))
        version, code, ndim = struct.unpack("<HBB", fh.read(4))
        if version != VERSION:
            raise ValueError("unsupported SAFT version %d" % version)
        if code not in _DTYPE_CODES:
            raise ValueError("unknown SAFT dtype code %d" % code)
        dims = struct.unpack("<%dI" % ndim, fh.read(4 * ndim))
        payload = fh.read()
    arr = np.frombuffer(payload, dtype=_DTYPE_CODES[code])
    expect = int(np.prod(dims)) if dims else 1
    if arr.size != expect:
        raise ValueError("SAFT payload holds %d values, header promises %d"
                         % (arr.size, expect))
    return arr.reshape(dims).copy()


def masks_to_label_map(masks, shape):
    """Disjoint instance masks -> uint8 id map (0 background, i+1 instance i)."""
    if len(masks) > 255:
        raise ValueError("more than 255 instances cannot be stored in one map")
    out = np.zeros(shape, dtype=np.uint8)
    for i, m in enumerate(masks):
        out[m] = i + 1
    return out


def label_map_to_masks(label_map):
    n = int(label_map.max())
    return [label_map == i + 1 for i in range(n)]


def write_mask_png(path, label_map):
    Image.fromarray(np.asarray(label_map, dtype=np.uint8), mode="L").save(path)


def read_mask_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_image_png(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def read_image_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_jsonl(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
