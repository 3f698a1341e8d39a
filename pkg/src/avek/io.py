"""File formats: 16-bit PGM images, flat float64 arrays with a header, sinogram manifests."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "write_pgm",
    "read_pgm",
    "write_array",
    "read_array",
    "write_sinogram",
    "read_sinogram",
]

_MAGIC = b"AVEKF64\0"


def write_pgm(path, image, vmin=None, vmax=None):
    """Write `image` as a binary 16-bit PGM, mapping ``[vmin, vmax]`` linearly to ``[0, 65535]``.

    Rows of the file run along the second array axis reversed, so the image
    appears with ``y`` pointing up.
    """
    a = np.asarray(image, dtype=float)
    lo = float(np.min(a)) if vmin is None else vmin
    hi = float(np.max(a)) if vmax is None else vmax
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.rint((a - lo) * scale), 0, 65535).astype(">u2")
    q = q.T[::-1]
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path):
    """Read a binary PGM back into array orientation (values ``0..maxval`` as ints)."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    q = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos + 1).reshape(h, w)
    return q[::-1].T.astype(np.int64)


def write_array(path, array, radius=1.0):
    """Flat little-endian float64 file: magic, ndim, dims, radius, then C-order data."""
    a = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(struct.pack("<d", radius))
        fh.write(a.tobytes())


def read_array(path):
    """Inverse of :func:`write_array`; returns ``(array, radius)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: bad magic, not a flat float64 file")
    (ndim,) = struct.unpack_from("<I", raw, 8)
    shape = struct.unpack_from(f"<{ndim}Q", raw, 12)
    off = 12 + 8 * ndim
    (radius,) = struct.unpack_from("<d", raw, off)
    off += 8
    count = int(np.prod(shape)) if shape else 1
    a = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
    return a.copy(), radius


def write_sinogram(stem, blocks, partition, radius=1.0, deltas=None, ratio=None, extra=None):
    """Write blocks stacked along the detector axis plus a JSON manifest.

    Produces ``<stem>.f64`` with shape ``(total detectors, N_r + 1)`` and
    ``<stem>.json`` listing the detector indices of each block, the noise
    norms ``delta_i`` and the global relative noise ratio.
    """
    stem = Path(stem)
    stacked = np.concatenate([np.asarray(g, dtype=float) for g in blocks], axis=0)
    write_array(stem.with_suffix(".f64"), stacked, radius)
    manifest = {
        "data": stem.with_suffix(".f64").name,
        "layout": ["block", "detector", "radius"],
        "blocks": [list(map(int, p)) for p in partition],
        "deltas": None if deltas is None else [float(d) for d in deltas],
        "noise_ratio": ratio,
    }
    if extra:
        manifest.update(extra)
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def read_sinogram(stem):
    """Inverse of :func:`write_sinogram`; returns ``(blocks, manifest)``."""
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    stacked, _ = read_array(stem.parent / manifest["data"])
    sizes = np.cumsum([len(p) for p in manifest["blocks"]])[:-1]
    return np.split(stacked, sizes, axis=0), manifest
