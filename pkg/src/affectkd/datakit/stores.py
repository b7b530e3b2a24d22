"""Binary feature and image stores.

Both share one header layout (little endian): 4 magic bytes, u16 version,
u64 row count, then the per-row shape as u32 values. The feature store
(``MTLF``) holds float32 rows of ``feature_dim``; the image store (``MTLI``)
holds uint8 ``height x width x channels`` frames.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"MTLF"
IMAGE_MAGIC = b"MTLI"
STORE_VERSION = 1
_HEAD = struct.Struct("<4sHQ")


class StoreFormatError(ValueError):
    pass


def _write(path, magic: bytes, rows: np.ndarray, dtype, ndim: int):
    rows = np.ascontiguousarray(rows, dtype=np.dtype(dtype).newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(magic, STORE_VERSION, rows.shape[0]))
        fh.write(struct.pack(f"<{ndim}I", *rows.shape[1:]))
        fh.write(rows.tobytes())


def _read(path, magic: bytes, dtype, ndim: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size + 4 * ndim:
        raise StoreFormatError(f"{path}: truncated header")
    got_magic, version, count = _HEAD.unpack_from(data)
    if got_magic != magic:
        raise StoreFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported store version {version}")
    shape = struct.unpack_from(f"<{ndim}I", data, _HEAD.size)
    offset = _HEAD.size + 4 * ndim
    dt = np.dtype(dtype).newbyteorder("<")
    expected = count * int(np.prod(shape)) * dt.itemsize
    if len(data) - offset != expected:
        raise StoreFormatError(f"{path}: payload is {len(data) - offset} bytes, header implies {expected}")
    return np.frombuffer(data, dtype=dt, offset=offset).reshape((count, *shape)).astype(dtype)


def index_path(store_path) -> Path:
    p = Path(store_path)
    return p.with_name(p.name + ".index.csv")


def write_feature_store(path, features, index) -> Path:
    """Write ``features`` (n, d) and the row -> (video_id, frame_index) index next to it."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or len(index) != features.shape[0]:
        raise ValueError("features must be (n, d) with one index entry per row")
    _write(path, FEATURE_MAGIC, features, np.float32, 1)
    with open(index_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row", "video_id", "frame_index"))
        for i, (vid, fi) in enumerate(index):
            w.writerow((i, vid, int(fi)))
    return Path(path)


def read_feature_store(path) -> tuple[np.ndarray, list[tuple[str, int]]]:
    features = _read(path, FEATURE_MAGIC, np.float32, 1)
    with open(index_path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != len(features):
        raise StoreFormatError(f"{path}: index has {len(rows)} rows, store has {len(features)}")
    return features, [(r["video_id"], int(r["frame_index"])) for r in rows]


def write_image_store(path, images) -> Path:
    """``images``: uint8 array (n, h, w) or (n, h, w, c)."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        raise ValueError("image store expects uint8 pixels")
    if images.ndim == 3:
        images = images[..., None]
    _write(path, IMAGE_MAGIC, images, np.uint8, 3)
    return Path(path)


def read_image_store(path) -> np.ndarray:
    images = _read(path, IMAGE_MAGIC, np.uint8, 3)
    return images[..., 0] if images.shape[-1] == 1 else images
