"""Resolve manifest frame references to pixel arrays.

A reference is either ``<store file>#<row>`` pointing into a packed image
store, or a path to an ordinary image file. Relative paths resolve against
the manifest's directory.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .stores import read_image_store


class MissingFrameError(FileNotFoundError):
    pass


def load_frames(records, root, image_size=None) -> np.ndarray:
    """Grayscale float32 frames in [0, 1], shape (n, h, w)."""
    root = Path(root)
    stores: dict[Path, np.ndarray] = {}
    out = []
    for r in records:
        ref = r.frame_ref
        if "#" in ref:
            name, row = ref.rsplit("#", 1)
            store_path = root / name
            if store_path not in stores:
                if not store_path.exists():
                    raise MissingFrameError(f"missing frame store for {ref}")
                stores[store_path] = read_image_store(store_path)
            store = stores[store_path]
            k = int(row)
            if not 0 <= k < len(store):
                raise MissingFrameError(f"missing frame {ref}: store has {len(store)} rows")
            img = store[k]
            if img.ndim == 3:
                img = np.asarray(Image.fromarray(img).convert("L"))
        else:
            path = root / ref
            if not path.exists():
                raise MissingFrameError(f"missing frame {ref}")
            pil = Image.open(path).convert("L")
            if image_size is not None and pil.size != (image_size[1], image_size[0]):
                pil = pil.resize((image_size[1], image_size[0]), Image.BILINEAR)
            img = np.asarray(pil)
        out.append(img)
    frames = np.stack(out).astype(np.float32) / 255.0
    if image_size is not None and frames.shape[1:] != tuple(image_size):
        raise ValueError(f"frames are {frames.shape[1:]}, expected {tuple(image_size)}")
    return frames
