"""Desk-scale synthetic re-id data.

Each identity is a two-tone "outfit" (top/bottom colours) with a coloured
band at an identity-specific height. Two cameras add opposite colour
tints; every image gets a small vertical shift, brightness jitter and
pixel noise.
"""

from pathlib import Path

import numpy as np

from .ingest import PersonImageRecord, ReIDDataset

# unit tint directions per camera, scaled by ``tint``
CAMERA_TINTS = np.array([[1.0, 0.0, -1.0], [-1.0, 0.0, 1.0]], dtype=np.float32)


def _identity_params(rng, num_ids, height):
    return {
        "top": rng.uniform(0.05, 0.95, size=(num_ids, 3)),
        "bottom": rng.uniform(0.05, 0.95, size=(num_ids, 3)),
        "band": rng.uniform(0.05, 0.95, size=(num_ids, 3)),
        "band_row": rng.integers(height // 8, height - height // 4, size=num_ids),
    }


def _render(params, pid, camera, rng, height, width, noise, tint):
    img = np.empty((height, width, 3), dtype=np.float32)
    shift = max(height // 16, 1)
    split = height // 2 + int(rng.integers(-shift, shift + 1))
    img[:split] = params["top"][pid]
    img[split:] = params["bottom"][pid]
    band_h = max(height // 10, 1)
    row = int(params["band_row"][pid]) + int(rng.integers(-shift, shift + 1))
    img[max(row, 0):row + band_h] = params["band"][pid]
    img *= rng.uniform(0.75, 1.25)
    img += tint * CAMERA_TINTS[camera]
    img += rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(num_ids=8, imgs_per_id=8, image_size=(64, 32), seed=0, eval_per_id=4, noise=0.1, tint=0.15):
    """Synthetic dataset with ``num_ids * imgs_per_id`` training images.

    Held-out images of the same identities form the evaluation split: per
    identity, the first of ``eval_per_id`` images (camera 0) is the query
    and the remaining ones, alternating cameras, go to the gallery.
    Person ids start at 1 so they follow the market-style convention.
    """
    if num_ids < 2:
        raise ValueError("need at least 2 identities")
    if eval_per_id < 2:
        raise ValueError("eval_per_id must be >= 2 so each query has a gallery match")
    height, width = image_size
    rng = np.random.default_rng(seed)
    params = _identity_params(rng, num_ids, height)
    images = {}
    train, query, gallery = [], [], []

    def add(split, pid, camera, i):
        path = f"synthetic://{split}/{pid + 1:04d}_c{camera + 1}s1_{i:06d}_00.png"
        images[path] = _render(params, pid, camera, rng, height, width, noise, tint)
        return PersonImageRecord(path, pid + 1, camera, split)

    for pid in range(num_ids):
        for i in range(imgs_per_id):
            train.append(add("train", pid, i % 2, i))
    for pid in range(num_ids):
        for i in range(eval_per_id):
            split = "query" if i == 0 else "gallery"
            rec = add(split, pid, i % 2, i)
            (query if i == 0 else gallery).append(rec)
    return ReIDDataset(train, query, gallery, height, width, name=f"synthetic-{num_ids}x{imgs_per_id}-s{seed}",
                       images=images)


def write_market_layout(ds, root):
    """Write an in-memory dataset to disk as market-style PNG folders."""
    from PIL import Image

    from .ingest import SPLIT_DIRS

    root = Path(root)
    for split, sub in SPLIT_DIRS.items():
        folder = root / sub
        folder.mkdir(parents=True, exist_ok=True)
        for rec in getattr(ds, split):
            name = rec.path.rsplit("/", 1)[-1]
            arr = (ds.load_array(rec) * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(folder / name)
    return root
