"""Market-1501-style directory ingestion and the in-memory dataset container."""

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

LAYOUTS = ("market_style", "cuhk03_style", "synthetic")
SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
MANIFEST_NAME = "manifest.json"

# <pid>_c<cam>s<seq>_<frame>_<idx>.<ext>; pid -1 is junk, pid 0 a distractor
MARKET_PATTERN = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(?:jpe?g|png)$", re.IGNORECASE)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class DataError(Exception):
    pass


@dataclass(frozen=True)
class PersonImageRecord:
    path: str
    person_id: int
    camera_id: int
    split: str

    @property
    def junk(self):
        return self.person_id == -1

    @property
    def distractor(self):
        return self.person_id == 0


def parse_market_name(name):
    """Return ``(person_id, camera_id)`` from a market-style file name."""
    m = MARKET_PATTERN.match(name)
    if m is None:
        raise DataError(f"unparseable file name {name!r}")
    return int(m.group(1)), int(m.group(2))


@dataclass
class ReIDDataset:
    train: list
    query: list
    gallery: list
    height: int = 256
    width: int = 128
    name: str = "dataset"
    # path -> HxWx3 float array in [0, 1]; used by the synthetic layout
    images: dict = field(default=None, repr=False)
    # files rejected by the filename grammar when ingesting with strict=False
    skipped: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        pids = sorted({r.person_id for r in self.train_records()})
        self.label_of = {pid: i for i, pid in enumerate(pids)}

    def train_records(self):
        """Training records with junk and distractor images removed."""
        return [r for r in self.train if r.person_id > 0]

    @property
    def num_train_pids(self):
        return len(self.label_of)

    def counts(self):
        out = {}
        for split in ("train", "query", "gallery"):
            recs = getattr(self, split)
            out[split] = {"images": len(recs), "identities": len({r.person_id for r in recs if r.person_id >= 0})}
        return out

    def load_array(self, record):
        if self.images is not None and record.path in self.images:
            return self.images[record.path]
        from PIL import Image

        with Image.open(record.path) as im:
            im = im.convert("RGB").resize((self.width, self.height), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0

    def load(self, record):
        """Normalized (3, H, W) float tensor."""
        arr = (self.load_array(record) - IMAGENET_MEAN) / IMAGENET_STD
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def _file_checksum(paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(p.encode())
        h.update(b"\0")
    return h.hexdigest()


def _scan(root, layout, strict):
    records, errors, listing = {}, [], []
    for split, sub in SPLIT_DIRS.items():
        folder = root / sub
        if not folder.is_dir():
            raise DataError(f"{layout} layout expects directory {folder}")
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        recs = []
        for p in files:
            listing.append(str(p.relative_to(root)))
            try:
                pid, cam = parse_market_name(p.name)
            except DataError:
                errors.append(str(p))
                continue
            if layout == "cuhk03_style" and cam not in (1, 2):
                errors.append(str(p))
                continue
            recs.append(PersonImageRecord(str(p), pid, cam, split))
        records[split] = recs
    if errors and strict:
        shown = "\n  ".join(errors[:20])
        more = f"\n  ... and {len(errors) - 20} more" if len(errors) > 20 else ""
        raise DataError(f"{len(errors)} files do not match the {layout} grammar:\n  {shown}{more}")
    return records, errors, listing


def ingest_dataset(root, layout="market_style", height=256, width=128, strict=True, synth=None, use_manifest=True):
    """Build a :class:`ReIDDataset` from ``root``.

    ``market_style`` and ``cuhk03_style`` expect ``bounding_box_train/``,
    ``query/`` and ``bounding_box_test/`` folders of market-style file names
    (CUHK03 must already be converted to the 767/700 split in that form).
    ``synthetic`` ignores ``root`` and generates data from the ``synth``
    keyword dict (see :func:`bcosnet.data.synth_dataset`).
    """
    if layout not in LAYOUTS:
        raise DataError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if layout == "synthetic":
        from .synthetic import synth_dataset

        synth = dict(synth or {})
        synth.setdefault("image_size", (height, width))
        return synth_dataset(**synth)

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    records, errors, listing = _scan(root, layout, strict)
    for split, recs in records.items():
        if not recs:
            raise DataError(f"split {split!r} under {root} is empty")
    ds = ReIDDataset(records["train"], records["query"], records["gallery"], height, width,
                     name=root.name, skipped=errors)
    if use_manifest:
        try:
            write_manifest(ds, root / MANIFEST_NAME, listing, layout)
        except OSError:
            pass
    return ds


def write_manifest(ds, path, listing, layout):
    payload = {
        "layout": layout,
        "counts": ds.counts(),
        "checksum": _file_checksum(listing),
        "records": {s: [asdict(r) for r in getattr(ds, s)] for s in ("train", "query", "gallery")},
    }
    Path(path).write_text(json.dumps(payload, indent=1))
    return payload


def load_manifest(path, height=256, width=128):
    payload = json.loads(Path(path).read_text())
    recs = {s: [PersonImageRecord(**r) for r in payload["records"][s]] for s in ("train", "query", "gallery")}
    return ReIDDataset(recs["train"], recs["query"], recs["gallery"], height, width, name=Path(path).parent.name)
