"""Training-time augmentation on normalized (3, H, W) tensors."""

import math
from dataclasses import dataclass

import torch


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: float = 0.3
    # 0 is the dataset mean after normalization
    erase_fill: float = 0.0

    def __post_init__(self):
        for name in ("flip_prob", "erase_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"invalid erase_area {self.erase_area}")
        if not 0.0 < self.erase_aspect <= 1.0:
            raise ValueError(f"erase_aspect must lie in (0, 1], got {self.erase_aspect}")


def hflip(image):
    return image.flip(-1)


def erase_box(height, width, cfg, rng, attempts=100):
    """Random-erasing rectangle ``(top, left, h, w)``, or None if no attempt fits."""
    area = height * width
    for _ in range(attempts):
        target = area * rng.uniform(*cfg.erase_area)
        aspect = rng.uniform(cfg.erase_aspect, 1.0 / cfg.erase_aspect)
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < height and 0 < w < width:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return None


def random_erase(image, cfg, rng):
    box = erase_box(image.shape[-2], image.shape[-1], cfg, rng)
    if box is None:
        return image
    top, left, h, w = box
    image = image.clone()
    image[:, top:top + h, left:left + w] = cfg.erase_fill
    return image


def augment(image, cfg: AugmentConfig, rng):
    """Random horizontal flip then random erasing; ``rng`` is a numpy Generator."""
    if rng.random() < cfg.flip_prob:
        image = hflip(image)
    if rng.random() < cfg.erase_prob:
        image = random_erase(image, cfg, rng)
    return image
