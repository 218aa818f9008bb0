"""Batch DropBlock and Gaussian continuous dropout.

Both take an explicit ``torch.Generator`` so that masks are reproducible
independently of the global RNG.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn


@dataclass
class BdbConfig:
    height_ratio: float = 0.3
    width_ratio: float = 1.0
    apply_to: tuple = field(default=("local",))

    def __post_init__(self):
        for name in ("height_ratio", "width_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {r}")


@dataclass
class GcdConfig:
    sigma: float = 0.5

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def _randint(high, generator):
    # inclusive upper bound
    return int(torch.randint(0, high + 1, (1,), generator=generator).item())


def drop_region(height, width, cfg: BdbConfig, generator=None):
    """Sample the ``(top, left, block_h, block_w)`` rectangle shared by a whole batch."""
    bh = math.ceil(cfg.height_ratio * height)
    bw = math.ceil(cfg.width_ratio * width)
    top = _randint(height - bh, generator)
    left = _randint(width - bw, generator)
    return top, left, bh, bw


def batch_dropblock(fmaps, cfg: BdbConfig, generator=None, training=True):
    """Zero one rectangle, identical for every sample and channel; identity in eval mode."""
    if not training:
        return fmaps
    h, w = fmaps.shape[-2:]
    top, left, bh, bw = drop_region(h, w, cfg, generator)
    if bh == 0 or bw == 0:
        return fmaps
    mask = fmaps.new_ones((h, w))
    mask[top:top + bh, left:left + bw] = 0
    return fmaps * mask


def gaussian_continuous_dropout(x, cfg: GcdConfig, generator=None, training=True):
    """Multiply by i.i.d. ``Normal(1, sigma^2)`` noise in training; identity otherwise."""
    if not training or cfg.sigma == 0:
        return x
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    return x * (1.0 + cfg.sigma * noise)


class BatchDropBlock(nn.Module):
    def __init__(self, cfg: BdbConfig, generator=None):
        super().__init__()
        self.cfg = cfg
        self.generator = generator

    def forward(self, x):
        return batch_dropblock(x, self.cfg, self.generator, self.training)

    def extra_repr(self):
        return f"height_ratio={self.cfg.height_ratio}, width_ratio={self.cfg.width_ratio}"


class GaussianDropout(nn.Module):
    def __init__(self, cfg: GcdConfig, generator=None):
        super().__init__()
        self.cfg = cfg
        self.generator = generator

    def forward(self, x):
        return gaussian_continuous_dropout(x, self.cfg, self.generator, self.training)

    def extra_repr(self):
        return f"sigma={self.cfg.sigma}"
