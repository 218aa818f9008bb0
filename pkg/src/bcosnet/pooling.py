"""Spatial pooling over (N, C, H, W) regions: average, max and generalized mean."""

import torch
import torch.nn as nn

GEM_EPS = 1e-6
# forward-time floor for a learnable exponent
MIN_LEARNED_P = 0.1


def _check_region(x):
    if x.dim() != 4:
        raise ValueError(f"expected a (N, C, H, W) region, got shape {tuple(x.shape)}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ValueError("cannot pool an empty region")


def avg_pool(x):
    _check_region(x)
    return x.mean(dim=(2, 3))


def max_pool(x):
    _check_region(x)
    return x.amax(dim=(2, 3))


def gem_pool(x, p, eps=GEM_EPS):
    """Generalized mean ``((1/n) * sum x_i^p)^(1/p)`` over the spatial cells.

    ``p`` may be a python number or a scalar tensor (learnable). Inputs are
    clamped to ``eps`` first. The power mean is evaluated relative to the
    per-channel maximum so that large exponents do not overflow; the
    rescaling constant is detached, which leaves both value and gradient
    unchanged.
    """
    _check_region(x)
    if not torch.isfinite(x).all():
        raise ValueError("gem_pool received non-finite values")
    if isinstance(p, torch.Tensor):
        if not bool(p.detach() > 0):
            raise ValueError(f"GeM exponent must be positive, got {p.item()}")
    elif p <= 0:
        raise ValueError(f"GeM exponent must be positive, got {p}")
    x = x.clamp(min=eps)
    scale = x.detach().amax(dim=(2, 3), keepdim=True)
    ratio = (x / scale).pow(p).mean(dim=(2, 3))
    return scale.flatten(2).squeeze(-1) * ratio.pow(1.0 / p)


class GeM(nn.Module):
    """GeM pooling with a single (optionally learnable) exponent."""

    def __init__(self, p=3.0, learnable=True, eps=GEM_EPS):
        super().__init__()
        if p < 1:
            raise ValueError(f"GeM exponent must be initialised >= 1, got {p}")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        p = torch.tensor(float(p))
        if learnable:
            self.p = nn.Parameter(p)
        else:
            self.register_buffer("p", p)

    def forward(self, x):
        p = self.p.clamp(min=MIN_LEARNED_P) if isinstance(self.p, nn.Parameter) else self.p
        return gem_pool(x, p, self.eps)

    def extra_repr(self):
        return f"p={self.p.item():.4f}, eps={self.eps}"


class AvgPool(nn.Module):
    """Drop-in replacement for :class:`GeM` when GeM is switched off."""

    def forward(self, x):
        return avg_pool(x)
