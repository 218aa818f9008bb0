"""The four cooperative heads: local stripes, global GeM, GCP and one-vs-rest relation."""

import torch
import torch.nn as nn

from .pooling import AvgPool, GeM, avg_pool, max_pool


def stripe_bounds(height, num_stripes):
    """Row ranges of ``num_stripes`` horizontal stripes covering ``height`` rows.

    Stripes are contiguous; when the split is uneven the topmost stripes
    take one extra row each.
    """
    if num_stripes < 1:
        raise ValueError("need at least one stripe")
    if height < num_stripes:
        raise ValueError(f"feature map height {height} < number of stripes {num_stripes}")
    base, extra = divmod(height, num_stripes)
    bounds, start = [], 0
    for i in range(num_stripes):
        end = start + base + (1 if i < extra else 0)
        bounds.append((start, end))
        start = end
    return bounds


def split_stripes(fmap, num_stripes):
    return [fmap[:, :, a:b] for a, b in stripe_bounds(fmap.shape[2], num_stripes)]


def branch_dim(branch, channels, reduced, ovr_splits=(6,)):
    if branch == "local":
        return 4 * channels
    if branch == "global":
        return channels
    if branch == "gcp":
        return reduced
    if branch == "ovr":
        return sum(ovr_splits) * reduced
    raise ValueError(f"unknown branch {branch!r}")


class Bottleneck(nn.Sequential):
    """1x1 channel reduction (a linear map on pooled vectors) + BN + ReLU."""

    def __init__(self, cin, cout):
        if cout >= cin:
            raise ValueError(f"bottleneck must reduce channels, got {cin} -> {cout}")
        super().__init__(nn.Linear(cin, cout, bias=False), nn.BatchNorm1d(cout), nn.ReLU())


class LocalBranch(nn.Module):
    def __init__(self, pool=None, num_stripes=4):
        super().__init__()
        self.num_stripes = num_stripes
        self.pool = pool if pool is not None else GeM(p=1.0)

    def forward(self, fmap):
        parts = [self.pool(s) for s in split_stripes(fmap, self.num_stripes)]
        return torch.cat(parts, dim=1)


class GlobalBranch(nn.Module):
    def __init__(self, pool=None):
        super().__init__()
        self.pool = pool if pool is not None else GeM(p=6.5)

    def forward(self, fmap):
        return self.pool(fmap)


def contrastive_inputs(fmap, num_stripes=6):
    """Return ``(f_avg, f_max, f_cont)`` for global contrastive pooling.

    ``f_avg`` is the *sum* of the per-stripe averages, ``f_max`` is the
    max over the whole map and ``f_cont = (f_avg - f_max) / (n - 1)``.
    """
    if num_stripes < 2:
        raise ValueError("contrastive pooling needs at least 2 stripes")
    f_avg = sum(avg_pool(s) for s in split_stripes(fmap, num_stripes))
    f_max = max_pool(fmap)
    f_cont = (f_avg - f_max) / (num_stripes - 1)
    return f_avg, f_max, f_cont


class GCPBranch(nn.Module):
    def __init__(self, channels, reduced=256, num_stripes=6):
        super().__init__()
        if num_stripes < 2:
            raise ValueError("contrastive pooling needs at least 2 stripes")
        self.num_stripes = num_stripes
        self.reduce_max = Bottleneck(channels, reduced)
        self.reduce_cont = Bottleneck(channels, reduced)
        self.fuse = Bottleneck(2 * reduced, reduced)

    def forward(self, fmap):
        _, f_max, f_cont = contrastive_inputs(fmap, self.num_stripes)
        f_max = self.reduce_max(f_max)
        f_cont = self.reduce_cont(f_cont)
        return f_max + self.fuse(torch.cat([f_max, f_cont], dim=1))


def one_vs_rest(parts):
    """For stacked part features ``(N, h, C)`` return the mean of the other parts for each part."""
    h = parts.shape[1]
    if h < 2:
        raise ValueError("one-vs-rest relation needs at least 2 parts")
    total = parts.sum(dim=1, keepdim=True)
    return (total - parts) / (h - 1)


class RelationUnit(nn.Module):
    def __init__(self, channels, reduced):
        super().__init__()
        self.reduce_part = Bottleneck(channels, reduced)
        self.reduce_rest = Bottleneck(channels, reduced)
        self.fuse = Bottleneck(2 * reduced, reduced)

    def forward(self, part, rest):
        part = self.reduce_part(part)
        rest = self.reduce_rest(rest)
        return part + self.fuse(torch.cat([part, rest], dim=1))


class OvRBranch(nn.Module):
    """One-vs-rest relation over ``h`` stripes for every ``h`` in ``splits``; one unit per part."""

    def __init__(self, channels, reduced=256, splits=(6,)):
        super().__init__()
        splits = tuple(int(h) for h in splits)
        if not splits:
            raise ValueError("ovr branch needs at least one split")
        for h in splits:
            if h < 2:
                raise ValueError(f"one-vs-rest split must have >= 2 stripes, got {h}")
        self.splits = splits
        self.units = nn.ModuleDict(
            {f"h{h}": nn.ModuleList(RelationUnit(channels, reduced) for _ in range(h)) for h in splits}
        )

    def forward(self, fmap):
        out = []
        for h in self.splits:
            parts = torch.stack([avg_pool(s) for s in split_stripes(fmap, h)], dim=1)
            rests = one_vs_rest(parts)
            for i, unit in enumerate(self.units[f"h{h}"]):
                out.append(unit(parts[:, i], rests[:, i]))
        return torch.cat(out, dim=1)


def make_pool(p, gem_enabled=True, learnable=True, eps=1e-6):
    if not gem_enabled:
        return AvgPool()
    return GeM(p=p, learnable=learnable, eps=eps)
