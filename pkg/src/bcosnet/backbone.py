"""Shared convolutional trunk and per-branch tail stages.

The ``osnet_like`` trunk follows the coarse OSNet layout (conv1, conv2,
transition, conv3, transition) with a light multi-stream residual block;
it does not try to reproduce OSNet's exact aggregation gate. ``tiny_test``
is a three-layer plain conv stack used by the test-suite.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

BRANCH_IDS = ("local", "global", "gcp", "ovr")
TRUNK_VARIANTS = ("osnet_like", "tiny_test")


@dataclass
class TrunkConfig:
    variant: str = "osnet_like"
    out_channels: int = 512
    share_tail_stages: bool = False
    stride: int = 16

    def __post_init__(self):
        if self.variant not in TRUNK_VARIANTS:
            raise ValueError(f"unknown trunk variant {self.variant!r}, expected one of {TRUNK_VARIANTS}")
        if self.out_channels < 8:
            raise ValueError(f"out_channels must be >= 8, got {self.out_channels}")
        if self.stride not in (8, 16):
            raise ValueError(f"trunk stride must be 8 or 16, got {self.stride}")


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, k=1, stride=1, groups=1, relu=True):
        layers = [
            nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, groups=groups, bias=False),
            nn.BatchNorm2d(cout),
        ]
        if relu:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class LiteConv3x3(nn.Sequential):
    """Pointwise then depthwise 3x3, as in OSNet's Lite 3x3 layer."""

    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 1, bias=False),
            nn.Conv2d(cout, cout, 3, padding=1, groups=cout, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class ChannelGate(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        w = x.mean(dim=(2, 3), keepdim=True)
        w = torch.sigmoid(self.fc2(torch.relu(self.fc1(w))))
        return x * w


class MultiStreamBlock(nn.Module):
    """Residual bottleneck whose middle is a sum of streams with growing receptive field.

    Stream t stacks t lite 3x3 layers; one gate is shared by all streams.
    """

    def __init__(self, cin, cout, streams=4, reduction=4):
        super().__init__()
        mid = max(cout // reduction, 4)
        self.reduce = ConvBNReLU(cin, mid, 1)
        self.streams = nn.ModuleList(
            nn.Sequential(*[LiteConv3x3(mid, mid) for _ in range(t + 1)]) for t in range(streams)
        )
        self.gate = ChannelGate(mid)
        self.expand = ConvBNReLU(mid, cout, 1, relu=False)
        self.shortcut = None if cin == cout else ConvBNReLU(cin, cout, 1, relu=False)

    def forward(self, x):
        h = self.reduce(x)
        h = sum(self.gate(s(h)) for s in self.streams)
        h = self.expand(h)
        identity = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(h + identity)


class Transition(nn.Sequential):
    def __init__(self, channels, downsample=True):
        layers = [ConvBNReLU(channels, channels, 1)]
        if downsample:
            layers.append(nn.AvgPool2d(2, stride=2))
        super().__init__(*layers)


def _osnet_trunk(cfg):
    c = cfg.out_channels
    return nn.Sequential(
        ConvBNReLU(3, 64, 7, stride=2),
        nn.MaxPool2d(3, stride=2, padding=1),
        nn.Sequential(MultiStreamBlock(64, 256), MultiStreamBlock(256, 256)),
        Transition(256),
        nn.Sequential(MultiStreamBlock(256, c), MultiStreamBlock(c, c)),
        Transition(c, downsample=cfg.stride == 16),
    )


def _tiny_trunk(cfg):
    c = cfg.out_channels
    first = 4 if cfg.stride == 16 else 2
    return nn.Sequential(
        ConvBNReLU(3, 16, 3, stride=first),
        ConvBNReLU(16, max(c // 2, 8), 3, stride=2),
        ConvBNReLU(max(c // 2, 8), c, 3, stride=2),
    )


def _tail(cfg):
    c = cfg.out_channels
    if cfg.variant == "tiny_test":
        return nn.Sequential(ConvBNReLU(c, c, 3), ConvBNReLU(c, c, 1))
    return nn.Sequential(
        nn.Sequential(MultiStreamBlock(c, c), MultiStreamBlock(c, c)),
        ConvBNReLU(c, c, 1),
    )


class SharedTrunk(nn.Module):
    def __init__(self, cfg: TrunkConfig):
        super().__init__()
        self.cfg = cfg
        self.body = _osnet_trunk(cfg) if cfg.variant == "osnet_like" else _tiny_trunk(cfg)

    @property
    def stride(self):
        return self.cfg.stride

    @property
    def out_channels(self):
        return self.cfg.out_channels

    def forward(self, images):
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images of shape (N, 3, H, W), got {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise ValueError("trunk input contains non-finite values")
        return self.body(images)


class BranchTails(nn.Module):
    """conv4/conv5 stages, private to each branch unless ``share_tail_stages``."""

    def __init__(self, cfg: TrunkConfig, branches=BRANCH_IDS):
        super().__init__()
        self.shared = cfg.share_tail_stages
        if self.shared:
            self.tail = _tail(cfg)
            self.branches = tuple(branches)
        else:
            self.tails = nn.ModuleDict({b: _tail(cfg) for b in branches})

    def forward(self, fmap, branch_id):
        if branch_id not in BRANCH_IDS:
            raise ValueError(f"unknown branch {branch_id!r}")
        if self.shared:
            if branch_id not in self.branches:
                raise ValueError(f"branch {branch_id!r} is not enabled")
            return self.tail(fmap)
        if branch_id not in self.tails:
            raise ValueError(f"branch {branch_id!r} is not enabled")
        return self.tails[branch_id](fmap)


def trunk_forward(images, trunk: SharedTrunk):
    """Run the trunk on a tensor batch or a list of (3, H, W) images."""
    if isinstance(images, (list, tuple)):
        sizes = {tuple(im.shape) for im in images}
        if len(sizes) != 1:
            raise ValueError(f"all images in a batch must share one size, got {sorted(sizes)}")
        images = torch.stack(list(images))
    return trunk(images)
