"""BC-OSNet: shared trunk, per-branch tails and the four cooperative heads."""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import BRANCH_IDS, BranchTails, SharedTrunk, TrunkConfig
from .branches import GCPBranch, GlobalBranch, LocalBranch, OvRBranch, branch_dim, make_pool
from .losses import ClassifierHead
from .regularization import BatchDropBlock, BdbConfig, GaussianDropout, GcdConfig


@dataclass
class ModelConfig:
    num_classes: int
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    branches: tuple = BRANCH_IDS
    reduced_channels: int = 256
    ovr_splits: tuple = (6,)
    gem_enabled: bool = True
    gem_local_p: float = 1.0
    gem_global_p: float = 6.5
    gem_learnable: bool = True
    gem_eps: float = 1e-6
    bn_neck: bool = True
    bdb: BdbConfig = None
    gcd: GcdConfig = None

    def __post_init__(self):
        self.branches = tuple(self.branches)
        if not self.branches:
            raise ValueError("at least one branch must be enabled")
        unknown = [b for b in self.branches if b not in BRANCH_IDS]
        if unknown:
            raise ValueError(f"unknown branches {unknown}; choose from {BRANCH_IDS}")
        if len(set(self.branches)) != len(self.branches):
            raise ValueError(f"duplicate branches in {self.branches}")
        # keep the canonical order so the concatenated feature layout is fixed
        self.branches = tuple(b for b in BRANCH_IDS if b in self.branches)
        self.ovr_splits = tuple(int(h) for h in self.ovr_splits)
        if not 0 < self.reduced_channels < self.trunk.out_channels:
            raise ValueError(f"bottleneck width {self.reduced_channels} must lie in (0, {self.trunk.out_channels})")
        if self.num_classes < 2:
            raise ValueError("need at least two training identities")

    def dims(self):
        c = self.trunk.out_channels
        return {b: branch_dim(b, c, self.reduced_channels, self.ovr_splits) for b in self.branches}

    @property
    def feature_dim(self):
        return sum(self.dims().values())


class BCOSNet(nn.Module):
    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        self.cfg = cfg
        self.generator = generator
        c, r = cfg.trunk.out_channels, cfg.reduced_channels
        self.trunk = SharedTrunk(cfg.trunk)
        self.tails = BranchTails(cfg.trunk, cfg.branches)

        heads = {}
        for b in cfg.branches:
            if b == "local":
                heads[b] = LocalBranch(make_pool(cfg.gem_local_p, cfg.gem_enabled, cfg.gem_learnable, cfg.gem_eps))
            elif b == "global":
                heads[b] = GlobalBranch(make_pool(cfg.gem_global_p, cfg.gem_enabled, cfg.gem_learnable, cfg.gem_eps))
            elif b == "gcp":
                heads[b] = GCPBranch(c, r)
            else:
                heads[b] = OvRBranch(c, r, cfg.ovr_splits)
        self.heads = nn.ModuleDict(heads)

        dims = cfg.dims()
        self.necks = nn.ModuleDict()
        for b in cfg.branches:
            if cfg.bn_neck:
                bn = nn.BatchNorm1d(dims[b])
                bn.bias.requires_grad_(False)
                self.necks[b] = bn
            else:
                self.necks[b] = nn.Identity()
        self.classifiers = nn.ModuleDict({b: ClassifierHead(dims[b], cfg.num_classes) for b in cfg.branches})

        self.bdb = BatchDropBlock(cfg.bdb, generator) if cfg.bdb is not None else None
        self.gcd = GaussianDropout(cfg.gcd, generator) if cfg.gcd is not None else None

    @property
    def branches(self):
        return self.cfg.branches

    def embed(self, images):
        """Per-branch embeddings (before neck and classifier)."""
        fmap = self.trunk(images)
        out = {}
        for b in self.branches:
            x = self.tails(fmap, b)
            if self.bdb is not None and b in self.cfg.bdb.apply_to:
                x = self.bdb(x)
            out[b] = self.heads[b](x)
        return out

    def neck_features(self, branch, embedding):
        """Classifier input: BN neck, then Gaussian dropout when enabled."""
        x = self.necks[branch](embedding)
        if self.gcd is not None:
            x = self.gcd(x)
        return x

    def classify(self, branch, embedding):
        return self.classifiers[branch](self.neck_features(branch, embedding))

    def forward(self, images):
        feats = self.embed(images)
        return {b: {"feat": f, "logits": self.classify(b, f)} for b, f in feats.items()}

    @torch.no_grad()
    def extract(self, images):
        """Concatenated test-time feature in canonical branch order."""
        feats = self.embed(images)
        return torch.cat([feats[b] for b in self.branches], dim=1)
