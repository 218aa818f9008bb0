"""Identity, batch-hard triplet and center losses, and their weighted per-branch sum."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

TRIPLET_MODES = ("softplus", "hinge_margin")


@dataclass
class LossWeights:
    id: float = 1.0
    triplet: float = 1.0
    center: float = 5e-4

    def __post_init__(self):
        if min(self.id, self.triplet, self.center) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.id, self.triplet, self.center) <= 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TripletConfig:
    mode: str = "softplus"
    margin: float = 0.3

    def __post_init__(self):
        if self.mode not in TRIPLET_MODES:
            raise ValueError(f"unknown triplet mode {self.mode!r}")
        if self.margin < 0:
            raise ValueError("triplet margin must be >= 0")


class ClassifierHead(nn.Linear):
    """``W^T f + b`` over the training identities."""

    def __init__(self, embed_dim, num_identities):
        super().__init__(embed_dim, num_identities, bias=True)
        nn.init.normal_(self.weight, std=0.001)
        nn.init.zeros_(self.bias)


def _check_labels(labels, num_classes):
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min().item()}, {labels.max().item()}]")


def id_loss(embeddings, labels, head):
    """Mean softmax cross-entropy of the true identity."""
    if embeddings.shape[0] == 0:
        raise ValueError("empty batch")
    _check_labels(labels, head.out_features)
    return F.cross_entropy(head(embeddings), labels)


def euclidean_dist(x, y=None):
    """Pairwise Euclidean distances computed from explicit differences.

    Coincident points get an exact zero with a zero subgradient; the floor
    only guards the unused branch of the select.
    """
    y = x if y is None else y
    diff = x.unsqueeze(1) - y.unsqueeze(0)
    sq = diff.pow(2).sum(-1)
    return torch.where(sq > 0, sq.clamp(min=torch.finfo(sq.dtype).tiny).sqrt(), torch.zeros_like(sq))


def _check_pk(labels):
    ids, counts = labels.unique(return_counts=True)
    if ids.numel() < 2:
        raise ValueError("batch-hard mining needs at least 2 identities")
    if counts.min() < 2:
        bad = ids[counts < 2].tolist()
        raise ValueError(f"identities {bad} have fewer than 2 instances in the batch")


def hard_example_mining(dist, labels):
    """Hardest positive (farthest, self excluded) and hardest negative (closest) per anchor.

    Returns ``(d_ap, d_an, pos_idx, neg_idx)``. Ties resolve to the lowest
    index, which is what ``torch.max``/``torch.min`` along a dim return.
    """
    n = dist.shape[0]
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(n, dtype=torch.bool, device=dist.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    inf = torch.tensor(float("inf"), dtype=dist.dtype, device=dist.device)
    d_ap, pos_idx = torch.where(pos_mask, dist, -inf).max(dim=1)
    d_an, neg_idx = torch.where(neg_mask, dist, inf).min(dim=1)
    return d_ap, d_an, pos_idx, neg_idx


def triplet_loss_batch_hard(embeddings, labels, cfg=None, P=None, K=None):
    """Batch-hard triplet loss averaged over anchors.

    ``P``/``K`` are optional and only checked against the batch layout.
    """
    cfg = cfg or TripletConfig()
    _check_pk(labels)
    if P is not None and K is not None:
        if P < 2 or K < 2:
            raise ValueError(f"need P >= 2 and K >= 2, got P={P}, K={K}")
        if embeddings.shape[0] != P * K:
            raise ValueError(f"batch of {embeddings.shape[0]} is not P*K = {P * K}")
    d_ap, d_an, _, _ = hard_example_mining(euclidean_dist(embeddings), labels)
    if cfg.mode == "softplus":
        per_anchor = F.softplus(d_ap - d_an)
    else:
        per_anchor = F.relu(cfg.margin + d_ap - d_an)
    return per_anchor.mean()


def center_loss(embeddings, labels, centers):
    """``0.5 * sum_i ||x_i - c_{y_i}||^2`` (summed, not averaged, over the batch)."""
    _check_labels(labels, centers.shape[0])
    return 0.5 * (embeddings - centers[labels]).pow(2).sum()


class CenterLoss(nn.Module):
    """Center loss whose centers live in a buffer and move by their own update rule."""

    def __init__(self, num_classes, dim, center_lr=0.5):
        super().__init__()
        if center_lr <= 0:
            raise ValueError("center_lr must be positive")
        self.center_lr = center_lr
        self.register_buffer("centers", torch.randn(num_classes, dim) * 0.01)

    def forward(self, embeddings, labels):
        return center_loss(embeddings, labels, self.centers)

    @torch.no_grad()
    def center_delta(self, embeddings, labels):
        """``delta_j = sum_{i: y_i = j} (c_j - x_i) / (1 + n_j)``; zero for absent classes."""
        _check_labels(labels, self.centers.shape[0])
        x = embeddings.detach().to(self.centers.dtype)
        delta = torch.zeros_like(self.centers)
        counts = torch.zeros(self.centers.shape[0], dtype=self.centers.dtype, device=x.device)
        delta.index_add_(0, labels, self.centers[labels] - x)
        counts.index_add_(0, labels, torch.ones_like(labels, dtype=self.centers.dtype))
        return delta / (1.0 + counts).unsqueeze(1)

    @torch.no_grad()
    def update_centers(self, embeddings, labels):
        self.centers -= self.center_lr * self.center_delta(embeddings, labels)


def total_loss(per_branch, weights: LossWeights):
    """Weighted sum over branches of ``id``, ``triplet`` and ``center`` terms.

    ``per_branch`` maps branch name to a dict holding any of the three
    components (missing ones count as zero). Returns ``(total, breakdown)``
    where ``breakdown`` has plain floats for logging.
    """
    if not per_branch:
        raise ValueError("total_loss needs at least one enabled branch")
    total = 0.0
    breakdown = {}
    for branch, parts in per_branch.items():
        branch_total = 0.0
        for key, w in (("id", weights.id), ("triplet", weights.triplet), ("center", weights.center)):
            value = parts.get(key)
            if value is None:
                continue
            branch_total = branch_total + w * value
            breakdown[f"{branch}/{key}"] = float(value.detach()) if torch.is_tensor(value) else float(value)
        total = total + branch_total
    breakdown["total"] = float(total.detach()) if torch.is_tensor(total) else float(total)
    return total, breakdown
