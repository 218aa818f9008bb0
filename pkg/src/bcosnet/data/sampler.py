"""P identities x K instances batch construction."""

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch

from .ingest import DataError


@dataclass
class PkBatchSpec:
    P: int = 16
    K: int = 4

    def __post_init__(self):
        if self.P < 1 or self.K < 1:
            raise ValueError(f"P and K must be positive, got P={self.P}, K={self.K}")

    @property
    def batch_size(self):
        return self.P * self.K


@dataclass
class LabeledBatch:
    images: torch.Tensor
    labels: torch.Tensor
    camera_ids: torch.Tensor
    indices: list


def group_by_identity(labels):
    groups = defaultdict(list)
    for i, y in enumerate(labels):
        groups[int(y)].append(i)
    return dict(groups)


def pick_instances(indices, K, rng):
    """K indices of one identity; with replacement only when fewer than K exist.

    Every available image is used at least once before any repeat.
    """
    indices = np.asarray(indices)
    if len(indices) >= K:
        return indices[rng.permutation(len(indices))[:K]].tolist()
    extra = rng.choice(len(indices), size=K - len(indices), replace=True)
    chosen = np.concatenate([rng.permutation(len(indices)), extra])
    return indices[rng.permutation(chosen)].tolist()


def pk_sample(groups, spec: PkBatchSpec, rng, identities=None):
    """Dataset indices for one PK batch, identity-major (K consecutive per identity)."""
    if len(groups) < spec.P:
        raise DataError(f"PK sampling needs {spec.P} identities, dataset has {len(groups)}")
    if identities is None:
        keys = sorted(groups)
        identities = [keys[i] for i in rng.choice(len(keys), size=spec.P, replace=False)]
    out = []
    for pid in identities:
        out.extend(pick_instances(groups[pid], spec.K, rng))
    return out


class PKSampler:
    """One epoch = one pass over the shuffled identity list in chunks of P.

    A trailing chunk with fewer than P identities is dropped.
    """

    def __init__(self, labels, spec: PkBatchSpec):
        self.groups = group_by_identity(labels)
        self.spec = spec
        if len(self.groups) < spec.P:
            raise DataError(f"PK sampling needs {spec.P} identities, dataset has {len(self.groups)}")

    def __len__(self):
        return len(self.groups) // self.spec.P

    def epoch(self, rng):
        keys = sorted(self.groups)
        order = [keys[i] for i in rng.permutation(len(keys))]
        for b in range(len(self)):
            chunk = order[b * self.spec.P:(b + 1) * self.spec.P]
            yield pk_sample(self.groups, self.spec, rng, identities=chunk)
