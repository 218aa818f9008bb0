from .ingest import (
    LAYOUTS,
    DataError,
    PersonImageRecord,
    ReIDDataset,
    ingest_dataset,
    load_manifest,
    parse_market_name,
)
from .sampler import LabeledBatch, PkBatchSpec, PKSampler, group_by_identity, pk_sample
from .synthetic import synth_dataset, write_market_layout
from .transforms import AugmentConfig, augment

__all__ = [
    "LAYOUTS",
    "AugmentConfig",
    "DataError",
    "LabeledBatch",
    "PKSampler",
    "PersonImageRecord",
    "PkBatchSpec",
    "ReIDDataset",
    "augment",
    "group_by_identity",
    "ingest_dataset",
    "load_manifest",
    "parse_market_name",
    "pk_sample",
    "synth_dataset",
    "write_market_layout",
]
