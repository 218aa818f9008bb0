"""Optimization loop: Adam, warmup + two-step LR schedule, center updates, checkpoints."""

import json
import logging
import math
import pickle
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data.sampler import LabeledBatch, PkBatchSpec, PKSampler
from .data.transforms import AugmentConfig, augment
from .losses import CenterLoss, LossWeights, TripletConfig, id_loss, total_loss, triplet_loss_batch_hard

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bcosnet-checkpoint/1"


class NumericError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    base_lr: float = 3.5e-4
    lr_after_60: float = 3.5e-5
    lr_after_130: float = 3e-6
    milestones: tuple = (60, 130)
    weight_decay: float = 5e-4
    momentum_beta: float = 0.9
    beta2: float = 0.999
    epochs: int = 160
    warmup_epochs: int = 10
    warmup_start_factor: float = 0.1

    def __post_init__(self):
        if not self.base_lr > self.lr_after_60 > self.lr_after_130 > 0:
            raise ValueError("learning rates must be positive and strictly decreasing")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        first, second = self.milestones
        if not 0 <= self.warmup_epochs <= first < second:
            raise ValueError(f"need warmup_epochs <= first milestone < second, got "
                             f"{self.warmup_epochs}, {self.milestones}")
        if not 0 < self.warmup_start_factor <= 1:
            raise ValueError("warmup_start_factor must lie in (0, 1]")


def lr_at(epoch, cfg: OptimConfig):
    """Learning rate for a 1-based epoch.

    Linear warmup from ``warmup_start_factor * base_lr`` at epoch 1 to
    ``base_lr`` at ``warmup_epochs``, then constant until the first
    milestone, then the two decayed values.
    """
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    first, second = cfg.milestones
    if epoch < cfg.warmup_epochs:
        frac = (epoch - 1) / (cfg.warmup_epochs - 1)
        return cfg.base_lr * (cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * frac)
    if epoch <= first:
        return cfg.base_lr
    if epoch <= second:
        return cfg.lr_after_60
    return cfg.lr_after_130


def set_determinism(seed, deterministic=True):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


class Trainer:
    """Owns the model, optimizer, center states and RNG streams of one run."""

    def __init__(self, model, optim_cfg: OptimConfig, weights: LossWeights, triplet_cfg: TripletConfig,
                 triplet_branches=None, center_branches=None, center_lr=0.5, seed=0):
        self.model = model
        self.optim_cfg = optim_cfg
        self.weights = weights
        self.triplet_cfg = triplet_cfg
        branches = model.branches
        self.triplet_branches = [b for b in branches if triplet_branches is None or b in triplet_branches]
        self.center_branches = [b for b in branches if center_branches is None or b in center_branches]
        dims = model.cfg.dims()
        self.centers = nn.ModuleDict(
            {b: CenterLoss(model.cfg.num_classes, dims[b], center_lr) for b in self.center_branches}
        )
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for c in self.centers.values():
                c.centers.normal_(0.0, 0.01)
        params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(params, lr=optim_cfg.base_lr,
                                          betas=(optim_cfg.momentum_beta, optim_cfg.beta2),
                                          weight_decay=optim_cfg.weight_decay)
        self.rng = np.random.default_rng(seed)
        if model.generator is None:
            model.generator = torch.Generator().manual_seed(seed)
            for m in (model.bdb, model.gcd):
                if m is not None:
                    m.generator = model.generator
        self.epoch = 0
        self.step = 0

    def set_lr(self, epoch):
        lr = lr_at(epoch, self.optim_cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def compute_losses(self, batch: LabeledBatch):
        feats = self.model.embed(batch.images)
        per_branch = {}
        for b, f in feats.items():
            parts = {"id": id_loss(self.model.neck_features(b, f), batch.labels, self.model.classifiers[b])}
            if b in self.triplet_branches:
                parts["triplet"] = triplet_loss_batch_hard(f, batch.labels, self.triplet_cfg)
            if b in self.centers:
                parts["center"] = self.centers[b](f, batch.labels)
            per_branch[b] = parts
        return feats, per_branch

    def train_step(self, batch: LabeledBatch):
        self.model.train()
        feats, per_branch = self.compute_losses(batch)
        for b, parts in per_branch.items():
            for k, v in parts.items():
                if not torch.isfinite(v):
                    raise NumericError(f"non-finite {k} loss in branch {b!r} at step {self.step + 1}")
        total, breakdown = total_loss(per_branch, self.weights)
        if not math.isfinite(breakdown["total"]):
            raise NumericError(f"non-finite total loss at step {self.step + 1}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        for b, c in self.centers.items():
            c.update_centers(feats[b], batch.labels)
        self.step += 1
        return breakdown

    def state_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "epoch": self.epoch,
            "step": self.step,
            "model": self.model.state_dict(),
            "centers": self.centers.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": {
                "numpy": self.rng.bit_generator.state,
                "torch": self.model.generator.get_state() if self.model.generator is not None else None,
            },
            "feature_dim": self.model.cfg.feature_dim,
            "num_classes": self.model.cfg.num_classes,
        }

    def load_state_dict(self, state):
        check_checkpoint(state, self.model)
        self.model.load_state_dict(state["model"])
        self.centers.load_state_dict(state["centers"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["rng"]["numpy"]
        if state["rng"]["torch"] is not None and self.model.generator is not None:
            self.model.generator.set_state(state["rng"]["torch"])
        self.epoch = state["epoch"]
        self.step = state["step"]


def check_checkpoint(state, model):
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a bcosnet checkpoint")
    if state["feature_dim"] != model.cfg.feature_dim:
        raise CheckpointError(f"checkpoint feature dim {state['feature_dim']} does not match "
                              f"configured model feature dim {model.cfg.feature_dim}")
    if state["num_classes"] != model.cfg.num_classes:
        raise CheckpointError(f"checkpoint has {state['num_classes']} identities, "
                              f"config/dataset gives {model.cfg.num_classes}")


def save_checkpoint(state, path, config_text=None):
    state = dict(state)
    if config_text is not None:
        state["config"] = config_text
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


def load_checkpoint(path):
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"cannot load checkpoint {path}: {e}") from e
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a bcosnet checkpoint")
    return state


def load_batch(dataset, indices, records, aug_cfg, rng):
    imgs, labels, cams = [], [], []
    for i in indices:
        rec = records[i]
        img = dataset.load(rec)
        if aug_cfg is not None:
            img = augment(img, aug_cfg, rng)
        imgs.append(img)
        labels.append(dataset.label_of[rec.person_id])
        cams.append(rec.camera_id)
    return LabeledBatch(torch.stack(imgs), torch.tensor(labels, dtype=torch.long),
                        torch.tensor(cams, dtype=torch.long), list(indices))


def fit(trainer, dataset, pk: PkBatchSpec, aug_cfg: AugmentConfig = None, run_dir=None, max_steps=0,
        eval_interval=0, eval_fn=None, checkpoint_interval=0, config_text=None, on_step=None):
    """Run epochs ``trainer.epoch + 1 .. epochs``; returns the list of step records.

    ``eval_fn(model) -> dict`` is called every ``eval_interval`` epochs
    (0 = only at the end). Step records go to ``run_dir/log.jsonl`` and
    checkpoints to ``run_dir/checkpoints/``.
    """
    records = dataset.train_records()
    sampler = PKSampler([r.person_id for r in records], pk)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "log.jsonl", "a")
    history = []
    done = False
    try:
        for epoch in range(trainer.epoch + 1, trainer.optim_cfg.epochs + 1):
            lr = trainer.set_lr(epoch)
            t0 = time.time()
            for indices in sampler.epoch(trainer.rng):
                batch = load_batch(dataset, indices, records, aug_cfg, trainer.rng)
                breakdown = trainer.train_step(batch)
                rec = {"step": trainer.step, "epoch": epoch, "lr": lr, **breakdown}
                history.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                if on_step is not None:
                    on_step(rec)
                if max_steps and trainer.step >= max_steps:
                    done = True
                    break
            trainer.epoch = epoch
            log.info("epoch %d lr %.2e loss %.4f (%.1fs)", epoch, lr, history[-1]["total"] if history else float("nan"),
                     time.time() - t0)
            last = done or epoch == trainer.optim_cfg.epochs
            if eval_fn is not None and (last or (eval_interval and epoch % eval_interval == 0)):
                metrics = eval_fn(trainer.model)
                ev = {"event": "eval", "epoch": epoch, "step": trainer.step, **metrics}
                history.append(ev)
                if log_file is not None:
                    log_file.write(json.dumps(ev) + "\n")
            if run_dir is not None and (last or (checkpoint_interval and epoch % checkpoint_interval == 0)):
                save_checkpoint(trainer.state_dict(), run_dir / "checkpoints" / f"epoch_{epoch:03d}.pt", config_text)
                save_checkpoint(trainer.state_dict(), run_dir / "checkpoints" / "last.pt", config_text)
            if done:
                break
    finally:
        if log_file is not None:
            log_file.close()
    return history
