"""Flat ``key = value`` run configuration with dotted keys.

Every key has a typed default in :data:`DEFAULTS`; unknown keys and values
that do not parse are rejected before any work starts.
"""

import hashlib
import json
from pathlib import Path

from .backbone import BRANCH_IDS, TRUNK_VARIANTS, TrunkConfig
from .losses import TRIPLET_MODES, LossWeights, TripletConfig
from .model import ModelConfig
from .regularization import BdbConfig, GcdConfig

DATA_ROOT_ENV = "BCOSNET_DATA_ROOT"

ALL_BRANCHES = ",".join(BRANCH_IDS)

# key -> (kind, default)
DEFAULTS = {
    "seed": ("int", 0),
    "deterministic": ("bool", True),
    "trunk.variant": ("str", "osnet_like"),
    "trunk.out_channels": ("int", 512),
    "trunk.share_tail_stages": ("bool", False),
    "trunk.stride": ("int", 16),
    "branches": ("strlist", ALL_BRANCHES),
    "ovr_splits": ("intlist", "6"),
    "bottleneck.channels": ("int", 256),
    "gem.enabled": ("bool", True),
    "gem.local_p": ("float", 1.0),
    "gem.global_p": ("float", 6.5),
    "gem.learnable": ("bool", True),
    "gem.eps": ("float", 1e-6),
    "neck.bn": ("bool", True),
    "loss.id_weight": ("float", 1.0),
    "loss.triplet_weight": ("float", 1.0),
    "loss.center_weight": ("float", 5e-4),
    "loss.triplet_mode": ("str", "softplus"),
    "loss.margin": ("float", 0.3),
    "loss.center_lr": ("float", 0.5),
    "loss.triplet_branches": ("strlist", ALL_BRANCHES),
    "loss.center_branches": ("strlist", ALL_BRANCHES),
    "bdb.enabled": ("bool", False),
    "bdb.height_ratio": ("float", 0.3),
    "bdb.width_ratio": ("float", 1.0),
    "bdb.branches": ("strlist", "local"),
    "gcd.enabled": ("bool", False),
    "gcd.sigma": ("float", 0.5),
    "optim.base_lr": ("float", 3.5e-4),
    "optim.lr_after_60": ("float", 3.5e-5),
    "optim.lr_after_130": ("float", 3e-6),
    "optim.milestones": ("intlist", "60,130"),
    "optim.weight_decay": ("float", 5e-4),
    "optim.momentum_beta": ("float", 0.9),
    "optim.beta2": ("float", 0.999),
    "optim.epochs": ("int", 160),
    "optim.warmup_epochs": ("int", 10),
    "optim.warmup_start_factor": ("float", 0.1),
    "train.max_steps": ("int", 0),
    "train.checkpoint_interval": ("int", 10),
    "data.root": ("str", ""),
    "data.layout": ("str", "market_style"),
    "data.height": ("int", 256),
    "data.width": ("int", 128),
    "data.P": ("int", 16),
    "data.K": ("int", 4),
    "data.synth.num_ids": ("int", 8),
    "data.synth.imgs_per_id": ("int", 8),
    "data.synth.eval_per_id": ("int", 4),
    "data.synth.seed": ("int", 0),
    "data.synth.noise": ("float", 0.1),
    "data.synth.tint": ("float", 0.15),
    "augment.enabled": ("bool", True),
    "augment.flip_prob": ("float", 0.5),
    "augment.erase_prob": ("float", 0.5),
    "augment.erase_area": ("floatlist", "0.02,0.4"),
    "augment.erase_aspect": ("float", 0.3),
    "augment.erase_fill": ("float", 0.0),
    "eval.distance": ("str", "euclidean"),
    "eval.normalize": ("bool", True),
    "eval.interval": ("int", 0),
    "eval.batch_size": ("int", 128),
}

CHOICES = {
    "trunk.variant": TRUNK_VARIANTS,
    "loss.triplet_mode": TRIPLET_MODES,
    "data.layout": ("market_style", "cuhk03_style", "synthetic"),
    "eval.distance": ("euclidean", "cosine"),
}

# desk-scale settings used by the tests, the acceptance suite and `--preset synthetic`
SYNTHETIC_PRESET = {
    "trunk.variant": "tiny_test",
    "trunk.out_channels": "32",
    "trunk.stride": "8",
    "bottleneck.channels": "16",
    "data.layout": "synthetic",
    "data.height": "64",
    "data.width": "32",
    "data.P": "8",
    "data.K": "4",
    "optim.base_lr": "3e-3",
    "optim.lr_after_60": "3e-4",
    "optim.lr_after_130": "3e-5",
    "optim.milestones": "100,140",
    "optim.epochs": "150",
    "optim.warmup_epochs": "5",
    "augment.erase_prob": "0.0",
}


class ConfigError(Exception):
    pass


def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse(kind, raw):
    if not isinstance(raw, str):
        raw = format_value(kind, raw)
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        return _parse_bool(raw)
    if kind == "str":
        return raw
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if kind == "strlist":
        return tuple(items)
    if kind == "intlist":
        return tuple(int(x) for x in items)
    if kind == "floatlist":
        return tuple(float(x) for x in items)
    raise AssertionError(kind)


def format_value(kind, value):
    if kind.endswith("list"):
        return ",".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def parse_text(text):
    """Parse ``key = value`` lines (``#`` starts a comment) into a raw dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(*layers, env=None):
    """Merge raw layers over the defaults, validate, and return a typed flat dict."""
    raw = {}
    for layer in layers:
        raw.update(layer or {})
    unknown = sorted(k for k in raw if k not in DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg, bad = {}, []
    for key, (kind, default) in DEFAULTS.items():
        value = raw.get(key, default)
        try:
            cfg[key] = _parse(kind, value)
        except ValueError as e:
            bad.append(f"{key}={value!r} ({e})")
    if bad:
        raise ConfigError("invalid config values: " + "; ".join(bad))
    if env and env.get(DATA_ROOT_ENV) and "data.root" not in raw:
        cfg["data.root"] = env[DATA_ROOT_ENV]
    validate(cfg)
    return cfg


def validate(cfg):
    bad = []
    for key, choices in CHOICES.items():
        if cfg[key] not in choices:
            bad.append(f"{key}={cfg[key]!r} not in {choices}")
    for key in ("branches", "loss.triplet_branches", "loss.center_branches", "bdb.branches"):
        unknown = [b for b in cfg[key] if b not in BRANCH_IDS]
        if unknown:
            bad.append(f"{key} has unknown branches {unknown}")
    if not cfg["branches"]:
        bad.append("branches must not be empty")
    if len(cfg["optim.milestones"]) != 2:
        bad.append("optim.milestones needs exactly two epochs")
    if len(cfg["augment.erase_area"]) != 2:
        bad.append("augment.erase_area needs two values")
    if bad:
        raise ConfigError("invalid config: " + "; ".join(bad))
    # construct the dataclasses once so their own checks run up front
    try:
        build_model_config(cfg, num_classes=2)
        build_loss_configs(cfg)
        build_optim_config(cfg)
    except ValueError as e:
        raise ConfigError(f"invalid config: {e}") from e


def load_config(path=None, overrides=None, preset=None, env=None):
    layers = []
    if preset == "synthetic":
        layers.append(SYNTHETIC_PRESET)
    elif preset is not None:
        raise ConfigError(f"unknown preset {preset!r}")
    if path is not None:
        try:
            layers.append(parse_text(Path(path).read_text()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    layers.append(parse_overrides(overrides))
    return resolve(*layers, env=env)


def dump_text(cfg):
    return "".join(f"{k} = {format_value(DEFAULTS[k][0], cfg[k])}\n" for k in sorted(cfg))


def config_hash(cfg):
    canon = json.dumps({k: format_value(DEFAULTS[k][0], v) for k, v in cfg.items()}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def build_model_config(cfg, num_classes):
    return ModelConfig(
        num_classes=num_classes,
        trunk=TrunkConfig(cfg["trunk.variant"], cfg["trunk.out_channels"], cfg["trunk.share_tail_stages"],
                          cfg["trunk.stride"]),
        branches=cfg["branches"],
        reduced_channels=cfg["bottleneck.channels"],
        ovr_splits=cfg["ovr_splits"],
        gem_enabled=cfg["gem.enabled"],
        gem_local_p=cfg["gem.local_p"],
        gem_global_p=cfg["gem.global_p"],
        gem_learnable=cfg["gem.learnable"],
        gem_eps=cfg["gem.eps"],
        bn_neck=cfg["neck.bn"],
        bdb=BdbConfig(cfg["bdb.height_ratio"], cfg["bdb.width_ratio"], cfg["bdb.branches"])
        if cfg["bdb.enabled"] else None,
        gcd=GcdConfig(cfg["gcd.sigma"]) if cfg["gcd.enabled"] else None,
    )


def build_loss_configs(cfg):
    weights = LossWeights(cfg["loss.id_weight"], cfg["loss.triplet_weight"], cfg["loss.center_weight"])
    return weights, TripletConfig(cfg["loss.triplet_mode"], cfg["loss.margin"])


def build_optim_config(cfg):
    from .training import OptimConfig

    first, second = cfg["optim.milestones"]
    return OptimConfig(
        base_lr=cfg["optim.base_lr"],
        lr_after_60=cfg["optim.lr_after_60"],
        lr_after_130=cfg["optim.lr_after_130"],
        milestones=(first, second),
        weight_decay=cfg["optim.weight_decay"],
        momentum_beta=cfg["optim.momentum_beta"],
        beta2=cfg["optim.beta2"],
        epochs=cfg["optim.epochs"],
        warmup_epochs=cfg["optim.warmup_epochs"],
        warmup_start_factor=cfg["optim.warmup_start_factor"],
    )
