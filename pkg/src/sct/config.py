"""Run configuration and manifests.

One nested config drives the whole pipeline. Sources compose as
flags > config file > defaults; unknown keys anywhere are an error, and
the top-level seed governs every stage (section seeds follow it).
"""
from __future__ import annotations

import dataclasses
import json
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, fields

from . import __version__
from .lm import FinetuneConfig, LmConfig
from .pretrain import SCORING_KINDS, PretrainConfig
from .sgm import SgmConfig

FINETUNE_EPOCH_GRID = (3, 4, 5)
FINETUNE_LR_GRID = (1e-4, 3e-4, 5e-4)
PROVIDERS = ("remote", "fallback")
MASK_MODES = ("all", "answer_only")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "synthetic"     # bundled name or a split directory
    out_dir: str = "runs/demo"
    seed: int = 0
    provider: str = "fallback"
    embed_dim: int = 384
    # embed relation descriptions when available, raw names otherwise
    use_descriptions: bool = True
    n_candidates: int = 20
    sgm: SgmConfig = field(default_factory=SgmConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)


_SECTIONS = {"sgm": SgmConfig, "pretrain": PretrainConfig, "lm": LmConfig,
             "finetune": FinetuneConfig}


def _build(cls, blob: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(blob) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: "
                          + ", ".join(unknown))
    kwargs = {}
    for key, value in blob.items():
        sub = _SECTIONS.get(key)
        if sub is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            kwargs[key] = _build(sub, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(blob: dict) -> RunConfig:
    cfg = _build(RunConfig, blob, "")
    _normalize(cfg)
    validate(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """``overrides`` maps dotted paths (e.g. "pretrain.scoring") to raw
    values; they win over the file, which wins over defaults."""
    blob = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            blob = json.load(f)
        if not isinstance(blob, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    cfg = _build(RunConfig, blob, "")
    for dotted, value in (overrides or {}).items():
        _apply(cfg, dotted, value)
    _normalize(cfg)
    validate(cfg)
    return cfg


def _apply(cfg, dotted: str, value):
    obj = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    known = {f.name: f for f in fields(obj)}
    if leaf not in known:
        raise ConfigError(f"unknown config key {dotted!r}")
    ftype = known[leaf].type
    if isinstance(value, str) and ftype in ("int", "float", "bool"):
        try:
            value = {"int": int, "float": float,
                     "bool": lambda s: {"true": True, "false": False}[s.lower()]
                     }[ftype](value)
        except (ValueError, KeyError):
            raise ConfigError(f"{dotted}: cannot parse {value!r} as {ftype}")
    setattr(obj, leaf, value)


def _normalize(cfg: RunConfig):
    cfg.pretrain.seed = cfg.seed
    cfg.finetune.seed = cfg.seed


def validate(cfg: RunConfig):
    if cfg.provider not in PROVIDERS:
        raise ConfigError(f"provider must be one of {PROVIDERS}, "
                          f"got {cfg.provider!r}")
    if cfg.pretrain.scoring not in SCORING_KINDS:
        raise ConfigError(f"pretrain.scoring must be one of {SCORING_KINDS}, "
                          f"got {cfg.pretrain.scoring!r}")
    if cfg.finetune.mask_mode not in MASK_MODES:
        raise ConfigError(f"finetune.mask_mode must be one of {MASK_MODES}, "
                          f"got {cfg.finetune.mask_mode!r}")
    if cfg.finetune.epochs not in FINETUNE_EPOCH_GRID:
        raise ConfigError(
            f"finetune.epochs searched over {FINETUNE_EPOCH_GRID}, "
            f"got {cfg.finetune.epochs}")
    if cfg.finetune.lr not in FINETUNE_LR_GRID:
        raise ConfigError(f"finetune.lr tuned over {FINETUNE_LR_GRID}, "
                          f"got {cfg.finetune.lr}")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be non-negative, got {cfg.seed}")
    if cfg.embed_dim <= 0:
        raise ConfigError(f"embed_dim must be positive, got {cfg.embed_dim}")
    if cfg.n_candidates <= 0:
        raise ConfigError(
            f"n_candidates must be positive, got {cfg.n_candidates}")


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0 and out.stdout.strip():
            return f"sct-{__version__}+{out.stdout.strip()}"
    except OSError:
        pass
    return f"sct-{__version__}"


@dataclass
class RunManifest:
    command: str
    config: dict
    version: str
    seed: int
    started: float
    finished: float
    artifacts: dict
    metrics: dict


def write_manifest(path: str, manifest: RunManifest):
    """Atomic write: the file is either absent or complete."""
    blob = dataclasses.asdict(manifest)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(blob, f, indent=1, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path: str) -> RunManifest:
    with open(path, "r", encoding="utf-8") as f:
        return RunManifest(**json.load(f))
