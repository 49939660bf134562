"""Run configuration: a flat ``key = value`` text format with typed values.

Values are Python literals (``3``, ``2e-3``, ``true``, ``"one_step"``,
``[28, 32, 36]``). Unknown keys are rejected. Environment variables named
``LCTOK_<KEY>`` override file values.
"""
from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, get_type_hints

from .errors import ConfigError

ENV_PREFIX = "LCTOK_"
FORMAT_VERSION = 1
# Keys that change how a command runs but not what it computes.
RUNTIME_KEYS = frozenset({"stage", "threads", "checkpoint_every"})


@dataclass
class RunConfig:
    stage: str = "all"
    seed: int = 0
    data_dir: str = ""
    threads: int = 1
    checkpoint_every: int = 0

    # data
    n_train: int = 2000
    n_heldout: int = 64
    data_resolution: int = 64
    corrupt_frac: float = 0.05
    quality_threshold: float = 0.002

    # optimiser (shared Adam betas)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99

    # stage 0a: tokenizer
    image_size: int = 32
    vq_codes: int = 512
    vq_dim: int = 32
    vq_factor: int = 4
    vq_channels: int = 16
    cond_sizes: list = field(default_factory=lambda: [28, 32, 36])
    vq_beta: float = 0.25
    vq_steps: int = 3000
    vq_batch: int = 32
    vq_lr: float = 2e-3
    vq_target_psnr: float = 20.0
    vq_dead_reseed: bool = True

    # stage 0b: vae + base denoiser
    vae_latent: int = 4
    vae_factor: int = 4
    vae_channels: int = 16
    vae_kl: float = 1e-6
    vae_steps: int = 2000
    vae_batch: int = 32
    vae_lr: float = 2e-3
    vae_target_psnr: float = 25.0
    vae_sizes: list = field(default_factory=lambda: [32, 64])
    schedule: str = "cosine"
    timesteps: int = 1000
    terminal_alpha: float = 0.04
    ldm_channels: int = 32
    ldm_steps: int = 4000
    ldm_batch: int = 32
    ldm_lr: float = 1e-3
    ldm_sizes: list = field(default_factory=lambda: [32, 64])

    # stage 1: conditional decoder, progressive resolution
    stage1_sizes: list = field(default_factory=lambda: [32, 64])
    stage1_steps: list = field(default_factory=lambda: [8000, 3000])
    ladd_batch: int = 16
    ladd_lr: float = 5e-4

    # consistency distillation
    decode_size: int = 64
    cm_steps: int = 2000
    cm_batch: int = 16
    cm_lr: float = 1e-3
    cm_ema: float = 0.995
    cm_intervals: int = 32
    boundary_t: int = 0

    # stage 2: pixel reconstruction
    mode: str = "one_step"
    pixel_steps: int = 3000
    pixel_batch: int = 16
    pixel_lr: float = 2e-4
    w_perceptual: float = 1.0
    w_mse: float = 0.5
    t_mid: int = -1
    keep_diffusion_loss_in_stage2: bool = False

    # autoregressive generator
    ar_budget: int = 32
    ar_layers: int = 4
    ar_width: int = 128
    ar_heads: int = 4
    text_dim: int = 64
    ar_steps: int = 3000
    ar_batch: int = 32
    ar_lr: float = 1e-3
    drop_prob: float = 0.1
    top_k: int = 64
    temperature: float = 1.0
    cfg_scale: float = 2.0
    sampling: str = "top-k"

    # evaluation
    eval_n: int = 64
    cond_size: int = 32
    ddim_steps: int = 25
    cfg_scales: list = field(default_factory=lambda: [1.5, 2.0, 3.0, 7.0])
    eval_seeds: list = field(default_factory=lambda: [0, 1, 2])
    proxy_seed: int = 1234

    def resolved_t_mid(self) -> int:
        return self.timesteps // 2 if self.t_mid < 0 else self.t_mid

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of every setting that can change results (runtime-only keys excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in RUNTIME_KEYS}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        cfg = dataclasses.replace(self, **kw)
        _validate(cfg)
        return cfg

    def dumps(self) -> str:
        lines = [f"# lctok run config v{FORMAT_VERSION}"]
        for f in fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_TYPES = get_type_hints(RunConfig)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def _coerce(key: str, raw: str, line: int | None):
    typ = _TYPES[key]
    text = raw.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"expected true/false, got {text!r}", key, line)
    try:
        val = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if typ is str:
            return text
        raise ConfigError(f"cannot parse value {text!r}", key, line) from None
    if typ is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if typ is list and isinstance(val, tuple):
        val = list(val)
    if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
        raise ConfigError(f"expected {typ.__name__}, got {type(val).__name__}", key, line)
    return val


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = dataclasses.asdict(base) if base is not None else {}
    seen: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError("expected 'key = value'", None, n)
        key, val = (p.strip() for p in s.split("=", 1))
        if key not in _TYPES:
            raise ConfigError("unknown key", key, n)
        if key in seen:
            raise ConfigError(f"duplicate key (first on line {seen[key]})", key, n)
        seen[key] = n
        values[key] = _coerce(key, val, n)
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    over = {}
    for k, v in environ.items():
        if not k.startswith(ENV_PREFIX):
            continue
        key = k[len(ENV_PREFIX):].lower()
        if key not in _TYPES:
            raise ConfigError("unknown key in environment override", k)
        over[key] = _coerce(key, v, None)
    return cfg.replace(**over) if over else cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.schedule not in ("cosine", "linear"):
        raise ConfigError("schedule must be 'cosine' or 'linear'", "schedule")
    if cfg.mode not in ("one_step", "two_step"):
        raise ConfigError("mode must be 'one_step' or 'two_step'", "mode")
    if len(cfg.stage1_sizes) != len(cfg.stage1_steps):
        raise ConfigError("stage1_sizes and stage1_steps differ in length", "stage1_steps")
    for s in cfg.cond_sizes:
        if s % cfg.vq_factor:
            raise ConfigError(f"condition size {s} not divisible by vq_factor", "cond_sizes")
    if cfg.sampling not in ("greedy", "top-k"):
        raise ConfigError("sampling must be 'greedy' or 'top-k'", "sampling")
    if cfg.cond_size % cfg.vq_factor:
        raise ConfigError("cond_size not divisible by vq_factor", "cond_size")
    if cfg.ar_budget % cfg.vq_factor:
        raise ConfigError("ar_budget not divisible by vq_factor", "ar_budget")
    if cfg.decode_size not in cfg.stage1_sizes:
        raise ConfigError("decode_size must be one of stage1_sizes", "decode_size")
    if not 0.0 <= cfg.drop_prob <= 1.0:
        raise ConfigError("drop_prob outside [0, 1]", "drop_prob")


def reference_config_text() -> str:
    return resources.files("lctok.configs").joinpath("reference.conf").read_text(encoding="utf-8")


def load_config(path: str | Path | None = None, environ=None) -> RunConfig:
    """Reference defaults, then the file at ``path``, then environment overrides."""
    cfg = parse_config_text(reference_config_text())
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(encoding="utf-8"), base=cfg)
    return apply_env(cfg, environ)
