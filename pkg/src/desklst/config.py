"""Flat ``key = value`` configuration files and named presets.

Lines are ``key = value``; ``#`` starts a comment.  A ``preset`` key (if
present) is applied first and the remaining keys override it, regardless of
their order in the file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import WorldSizes
from .errors import ConfigError
from .model import ModelConfig
from .training import PretrainConfig, StageConfig


@dataclass(frozen=True)
class Config:
    preset: str = "toy"
    # world
    world_seed: int = 0
    n_source: int = 18
    d_frames: int = 16
    noise: float = 0.1
    st_train: int = 8000
    st_dev: int = 500
    st_test: int = 500
    asr_train: int = 16000
    asr_dev: int = 500
    text_train: int = 16000
    text_dev: int = 500
    # model
    d_enc: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    d_llm: int = 128
    dec_layers: int = 4
    dec_heads: int = 4
    init_std: float = 0.02
    model_seed: int = 0
    # foundation pretraining
    frontend_epochs: int = 3
    frontend_lr: float = 1e-3
    ssl_mask_ratio: float = 0.3
    backend_epochs: int = 3
    backend_lr: float = 1e-3
    pretrain_batch_size: int = 64
    # two-stage training
    stage1_epochs: int = 6
    stage1_lr: float = 1e-3
    stage2_epochs: int = 1
    stage2_lr: float = 1e-4
    batch_size: int = 64
    warmup_ratio: float = 0.03
    weight_decay: float = 0.01
    lr_floor: float = 0.0
    eval_interval: int = 50
    stage1_save_interval: int = 200
    stage2_save_interval: int = 50
    # decoding and evaluation
    beam: int = 4
    max_len: int = 64
    n_buckets: int = 5
    # ablations
    seeds: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        for name in ("beam", "max_len", "n_buckets", "batch_size", "pretrain_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.d_llm % self.dec_heads or self.d_enc % self.enc_heads:
            raise ConfigError("model widths must be divisible by their head counts")

    # -- derived configs -------------------------------------------------------
    def model(self) -> ModelConfig:
        return ModelConfig(d_frames=self.d_frames, d_enc=self.d_enc, enc_layers=self.enc_layers,
                           enc_heads=self.enc_heads, d_llm=self.d_llm, dec_layers=self.dec_layers,
                           dec_heads=self.dec_heads, n_source=self.n_source, init_std=self.init_std)

    def sizes(self) -> WorldSizes:
        return WorldSizes(st={"train": self.st_train, "dev": self.st_dev, "test": self.st_test},
                          asr={"train": self.asr_train, "dev": self.asr_dev},
                          text={"train": self.text_train, "dev": self.text_dev})

    def stage(self, stage: int, data: str = "st", seed: int = 1) -> StageConfig:
        s1 = stage == 1
        return StageConfig(stage=stage, data=data, seed=seed,
                           epochs=self.stage1_epochs if s1 else self.stage2_epochs,
                           lr=self.stage1_lr if s1 else self.stage2_lr,
                           batch_size=self.batch_size, warmup_ratio=self.warmup_ratio,
                           weight_decay=self.weight_decay, eval_interval=self.eval_interval,
                           save_interval=self.stage1_save_interval if s1 else self.stage2_save_interval,
                           lr_floor=self.lr_floor)

    def pretrain(self, part: str) -> PretrainConfig:
        fe = part == "frontend"
        return PretrainConfig(epochs=self.frontend_epochs if fe else self.backend_epochs,
                              lr=self.frontend_lr if fe else self.backend_lr,
                              batch_size=self.pretrain_batch_size, warmup_ratio=self.warmup_ratio,
                              weight_decay=self.weight_decay, mask_ratio=self.ssl_mask_ratio,
                              seed=self.model_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"


PRESETS: dict[str, dict] = {
    "toy": {},
    # small enough for unit tests and smoke runs (seconds, not minutes)
    "tiny": dict(n_source=6, d_frames=4, st_train=48, st_dev=8, st_test=10, asr_train=64, asr_dev=8,
                 text_train=64, text_dev=8, d_enc=8, enc_layers=1, enc_heads=2, d_llm=16,
                 dec_layers=1, dec_heads=2, frontend_epochs=1, backend_epochs=1,
                 stage1_epochs=1, stage2_epochs=1, batch_size=16, pretrain_batch_size=16,
                 eval_interval=2, stage1_save_interval=4, stage2_save_interval=2, max_len=16,
                 seeds=(1, 2)),
}

_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(Config(), key)
    try:
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = raw if key == "preset" else _coerce(key, raw)
    return out


def build_config(preset: str = "toy", **overrides) -> Config:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    for k in overrides:
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
    return replace(Config(), preset=preset, **{**PRESETS[preset], **overrides})


def load_config(path=None, preset: str | None = None, **overrides) -> Config:
    """Preset (argument, file, or ``toy``), then file keys, then ``overrides``."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        values = parse_config_text(p.read_text(encoding="utf-8"), str(p))
    name = preset or values.pop("preset", None) or "toy"
    values.pop("preset", None)
    values.update(overrides)
    return build_config(name, **values)
