"""Run configuration: dataclasses mirrored one-to-one by the YAML config file."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict

import yaml

from .objectives import LossWeights


@dataclass
class SceneConfig:
    grid: int = 64               # heightfield and image resolution
    extent: float = 256.0        # meters
    z_max: float = 60.0
    n_views: int = 4
    n_support: int = 2
    teacher_sigma: float = 0.5   # meters of teacher depth noise
    rpc_fraction: float = 0.0    # fraction of episodes with RPC geometry
    rho_sh: float = 1.0


@dataclass
class ModelConfig:
    k_max: int = 256
    appearance_dim: int = 8
    z_dim: int = 32
    slot_embed_dim: int = 16
    decoder_hidden: int = 32     # must match the calibration residual size
    sdf_layers: int = 4
    sdf_width: int = 32
    sdf_freqs: int = 2
    gate_width: int = 32
    n_heads: int = 4
    top_k: int = 2
    router_temperature: float = 1.0
    alpha_min: float = 0.01


@dataclass
class RenderSettings:
    pixel_blur: float = 0.25
    sun_grid: int = 48
    march_steps: int = 64
    march_mode: str = "exact"            # "exact" | "grid"
    grid_res: tuple = (24, 24, 32)
    floor_altitude: float = 0.0

    def to_render_config(self):
        from .renderer import MarchConfig, RenderConfig
        return RenderConfig(pixel_blur=self.pixel_blur, sun_grid=self.sun_grid,
                            march=MarchConfig(n_steps=self.march_steps,
                                              mode=self.march_mode,
                                              grid_res=tuple(self.grid_res)),
                            floor_altitude=self.floor_altitude)


@dataclass
class TrainConfig:
    batch_episodes: int = 4          # B
    outer_lr: float = 3e-4           # eta
    inner_lr: float = 3e-3           # eta_in
    inner_steps: int = 3             # S
    iterations: int = 500
    seed: int = 0
    optimizer: str = "sgd"           # "sgd" | "adamw"
    adamw_weight_decay: float = 0.0
    train_pixels: int = 192          # sampled pixels per view per loss eval
    sdf_samples: int = 64            # eikonal sample points per loss eval
    divergence_limit: float = 1e6

    def validate(self):
        if self.outer_lr <= 0 or self.inner_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.batch_episodes < 1:
            raise ValueError("batch_episodes must be >= 1")


@dataclass
class Config:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)


_SECTIONS = {"scene": SceneConfig, "model": ModelConfig, "render": RenderSettings,
             "train": TrainConfig, "loss": LossWeights}


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> Config:
    data = dict(data or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, {}) or {}
        if not isinstance(section, dict):
            raise ValueError(f"config section '{name}' must be a mapping")
        kwargs[name] = _build(cls, section, name)
    seed = data.pop("seed", 0)
    if data:
        raise ValueError(f"unknown top-level config key(s): {sorted(data)}")
    cfg = Config(seed=int(seed), **kwargs)
    cfg.train.validate()
    cfg.loss.validate()
    return cfg


def load_config(path) -> Config:
    with open(path) as f:
        data = yaml.safe_load(f)
    return config_from_dict(data)


def config_to_dict(cfg: Config) -> dict:
    d = {"seed": cfg.seed}
    for name in _SECTIONS:
        d[name] = asdict(getattr(cfg, name))
    d["render"]["grid_res"] = list(cfg.render.grid_res)
    return d


def save_config(cfg: Config, path):
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)
