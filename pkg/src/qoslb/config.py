"""Scenario and training configuration, loaded from YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .radio import DEFAULT_BANDS, BandConfig

# Packet delay budget (TTIs) and GFBR/MFBR ratio per 5QI.
DELAY_BUDGET = {2: 150, 3: 50, 67: 100, 9: 300}
GFBR_RATIO = {2: 0.6, 3: 0.9, 67: 0.8}


class ConfigError(ValueError):
    pass


def _arange_choices(start, stop, step):
    n = int(round((stop - start) / step))
    return [round(start + i * step, 6) for i in range(n + 1)]


@dataclass
class TrainConfig:
    discount: float = 0.999
    batch_size: int = 64
    lr: float = 0.01
    lr_half_life: int = 2000
    target_sync: int = 10
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 5000
    buffer_capacity: int = 50_000
    alpha: float = 1.0
    hidden: list = field(default_factory=lambda: [64, 64, 64])
    head_hidden: int = 32
    drops: int = 50
    drop_ttis: int = 3000
    checkpoint_every: int = 1

    def validate(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigError("train.discount must lie in [0, 1]")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1]")
        for name in ("batch_size", "lr_half_life", "target_sync", "eps_decay_steps",
                     "buffer_capacity", "head_hidden", "drops", "drop_ttis", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.lr <= 0 or self.alpha < 0:
            raise ConfigError("train.lr must be positive and train.alpha non-negative")
        if len(self.hidden) != 3 or any(int(h) <= 0 for h in self.hidden):
            raise ConfigError("train.hidden must list three positive layer widths")


@dataclass
class ScenarioConfig:
    num_sites: int = 7
    isd: float = 500.0
    area: list = field(default_factory=lambda: [1500.0, 1500.0])
    bands: list = field(default_factory=lambda: [dataclasses.asdict(b) for b in DEFAULT_BANDS])
    tx_power: float = 44.0
    shadowing_std: float = 8.0
    fading_correlation: float = 0.995
    num_ues: list = field(default_factory=lambda: [35, 42, 49, 56, 63, 70])
    gbr_fraction: float = 0.75
    gbr_rate_choices: list = field(default_factory=lambda: _arange_choices(0.8, 16.0, 0.2))
    be_rate_choices: list = field(default_factory=lambda: _arange_choices(2.0, 8.0, 0.4))
    gbr_5qi: list = field(default_factory=lambda: [2, 3, 67])
    be_5qi: int = 9
    packet_bits: int = 12_000
    window: int = 100
    csi_period: int = 5
    max_retx: int = 3
    pf_exponent: float = 2.0
    bler_target: float = 0.1
    olla_step_db: float = 0.5
    rsrp_min: float = -120.0
    mcs_min: int = 0
    edge_margin_db: float = 5.0
    rate_norm: float = 16e6
    sim_ttis: int = 10_000
    lb_period: int = 500
    seed: int = 0
    drops: int = 20
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def band_configs(self):
        return tuple(BandConfig(**b) for b in self.bands)

    @property
    def num_cells(self) -> int:
        return self.num_sites * len(self.bands)

    def validate(self):
        positives = ("num_sites", "isd", "tx_power", "packet_bits", "window", "csi_period",
                     "olla_step_db", "rate_norm", "sim_ttis", "lb_period", "drops")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.num_sites > 7:
            raise ConfigError("num_sites must be at most 7 (one hexagonal ring)")
        if len(self.area) != 2 or min(self.area) <= 0:
            raise ConfigError("area must be [width, height] with positive sides")
        if self.shadowing_std < 0 or self.max_retx < 0 or self.mcs_min < 0 or self.edge_margin_db < 0:
            raise ConfigError("shadowing_std, max_retx, mcs_min and edge_margin_db must be >= 0")
        if not 0.0 <= self.fading_correlation < 1.0:
            raise ConfigError("fading_correlation must lie in [0, 1)")
        if not 0.0 < self.bler_target < 1.0:
            raise ConfigError("bler_target must lie in (0, 1)")
        if not 0.0 <= self.gbr_fraction <= 1.0:
            raise ConfigError("gbr_fraction must lie in [0, 1]")
        if not self.num_ues or min(self.num_ues) <= 0:
            raise ConfigError("num_ues must be a non-empty list of positive counts")
        for name in ("gbr_rate_choices", "be_rate_choices"):
            values = getattr(self, name)
            if not values or min(values) <= 0:
                raise ConfigError(f"{name} must be a non-empty list of positive rates (Mbps)")
        bad = [q for q in self.gbr_5qi if q not in GFBR_RATIO]
        if bad or not self.gbr_5qi:
            raise ConfigError(f"gbr_5qi must be drawn from {sorted(GFBR_RATIO)}, got {self.gbr_5qi}")
        if self.be_5qi not in DELAY_BUDGET or self.be_5qi in GFBR_RATIO:
            raise ConfigError(f"be_5qi must be a non-GBR 5QI, got {self.be_5qi}")
        try:
            bands = self.band_configs
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid band definition: {exc}") from None
        if len({b.band_id for b in bands}) != len(bands):
            raise ConfigError("band ids must be unique")
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def drop_seed(self, purpose: str, index: int) -> np.random.SeedSequence:
        """Seed for drop ``index``; training and evaluation drops never overlap."""
        tag = {"eval": 0, "train": 1}[purpose]
        return np.random.SeedSequence([self.seed, tag, index])


def _build(cls, data: dict, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "train" and cls is ScenarioConfig:
            value = _build(TrainConfig, value or {}, prefix="train.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(data: dict | None) -> ScenarioConfig:
    cfg = _build(ScenarioConfig, data or {})
    try:
        return cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"wrong value type: {exc}") from None


def parse_config(path) -> ScenarioConfig:
    """Load a YAML scenario file; absent keys take the default scenario values."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(data)


STREAMS = ("deployment", "channel", "traffic", "exploration")


def substream(seed: np.random.SeedSequence, name: str) -> np.random.Generator:
    """Independent named generator derived from ``seed``.

    Streams never share state, so e.g. exploration draws cannot shift the
    channel or traffic realizations of a paired run.
    """
    key = tuple(seed.spawn_key) + (STREAMS.index(name),)
    return np.random.default_rng(np.random.SeedSequence(seed.entropy, spawn_key=key))
