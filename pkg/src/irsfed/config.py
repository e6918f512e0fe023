"""Experiment configuration: flat ``key = value`` text with ``#`` comments.

Every key is optional and falls back to the desk-scale default below. Lists
are comma separated; ``inf`` is accepted wherever an SNR may be infinite.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from irsfed.acquisition import IrsSwitchModel, PilotConfig, dataset_size
from irsfed.channel import SystemGeometry
from irsfed.errors import ConfigError
from irsfed.federation import CONVENTIONS, TrainConfig
from irsfed.nn import NetworkSpec


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    # geometry
    M: int = 16
    L: int = 8
    K: int = 4
    n_paths: int = 5
    n_paths_bs: int = 5
    n_paths_irs: int = 5
    angle_lo: float = -math.pi / 2
    angle_hi: float = math.pi / 2
    # acquisition / dataset
    m_bar: int = 8
    snr_levels: tuple[float, ...] = (10.0, 20.0, 30.0)
    n_realizations: int = 200
    g_reps: int = 2
    eps_on: float = 0.0
    eps_off: float = 0.0
    max_dataset_bytes: int = 1 << 30
    # network
    n_conv_layers: int = 3
    n_filters: int = 16
    kernel: int = 3
    fc_units: int = 128
    keep_prob: float = 0.5
    # training
    mode: str = "federated"
    rounds: int = 100
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    snr_theta_db: float = math.inf
    snr_convention: str = "literal"
    downlink_noise: bool = True
    dropout: bool = True
    local_batch: int = 0
    val_fraction: float = 0.2
    # evaluation
    trials: int = 100
    test_snr_grid: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0)
    test_m_bar_grid: tuple[int, ...] = (4, 8, 16)
    # run
    seed: int = 0
    dataset: str = "dataset.bin"
    checkpoint: str = "model.ckpt"
    train_log: str = "train_log.csv"
    results: str = "results.csv"
    overhead_csv: str = "overhead.csv"
    log_wall_time: bool = True

    def __post_init__(self):
        _validate(self)

    # -- views onto module-level types ---------------------------------------

    @property
    def geometry(self) -> SystemGeometry:
        return SystemGeometry(self.M, self.L, self.K, self.n_paths, self.n_paths_bs, self.n_paths_irs, self.angle_lo, self.angle_hi)

    @property
    def pilots(self) -> PilotConfig:
        return PilotConfig(self.M, self.m_bar)

    @property
    def switch(self) -> IrsSwitchModel:
        return IrsSwitchModel(self.eps_on, self.eps_off)

    def network_spec(self, m_bar: int | None = None) -> NetworkSpec:
        return NetworkSpec.for_system(
            self.M,
            self.L,
            self.m_bar if m_bar is None else m_bar,
            n_conv_layers=self.n_conv_layers,
            n_filters=self.n_filters,
            kernel=(self.kernel, self.kernel),
            fc_units=self.fc_units,
            keep_prob=self.keep_prob,
        )

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode,
            rounds=self.rounds,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            snr_theta_db=self.snr_theta_db,
            snr_convention=self.snr_convention,
            downlink_noise=self.downlink_noise,
            dropout=self.dropout,
            local_batch=self.local_batch,
            val_fraction=self.val_fraction,
            seed=self.seed,
        )

    @property
    def n_samples(self) -> int:
        return dataset_size(self.K, len(self.snr_levels), self.n_realizations, self.g_reps)

    # -- text form ----------------------------------------------------------

    def to_lines(self) -> list[str]:
        return [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read_string("[config]\n" + text)
        except configparser.Error as exc:
            raise ConfigError("<file>", str(exc).replace("\n", " ")) from None
        return cls.from_mapping(dict(parser["config"]))

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, text in raw.items():
            if key not in known:
                raise ConfigError(key, "unknown key")
            values[key] = _parse_value(key, known[key].type, text)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _parse_value(key: str, type_name, text: str):
    parsers = {
        "int": int,
        "float": float,
        "str": str.strip,
        "bool": _bool,
        "tuple[float, ...]": _floats,
        "tuple[int, ...]": _ints,
    }
    try:
        return parsers[str(type_name)](text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(key, f"cannot parse {text!r} ({exc})") from None


def _validate(c: ExperimentConfig) -> None:
    def need(ok: bool, key: str, message: str):
        if not ok:
            raise ConfigError(key, message)

    for key in ("M", "L", "K", "n_paths", "n_paths_bs", "n_paths_irs", "n_realizations", "g_reps", "rounds", "batch_size", "trials", "kernel", "n_filters", "fc_units"):
        need(getattr(c, key) >= 1, key, "must be >= 1")
    need(c.n_conv_layers >= 0, "n_conv_layers", "must be >= 0")
    need(c.kernel % 2 == 1, "kernel", "must be odd")
    need(math.isfinite(c.angle_lo), "angle_lo", "must be finite")
    need(math.isfinite(c.angle_hi) and c.angle_hi > c.angle_lo, "angle_hi", "must be finite and > angle_lo")
    need(1 <= c.m_bar <= c.M, "m_bar", "must satisfy 1 <= m_bar <= M")
    need(len(c.snr_levels) >= 1 and all(math.isfinite(s) for s in c.snr_levels), "snr_levels", "need >= 1 finite level")
    need(0 <= c.eps_on < 1, "eps_on", "must lie in [0, 1)")
    need(0 <= c.eps_off < 1, "eps_off", "must lie in [0, 1)")
    need(c.max_dataset_bytes >= 1, "max_dataset_bytes", "must be >= 1")
    need(0 <= c.keep_prob <= 1, "keep_prob", "must lie in [0, 1]")
    need(c.mode in ("centralized", "federated"), "mode", "must be 'centralized' or 'federated'")
    need(c.learning_rate > 0 and math.isfinite(c.learning_rate), "learning_rate", "must be finite and > 0")
    need(0 <= c.momentum < 1, "momentum", "must lie in [0, 1)")
    need(c.snr_theta_db == math.inf or math.isfinite(c.snr_theta_db), "snr_theta_db", "must be finite or inf")
    need(c.snr_convention in CONVENTIONS, "snr_convention", f"must be one of {', '.join(CONVENTIONS)}")
    need(c.local_batch >= 0, "local_batch", "must be >= 0")
    need(0 < c.val_fraction < 1, "val_fraction", "must lie in (0, 1)")
    need(len(c.test_snr_grid) >= 1 and all(math.isfinite(s) or s == math.inf for s in c.test_snr_grid), "test_snr_grid", "need >= 1 SNR, finite or inf (noiseless)")
    need(all(1 <= m <= c.M for m in c.test_m_bar_grid), "test_m_bar_grid", "entries must satisfy 1 <= m_bar <= M")
    need(c.seed >= 0, "seed", "must be >= 0")
