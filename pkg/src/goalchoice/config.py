"""Model and training configuration with ``key = value`` file support.

Example file::

    method = III
    grid = fixed
    dcm = 1
    n_modes = 6
    hidden = 32
    lr = 0.001
    epochs = 100
    seed = 0
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional

from .dcm import DcmVariant, FeatureParams
from .errors import ConfigError, IoError
from .grid import DYNAMIC, FIXED, GridConfig
from .ingest import InteractionSpace

METHODS = ("I", "II", "III", "IV")


@dataclass(frozen=True)
class ModelConfig:
    method: str = "III"
    grid_mode: str = FIXED
    dcm: Optional[DcmVariant] = DcmVariant.DCM1
    n_modes: int = 6
    hidden: int = 32  # encoder state width C_h
    embed: int = 16
    attn_dim: int = 32  # per-head key/value width
    goal_embed: int = 16
    dec_hidden: int = 32
    grid_m: int = 10
    grid_n: int = 10
    in_scale: float = 10.0  # metres per unit of encoder position input
    out_scale: float = 10.0  # metres per unit of decoder mean output
    grid: GridConfig = field(default_factory=GridConfig)
    space: InteractionSpace = field(default_factory=InteractionSpace)
    features: FeatureParams = field(default_factory=FeatureParams)

    def __post_init__(self):
        method = str(self.method).upper()
        if method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        object.__setattr__(self, "method", method)
        if self.grid_mode not in (FIXED, DYNAMIC):
            raise ConfigError(f"grid mode must be fixed or dynamic, got {self.grid_mode!r}")
        dcm = self.dcm
        if dcm is not None and not isinstance(dcm, DcmVariant):
            dcm = None if str(dcm).lower() in ("off", "none", "") else DcmVariant.parse(dcm)
            object.__setattr__(self, "dcm", dcm)
        if method in ("III", "IV") and dcm is None:
            raise ConfigError(f"method {method} needs a DCM variant")
        if method in ("I", "II") and dcm is not None:
            object.__setattr__(self, "dcm", None)
        if min(self.n_modes, self.hidden, self.embed, self.attn_dim, self.goal_embed, self.dec_hidden) < 1:
            raise ConfigError("layer widths and mode count must be positive")
        if self.uses_goals and self.n_goals < self.n_modes:
            raise ConfigError(f"need at least {self.n_modes} goals to pick {self.n_modes} modes, grid has {self.n_goals}")

    @property
    def n_goals(self) -> int:
        return self.grid.n_goals

    @property
    def uses_goals(self) -> bool:
        return self.method != "I"

    @property
    def uses_dcm(self) -> bool:
        return self.method in ("III", "IV")

    @property
    def uses_nn_score(self) -> bool:
        return self.method in ("II", "III")

    @property
    def n_heads(self) -> int:
        return self.n_goals + self.n_modes

    @property
    def n_features(self) -> int:
        return len(self.dcm.features) if self.dcm else 0


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    clip: float = 10.0
    seed: int = 0
    eval_every: int = 1
    t_obs: int = 10
    t_f: int = 30
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.clip <= 0 or self.eval_every < 1:
            raise ConfigError(f"invalid training config {self}")


# flat key -> (owner, attribute); owner is "train", "model", "grid", "space" or "features"
_KEYS = {
    "method": ("model", "method"),
    "grid": ("model", "grid_mode"),
    "grid_mode": ("model", "grid_mode"),
    "dcm": ("model", "dcm"),
    "n_modes": ("model", "n_modes"),
    "L": ("model", "n_modes"),
    "hidden": ("model", "hidden"),
    "embed": ("model", "embed"),
    "attn_dim": ("model", "attn_dim"),
    "goal_embed": ("model", "goal_embed"),
    "dec_hidden": ("model", "dec_hidden"),
    "grid_m": ("model", "grid_m"),
    "grid_n": ("model", "grid_n"),
    "in_scale": ("model", "in_scale"),
    "out_scale": ("model", "out_scale"),
    "n_rings": ("grid", "n_rings"),
    "n_angles": ("grid", "n_angles"),
    "span_deg": ("grid", "span_deg"),
    "scales": ("grid", "scales"),
    "fixed_v": ("grid", "fixed_v"),
    "v_floor": ("grid", "v_floor"),
    "ahead": ("space", "ahead"),
    "behind": ("space", "behind"),
    "side": ("space", "side"),
    "rho_occ": ("features", "rho_occ"),
    "lambda_col": ("features", "lambda_col"),
    "theta_col_deg": ("features", "theta_col_deg"),
    "lr": ("train", "lr"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "clip": ("train", "clip"),
    "seed": ("train", "seed"),
    "eval_every": ("train", "eval_every"),
    "t_obs": ("train", "t_obs"),
    "t_f": ("train", "t_f"),
    "train_path": ("train", "train_path"),
    "val_path": ("train", "val_path"),
    "out_dir": ("train", "out_dir"),
}


def _convert(target_cls, attr: str, raw: str):
    ftype = {f.name: f.type for f in fields(target_cls)}[attr]
    ftype = str(ftype)
    try:
        if attr == "scales":
            return tuple(float(s) for s in raw.replace(",", " ").split())
        if attr == "dcm":
            return raw
        if ftype.startswith("int"):
            return int(raw)
        if ftype.startswith("float"):
            return float(raw)
        if ftype.startswith("Optional[str]"):
            return raw or None
    except ValueError:
        raise ConfigError(f"bad value for {attr}: {raw!r}") from None
    return raw


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def build_config(values: dict[str, str], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Apply flat ``key -> string`` settings on top of ``base``."""
    base = base or TrainConfig()
    groups = {
        "train": {}, "model": {}, "grid": {}, "space": {}, "features": {},
    }
    owners = {
        "train": TrainConfig, "model": ModelConfig, "grid": GridConfig,
        "space": InteractionSpace, "features": FeatureParams,
    }
    for key, raw in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        owner, attr = _KEYS[key]
        groups[owner][attr] = _convert(owners[owner], attr, raw)
    m = base.model
    model = dataclasses.replace(
        m,
        grid=dataclasses.replace(m.grid, **groups["grid"]),
        space=dataclasses.replace(m.space, **groups["space"]),
        features=dataclasses.replace(m.features, **groups["features"]),
        **groups["model"],
    )
    return dataclasses.replace(base, model=model, **groups["train"])


def config_to_text(cfg: TrainConfig) -> str:
    m = cfg.model
    rows = [
        ("method", m.method), ("grid", m.grid_mode), ("dcm", m.dcm.name[-1] if m.dcm else "off"),
        ("n_modes", m.n_modes), ("hidden", m.hidden), ("embed", m.embed), ("attn_dim", m.attn_dim),
        ("goal_embed", m.goal_embed), ("dec_hidden", m.dec_hidden), ("grid_m", m.grid_m), ("grid_n", m.grid_n),
        ("in_scale", m.in_scale), ("out_scale", m.out_scale),
        ("n_rings", m.grid.n_rings), ("n_angles", m.grid.n_angles), ("span_deg", m.grid.span_deg),
        ("scales", " ".join(repr(s) for s in m.grid.scales)), ("fixed_v", m.grid.fixed_v), ("v_floor", m.grid.v_floor),
        ("ahead", m.space.ahead), ("behind", m.space.behind), ("side", m.space.side),
        ("rho_occ", m.features.rho_occ), ("lambda_col", m.features.lambda_col), ("theta_col_deg", m.features.theta_col_deg),
        ("lr", cfg.lr), ("epochs", cfg.epochs), ("batch_size", cfg.batch_size), ("clip", cfg.clip),
        ("seed", cfg.seed), ("eval_every", cfg.eval_every), ("t_obs", cfg.t_obs), ("t_f", cfg.t_f),
    ]
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in rows)


def load_config(path=None, overrides: Optional[dict[str, str]] = None) -> TrainConfig:
    """Config file first, then overrides (flags win)."""
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return build_config(values)
