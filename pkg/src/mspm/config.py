"""Experiment configuration: one YAML file with a section per module."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .baselines import KINDS, BaselineSpec
from .data import DataError, DatasetSplit, Segment, SyntheticMarketSpec, periodic_regimes
from .eam import EamHyperparams
from .sam import SamHyperparams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AssetSource:
    """Either CSV paths or a synthetic regime plan for one symbol."""

    symbol: str
    prices: str | None = None
    sentiment: str | None = None
    periodic: dict | None = None  # period, drift, volatility, bias, phase
    segments: tuple | None = None  # [length, drift, volatility, sentiment_bias] rows

    @property
    def synthetic(self) -> bool:
        return self.prices is None

    def regimes(self, length: int) -> tuple[Segment, ...]:
        if self.periodic is not None:
            p = self.periodic
            return periodic_regimes(length, int(p["period"]), float(p["drift"]), float(p["volatility"]),
                                    float(p.get("bias", 0.0)), int(p.get("phase", 0)))
        segs = tuple(Segment(int(r[0]), float(r[1]), float(r[2]), float(r[3]) if len(r) > 3 else 0.0)
                     for r in self.segments)
        if sum(s.length for s in segs) != length:
            raise ConfigError(f"{self.symbol}: segment lengths do not add up to {length}")
        return segs


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    eam: int = 0
    sam: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    assets: tuple[AssetSource, ...]
    portfolios: dict[str, tuple[str, ...]]
    split: DatasetSplit = DatasetSplit()
    eam: EamHyperparams = EamHyperparams()
    sam: SamHyperparams = SamHyperparams()
    baselines: tuple[BaselineSpec, ...] = tuple(BaselineSpec(k) for k in KINDS)
    seeds: Seeds = Seeds()
    p0: float = 10_000.0
    out: str = "runs/default"
    synthetic_length: int = 3130
    synthetic_start: str = "2009-01-02"
    sentiment_noise: float = 1.0

    def __post_init__(self) -> None:
        known = {a.symbol for a in self.assets}
        if len(known) != len(self.assets):
            raise ConfigError("duplicate asset symbols")
        if not self.portfolios:
            raise ConfigError("at least one portfolio is required")
        for name, syms in self.portfolios.items():
            if not syms:
                raise ConfigError(f"portfolio {name} is empty")
            missing = [s for s in syms if s not in known]
            if missing:
                raise ConfigError(f"portfolio {name}: no data source for {', '.join(missing)}")
            if len(set(syms)) != len(syms):
                raise ConfigError(f"portfolio {name} lists a symbol twice")
        if self.p0 <= 0:
            raise ConfigError("p0 must be positive")

    def symbols(self) -> list[str]:
        """Distinct portfolio symbols in first-appearance order; the first one
        hosts the foundational signal agent."""
        out: list[str] = []
        for syms in self.portfolios.values():
            out += [s for s in syms if s not in out]
        return out

    def asset(self, symbol: str) -> AssetSource:
        return next(a for a in self.assets if a.symbol == symbol)

    def synthetic_spec(self) -> SyntheticMarketSpec:
        regimes = {a.symbol: a.regimes(self.synthetic_length) for a in self.assets if a.synthetic}
        return SyntheticMarketSpec(regimes, seed=self.seeds.data, start=self.synthetic_start,
                                   sentiment_noise=self.sentiment_noise)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=Seeds(seed, seed, seed))

    def to_dict(self) -> dict:
        assets = {}
        for a in self.assets:
            d = {k: v for k, v in asdict(a).items() if k != "symbol" and v is not None}
            if "segments" in d:
                d["segments"] = [list(r) for r in d["segments"]]
            assets[a.symbol] = d
        return {
            "out": self.out,
            "p0": self.p0,
            "seeds": asdict(self.seeds),
            "data": {"synthetic_length": self.synthetic_length, "synthetic_start": self.synthetic_start,
                     "sentiment_noise": self.sentiment_noise, "assets": assets},
            "portfolios": {k: list(v) for k, v in self.portfolios.items()},
            "split": {k: list(v) for k, v in asdict(self.split).items()},
            "eam": asdict(self.eam),
            "sam": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.sam).items()},
            "baselines": [asdict(b) for b in self.baselines],
        }

    def digest(self) -> str:
        """sha256 of the canonical config, ignoring the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"section {where}: unknown keys {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError, DataError) as exc:
        raise ConfigError(f"section {where}: {exc}") from None


TOP_KEYS = {"out", "p0", "seeds", "data", "portfolios", "split", "eam", "sam", "baselines"}


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    data = raw.get("data") or {}
    assets = []
    for sym, src in (data.get("assets") or {}).items():
        if not isinstance(src, dict):
            raise ConfigError(f"asset {sym}: source must be a mapping")
        src = dict(src)
        for key in ("prices", "sentiment"):
            if src.get(key) and base_dir is not None and not Path(src[key]).is_absolute():
                src[key] = str(base_dir / src[key])
        if "segments" in src:
            src["segments"] = tuple(tuple(r) for r in src["segments"])
        if sum(k in src for k in ("prices", "periodic", "segments")) != 1:
            raise ConfigError(f"asset {sym}: give exactly one of prices, periodic, segments")
        try:
            assets.append(AssetSource(str(sym), **src))
        except TypeError as exc:
            raise ConfigError(f"asset {sym}: {exc}") from None
    baselines = []
    for b in raw.get("baselines", [{"kind": k} for k in KINDS]):
        baselines.append(_section(BaselineSpec, b, "baselines"))
    try:
        return ExperimentConfig(
            assets=tuple(assets),
            portfolios={str(k): tuple(str(s) for s in v) for k, v in (raw.get("portfolios") or {}).items()},
            split=_section(DatasetSplit, raw.get("split"), "split"),
            eam=_section(EamHyperparams, raw.get("eam"), "eam"),
            sam=_section(SamHyperparams, raw.get("sam"), "sam"),
            baselines=tuple(baselines),
            seeds=_section(Seeds, raw.get("seeds"), "seeds"),
            p0=float(raw.get("p0", 10_000.0)),
            out=str(raw.get("out", "runs/default")),
            synthetic_length=int(data.get("synthetic_length", 3130)),
            synthetic_start=str(data.get("synthetic_start", "2009-01-02")),
            sentiment_noise=float(data.get("sentiment_noise", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw, path.parent)


def default_config() -> ExperimentConfig:
    """Two overlapping five-year synthetic portfolios over 2009-2020 with the
    full-size hyperparameters."""
    assets = tuple(AssetSource(f"S{i}", periodic={"period": 20 + 4 * i, "drift": 0.004, "volatility": 0.015,
                                                   "bias": 1.5, "phase": 3 * i})
                   for i in range(1, 6))
    return ExperimentConfig(assets=assets, portfolios={"P1": ("S1", "S2", "S3"), "P2": ("S3", "S4", "S5")})


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
