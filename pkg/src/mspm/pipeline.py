"""Stage orchestration: every stage reads its inputs from files written by
earlier stages under the run directory and records its outputs (with file
digests) in ``manifest.json``. Only this process writes the manifest; worker
processes return results and never touch it."""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import run_baseline
from .config import ConfigError, ExperimentConfig
from .data import (
    AssetSeries,
    DataError,
    align_calendar,
    fill_sentiment_gaps,
    generate_synthetic,
    load_series,
    prepare,
    write_price_csv,
    write_sentiment_csv,
)
from .eam import SignalFrame, eam_network, generate_signals, position_report, train_eam
from .nncore import load_into, save
from .reporting import (
    REFERENCE_ABLATION_GAP,
    ReportError,
    compare,
    comparison_json,
    finalize_report,
    write_comparison,
    write_report,
)
from .sam import Ledger, Market, SamHyperparams, actor_network, backtest, train_sam
from .stats import StatsError, stability_from_returns

STAGES = ("ingest", "train-eam", "gen-signals", "train-sam", "backtest", "baseline", "compare", "stats", "ablate")
REQUIRES = {
    "ingest": (),
    "train-eam": ("ingest",),
    "gen-signals": ("train-eam",),
    "train-sam": ("gen-signals",),
    "backtest": ("train-sam",),
    "baseline": ("ingest",),
    "compare": ("backtest", "baseline"),
    "stats": ("backtest", "baseline"),
    "ablate": ("backtest",),
}
MSPM = "MSPM"


class PrerequisiteError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunManifest:
    """Config digest, per-stage outputs with file digests and durations, the
    list of signal-agent training runs, and the engine version."""

    def __init__(self, root: Path, config_digest: str) -> None:
        self.root = root
        self.path = root / "manifest.json"
        self.data = {"config_digest": config_digest, "engine_version": __version__, "stages": {},
                     "eam_training_runs": []}
        if self.path.exists():
            old = json.loads(self.path.read_text())
            if old.get("config_digest") != config_digest:
                raise ConfigError(f"{self.path}: run directory belongs to a different config "
                                  f"({old.get('config_digest', '?')[:12]}...); use another --out")
            self.data = old

    @property
    def stages(self) -> dict:
        return self.data["stages"]

    def done(self, stage: str) -> bool:
        return stage in self.stages

    def require(self, stage: str) -> None:
        missing = [s for s in REQUIRES[stage] if not self.done(s)]
        if missing:
            raise PrerequisiteError(f"stage {stage} needs {', '.join(missing)} to run first")

    def record(self, stage: str, outputs: list[Path], seconds: float) -> None:
        # a re-run invalidates everything downstream of it
        for later in _dependents(stage):
            self.stages.pop(later, None)
        rel = sorted(str(p.relative_to(self.root)) for p in outputs)
        self.stages[stage] = {"outputs": {r: _sha256(self.root / r) for r in rel},
                              "duration_s": round(seconds, 3)}
        self.save()

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, sort_keys=True, indent=2) + "\n")
        tmp.replace(self.path)


def _dependents(stage: str) -> set[str]:
    out: set[str] = set()
    frontier = {stage}
    while frontier:
        nxt = {s for s, req in REQUIRES.items() if frontier & set(req)} - out
        out |= nxt
        frontier = nxt
    return out


# --- shared helpers ---------------------------------------------------------

def _load_prepared(cfg: ExperimentConfig, root: Path) -> dict[str, AssetSeries]:
    d = root / "data"
    out = {}
    for a in cfg.assets:
        p, s = d / f"{a.symbol}.prices.csv", d / f"{a.symbol}.sentiment.csv"
        if not p.exists():
            raise PrerequisiteError(f"missing ingested data {p}")
        out[a.symbol] = load_series(a.symbol, p, s if s.exists() else None)
    return prepare(out)


def _range(series_dates: np.ndarray, rng: tuple[str, str]) -> np.ndarray:
    a, b = (np.datetime64(x, "D") for x in rng)
    return np.flatnonzero((series_dates >= a) & (series_dates <= b))


def decision_range(market: Market, rng: tuple[str, str], window: int) -> tuple[int, int]:
    """Decision days ``[start, stop)`` whose ledger rows (dated k+1) fall in ``rng``."""
    idx = _range(market.dates, rng)
    if idx.size == 0:
        raise DataError(f"no market days in {rng[0]}..{rng[1]}")
    start = max(int(idx[0]) - 1, market.first_decision(window))
    stop = int(idx[-1])
    if stop <= start:
        raise DataError(f"range {rng[0]}..{rng[1]} leaves no decision days after a {window}-day window")
    return start, stop


def _eam_seed(cfg: ExperimentConfig, i: int) -> list[int]:
    return [cfg.seeds.eam, i]


def _sam_seed(cfg: ExperimentConfig, i: int) -> int:
    return cfg.seeds.sam * 1000 + i


def _signal_market(cfg: ExperimentConfig, root: Path, portfolio: str) -> Market:
    frames = []
    for sym in cfg.portfolios[portfolio]:
        path = root / "signals" / f"{sym}.csv"
        if not path.exists():
            raise PrerequisiteError(f"missing signal frame {path}")
        frames.append(SignalFrame.from_csv(path, sym))
    return Market(frames)


def _price_market(cfg: ExperimentConfig, root: Path, portfolio: str) -> Market:
    series = _load_prepared(cfg, root)
    frames = []
    for sym in cfg.portfolios[portfolio]:
        s = series[sym]
        frames.append(SignalFrame.from_series(s.take(_range(s.dates, cfg.split.eam_predict))))
    return Market(frames)


def _sam_hp(cfg: ExperimentConfig) -> SamHyperparams:
    return replace(cfg.sam, p0=cfg.p0)


def _load_actor(cfg: ExperimentConfig, root: Path, portfolio: str, m_star: int, suffix: str = ""):
    path = root / "sam" / f"{portfolio}{suffix}.actor.ckpt"
    if not path.exists():
        raise PrerequisiteError(f"missing SAM checkpoint {path}")
    actor = actor_network(m_star, _sam_hp(cfg))
    load_into(actor, path)
    return actor


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


# --- stages -----------------------------------------------------------------

def stage_ingest(cfg: ExperimentConfig, root: Path, jobs: int) -> list[Path]:
    raw: dict[str, AssetSeries] = {}
    synth = [a for a in cfg.assets if a.synthetic]
    if synth:
        raw.update(generate_synthetic(cfg.synthetic_spec()))
    for a in cfg.assets:
        if not a.synthetic:
            try:
                raw[a.symbol] = load_series(a.symbol, a.prices, a.sentiment)
            except FileNotFoundError as exc:
                raise ConfigError(f"asset {a.symbol}: data file {exc} not found") from None
    # raw (aligned, gap-filled) values are stored; normalization happens on load
    series = align_calendar({k: fill_sentiment_gaps(s) for k, s in raw.items()})
    d = root / "data"
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for sym, s in series.items():
        p, q = d / f"{sym}.prices.csv", d / f"{sym}.sentiment.csv"
        write_price_csv(p, s)
        write_sentiment_csv(q, s)
        out += [p, q]
    return out


def _train_one(args):
    series, hp, seed, init = args
    net, log = train_eam(series, hp, seed=seed, init_params=init)
    return net, log


def _save_eam(root: Path, sym: str, net, log, meta: dict) -> list[Path]:
    d = root / "eam"
    d.mkdir(parents=True, exist_ok=True)
    ck, lg = d / f"{sym}.ckpt", d / f"{sym}.log.csv"
    save(net, ck, meta=meta)
    log.to_csv(lg)
    return [ck, lg]


def stage_train_eam(cfg: ExperimentConfig, root: Path, jobs: int, manifest: RunManifest) -> list[Path]:
    """One training run per distinct symbol. The first symbol's agent is the
    foundational one; every other agent starts from an exact copy of it."""
    series = _load_prepared(cfg, root)
    syms = cfg.symbols()
    train = {s: series[s].take(_range(series[s].dates, cfg.split.eam_train)) for s in syms}
    found = syms[0]
    net, log = _train_one((train[found], cfg.eam, _eam_seed(cfg, 0), None))
    out = _save_eam(root, found, net, log, {"symbol": found, "init": "fresh"})
    donor = net.parameters()
    jobs_args = [(train[s], cfg.eam, _eam_seed(cfg, i), donor) for i, s in enumerate(syms) if i > 0]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_one, jobs_args))
    else:
        results = [_train_one(a) for a in jobs_args]
    for s, (n, lg) in zip(syms[1:], results):
        out += _save_eam(root, s, n, lg, {"symbol": s, "init": found})
    manifest.data["eam_training_runs"] = list(syms)
    return out


def stage_gen_signals(cfg: ExperimentConfig, root: Path, jobs: int) -> list[Path]:
    series = _load_prepared(cfg, root)
    d = root / "signals"
    d.mkdir(parents=True, exist_ok=True)
    out = []
    end = np.datetime64(cfg.split.eam_predict[1], "D")
    for sym in cfg.symbols():
        ck = root / "eam" / f"{sym}.ckpt"
        if not ck.exists():
            raise PrerequisiteError(f"missing signal-agent checkpoint {ck}")
        net = eam_network(cfg.eam)
        load_into(net, ck)
        s = series[sym]
        s = s.take(np.flatnonzero(s.dates <= end))
        frame = generate_signals(net, s, cfg.eam, emit_from=cfg.split.eam_predict[0])
        path = d / f"{sym}.csv"
        frame.to_csv(path)
        out += [path, _write_json(d / f"{sym}.positions.json", position_report(frame).to_json())]
    return out


def _train_sam_job(args):
    market, hp, seed, start, stop = args
    return train_sam(market, hp, seed=seed, start=start, stop=stop)


def _save_sam(root: Path, name: str, actor, critic, log) -> list[Path]:
    d = root / "sam"
    d.mkdir(parents=True, exist_ok=True)
    a, c, lg = d / f"{name}.actor.ckpt", d / f"{name}.critic.ckpt", d / f"{name}.log.csv"
    save(actor, a, meta={"portfolio": name})
    save(critic, c, meta={"portfolio": name})
    log.to_csv(lg)
    return [a, c, lg]


def _sam_jobs(cfg: ExperimentConfig, root: Path, ablated: bool) -> list[tuple]:
    hp = _sam_hp(cfg)
    args = []
    for i, p in enumerate(cfg.portfolios):
        mk = _signal_market(cfg, root, p)
        if ablated:
            mk = mk.ablated()
        start, stop = decision_range(mk, cfg.split.sam_train, hp.window)
        args.append((mk, hp, _sam_seed(cfg, i), start, stop))
    return args


def _run_jobs(fn, args: list, jobs: int) -> list:
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, args))
    return [fn(a) for a in args]


def stage_train_sam(cfg: ExperimentConfig, root: Path, jobs: int) -> list[Path]:
    results = _run_jobs(_train_sam_job, _sam_jobs(cfg, root, ablated=False), jobs)
    out = []
    for p, (actor, critic, log) in zip(cfg.portfolios, results):
        out += _save_sam(root, p, actor, critic, log)
    return out


def _backtest_portfolio(cfg: ExperimentConfig, root: Path, portfolio: str, ablated: bool = False):
    hp = _sam_hp(cfg)
    mk = _signal_market(cfg, root, portfolio)
    if ablated:
        mk = mk.ablated()
    actor = _load_actor(cfg, root, portfolio, mk.m + 1, ".disabled" if ablated else "")
    start, stop = decision_range(mk, cfg.split.sam_experiment, hp.window)
    led, _ = backtest(actor, mk, hp, start, stop, strategy=MSPM)
    vstart, vstop = decision_range(mk, cfg.split.sam_validate, hp.window)
    val, _ = backtest(actor, mk, hp, vstart, vstop, strategy=MSPM)
    return led, val


def stage_backtest(cfg: ExperimentConfig, root: Path, jobs: int) -> list[Path]:
    out = []
    for p in cfg.portfolios:
        led, val = _backtest_portfolio(cfg, root, p)
        d = root / "backtest" / p
        d.mkdir(parents=True, exist_ok=True)
        led.to_csv(d / f"{MSPM}.csv", with_strategy=True)
        val.to_csv(d / f"{MSPM}.validation.csv", with_strategy=True)
        out += [d / f"{MSPM}.csv", d / f"{MSPM}.validation.csv",
                _write_json(d / f"{MSPM}.metrics.json", {"experiment": led.metrics().to_json(),
                                                         "validation": val.metrics().to_json(),
                                                         "terminated": led.terminated})]
    return out


def stage_baseline(cfg: ExperimentConfig, root: Path, jobs: int) -> list[Path]:
    hp = _sam_hp(cfg)
    out = []
    for p in cfg.portfolios:
        mk = _price_market(cfg, root, p)
        start, stop = decision_range(mk, cfg.split.sam_experiment, hp.window)
        d = root / "backtest" / p
        d.mkdir(parents=True, exist_ok=True)
        for spec in cfg.baselines:
            led, _ = run_baseline(spec, mk, cfg.p0, hp.beta, hp.phi, hp.window, start, stop)
            path = d / f"{spec.kind}.csv"
            led.to_csv(path, with_strategy=True)
            out.append(path)
    return out


def _ledgers(cfg: ExperimentConfig, root: Path, portfolio: str) -> dict[str, Ledger]:
    d = root / "backtest" / portfolio
    out = {}
    for name in [MSPM] + [b.kind for b in cfg.baselines]:
        path = d / f"{name}.csv"
        if not path.exists():
            raise PrerequisiteError(f"missing ledger {path}")
        out[name] = Ledger.read_csv(path, cfg.p0, name)
    return out


def stage_compare(cfg: ExperimentConfig, root: Path, jobs: int) -> list[Path]:
    out = []
    for p in cfg.portfolios:
        cmp = compare(_ledgers(cfg, root, p))
        out += write_comparison(cmp, root / "compare", p)
        out.append(_write_json(root / "compare" / f"{p}.json", comparison_json(cmp)))
    return out


def stage_stats(cfg: ExperimentConfig, root: Path, jobs: int) -> list[Path]:
    out = []
    for p in cfg.portfolios:
        leds = _ledgers(cfg, root, p)
        res = {}
        for b in cfg.baselines:
            try:
                res[b.kind] = stability_from_returns(leds[MSPM].R, leds[b.kind].R, label_a=MSPM,
                                                     label_b=b.kind).to_json()
            except StatsError as exc:
                res[b.kind] = {"error": str(exc)}
        out.append(_write_json(root / "stats" / f"{p}.json", res))
    return out


def ablation_pair(enabled: Ledger, disabled: Ledger) -> dict:
    e, d = enabled.metrics(), disabled.metrics()
    return {"enabled": e.to_json(), "disabled": d.to_json(), "arr_gap_pct": e.arr_pct - d.arr_pct,
            "enabled_exceeds_disabled": bool(e.arr_pct > d.arr_pct),
            "reference_gap": {"value": REFERENCE_ABLATION_GAP, "reproducible": False,
                              "note": "published full-scale figure; depends on subscription data and "
                                      "full-length training, so it is recorded as context only"}}


def stage_ablate(cfg: ExperimentConfig, root: Path, jobs: int) -> list[Path]:
    """Retrain each portfolio's allocator with the signal channel zeroed
    (same seeds, same hyperparameters) and pair its backtest with the
    signal-enabled one."""
    results = _run_jobs(_train_sam_job, _sam_jobs(cfg, root, ablated=True), jobs)
    out = []
    for p, (actor, critic, log) in zip(cfg.portfolios, results):
        out += _save_sam(root, f"{p}.disabled", actor, critic, log)
        led, _ = _backtest_portfolio(cfg, root, p, ablated=True)
        d = root / "ablate" / p
        d.mkdir(parents=True, exist_ok=True)
        led.strategy = f"{MSPM}-disabled"
        led.to_csv(d / "disabled.csv", with_strategy=True)
        enabled = Ledger.read_csv(root / "backtest" / p / f"{MSPM}.csv", cfg.p0, MSPM)
        out += [d / "disabled.csv", _write_json(d / "pair.json", ablation_pair(enabled, led))]
    return out


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "train-eam": stage_train_eam,
    "gen-signals": stage_gen_signals,
    "train-sam": stage_train_sam,
    "backtest": stage_backtest,
    "baseline": stage_baseline,
    "compare": stage_compare,
    "stats": stage_stats,
    "ablate": stage_ablate,
}


def run_stage(cfg: ExperimentConfig, stage: str, root: Path | None = None, jobs: int = 1) -> RunManifest:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    root = Path(root or cfg.out)
    manifest = RunManifest(root, cfg.digest())
    manifest.require(stage)
    t0 = time.perf_counter()
    fn = STAGE_FUNCS[stage]
    outputs = fn(cfg, root, jobs, manifest) if stage == "train-eam" else fn(cfg, root, jobs)
    manifest.record(stage, outputs, time.perf_counter() - t0)
    emit_report(cfg, root)
    return manifest


def run_pipeline(cfg: ExperimentConfig, root: Path | None = None, jobs: int = 1,
                 stages: tuple[str, ...] = STAGES) -> dict:
    for s in stages:
        run_stage(cfg, s, root, jobs)
    return emit_report(cfg, Path(root or cfg.out))


# --- report -----------------------------------------------------------------

def _read_json(path: Path):
    return json.loads(path.read_text()) if path.exists() else None


def build_report(cfg: ExperimentConfig, root: Path) -> dict:
    manifest = RunManifest(root, cfg.digest())
    if not manifest.stages:
        raise ReportError(f"{root}: empty run, no stage has completed")
    done = set(manifest.stages)
    echo = cfg.to_dict()
    echo.pop("out")
    eam = {"training_runs": list(manifest.data.get("eam_training_runs", [])),
           "foundational": cfg.symbols()[0] if "train-eam" in done else None, "positions": {}}
    if "gen-signals" in done:
        for sym in cfg.symbols():
            eam["positions"][sym] = _read_json(root / "signals" / f"{sym}.positions.json")
    portfolios = {}
    for p, syms in cfg.portfolios.items():
        entry: dict = {"symbols": list(syms)}
        if "backtest" in done:
            m = _read_json(root / "backtest" / p / f"{MSPM}.metrics.json")
            entry["metrics"] = {MSPM: m["experiment"]}
            entry["validation"] = m["validation"]
        if "baseline" in done:
            entry.setdefault("metrics", {})
            for b in cfg.baselines:
                led = Ledger.read_csv(root / "backtest" / p / f"{b.kind}.csv", cfg.p0, b.kind)
                entry["metrics"][b.kind] = led.metrics().to_json()
        if "compare" in done:
            entry["comparison"] = _read_json(root / "compare" / f"{p}.json")
        if "stats" in done:
            entry["stats"] = _read_json(root / "stats" / f"{p}.json")
        if "ablate" in done:
            entry["ablation"] = _read_json(root / "ablate" / p / "pair.json")
        portfolios[p] = entry
    missing = [s for s in STAGES if s not in done]
    return finalize_report({
        "schema_version": 1,
        "engine_version": __version__,
        "status": "complete" if not missing else "incomplete",
        "missing_stages": missing,
        "config_digest": cfg.digest(),
        "config": echo,
        "eam": eam,
        "portfolios": portfolios,
    })


def emit_report(cfg: ExperimentConfig, root: Path) -> dict:
    report = build_report(cfg, Path(root))
    write_report(report, Path(root) / "report.json")
    return report
