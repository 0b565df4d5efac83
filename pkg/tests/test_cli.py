import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from mspm import config as cfgmod
from mspm import pipeline
from mspm.cli import main
from mspm.metrics import drawdown_series
from mspm.nncore import NonFiniteError, read
from mspm.reporting import (
    REPORT_SCHEMA,
    ReportError,
    canonical_json,
    compare,
    report_digest,
    validate_report,
)
from mspm.sam import Ledger, Market
from tests.test_sam import frame_from_closes, random_market

TINY = Path(__file__).parent / "fixtures" / "tiny.yaml"


def artifacts(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(TINY), "--out", str(root)]) == 0
    return root


def test_print_defaults_round_trips(capsys):
    assert main(["print-defaults"]) == 0
    text = capsys.readouterr().out
    cfg = cfgmod.from_dict(yaml.safe_load(text))
    assert cfg == cfgmod.default_config()
    assert cfg.eam.beta == 0.0025 and cfg.p0 == 10_000.0 and cfg.sam.window == 50


def test_config_errors_exit_2(tmp_path):
    raw = yaml.safe_load(TINY.read_text())
    bad = dict(raw, sam={**raw["sam"], "not_a_field": 1})
    (tmp_path / "a.yaml").write_text(yaml.safe_dump(bad))
    assert main(["ingest", "--config", str(tmp_path / "a.yaml"), "--out", str(tmp_path / "o")]) == 2
    bad = dict(raw, portfolios={"P": ["S1", "NOPE"]})
    (tmp_path / "b.yaml").write_text(yaml.safe_dump(bad))
    assert main(["ingest", "--config", str(tmp_path / "b.yaml"), "--out", str(tmp_path / "o")]) == 2
    assert main(["ingest", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["ingest", "--config", str(TINY), "--out", str(tmp_path / "o"), "--jobs", "0"]) == 2


def test_missing_prerequisite_exits_3(tmp_path):
    out = str(tmp_path / "o")
    assert main(["backtest", "--config", str(TINY), "--out", out]) == 3
    assert main(["ingest", "--config", str(TINY), "--out", out]) == 0
    assert main(["backtest", "--config", str(TINY), "--out", out]) == 3
    assert main(["gen-signals", "--config", str(TINY), "--out", out]) == 3


def test_report_on_empty_run_is_an_error(tmp_path):
    assert main(["report", "--config", str(TINY), "--out", str(tmp_path / "empty")]) == 3


def test_divergence_exits_4(tmp_path, monkeypatch):
    out = str(tmp_path / "o")
    assert main(["synth", "--config", str(TINY), "--out", out]) == 0

    def boom(*a, **k):
        raise NonFiniteError("non-finite DQN loss")
    monkeypatch.setattr(pipeline, "train_eam", boom)
    assert main(["train-eam", "--config", str(TINY), "--out", out]) == 4


def test_other_config_in_same_run_dir_rejected(run_dir, tmp_path):
    clone = tmp_path / "clone"
    shutil.copytree(run_dir, clone)
    assert main(["report", "--config", str(TINY), "--out", str(clone), "--seed-override", "99"]) == 2


def test_eam_trained_once_per_symbol(run_dir):
    man = json.loads((run_dir / "manifest.json").read_text())
    # P1 = S1, S2 and P2 = S2, S3 share S2
    assert man["eam_training_runs"] == ["S1", "S2", "S3"]
    ckpts = sorted(p.name for p in (run_dir / "eam").glob("*.ckpt"))
    assert ckpts == ["S1.ckpt", "S2.ckpt", "S3.ckpt"]
    assert read(run_dir / "eam" / "S1.ckpt").meta["init"] == "fresh"
    assert read(run_dir / "eam" / "S3.ckpt").meta["init"] == "S1"


def test_report_is_complete_and_valid(run_dir):
    report = json.loads((run_dir / "report.json").read_text())
    validate_report(report)
    assert report["status"] == "complete" and report["missing_stages"] == []
    p1 = report["portfolios"]["P1"]
    assert set(p1["metrics"]) == {"MSPM", "CRP", "BAH", "EG", "FTRL"}
    assert p1["ablation"]["reference_gap"]["value"] == "at least 1341.8%"
    assert p1["ablation"]["reference_gap"]["reproducible"] is False
    assert set(p1["stats"]) == {"CRP", "BAH", "EG", "FTRL"}


def test_report_digest_survives_reserialization(run_dir):
    report = json.loads((run_dir / "report.json").read_text())
    shuffled = json.loads(json.dumps(dict(reversed(list(report.items()))), indent=5))
    assert report_digest(shuffled) == report["digest"]
    assert canonical_json(shuffled) == canonical_json(report)
    tampered = json.loads(json.dumps(report))
    tampered["portfolios"]["P1"]["symbols"] = ["S9"]
    with pytest.raises(ReportError):
        validate_report(tampered)


def test_partial_run_is_marked_incomplete(tmp_path):
    out = str(tmp_path / "o")
    assert main(["ingest", "--config", str(TINY), "--out", out]) == 0
    assert main(["baseline", "--config", str(TINY), "--out", out]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] == "incomplete"
    assert "train-eam" in report["missing_stages"]
    assert set(report["portfolios"]["P1"]["metrics"]) == {"CRP", "BAH", "EG", "FTRL"}


def test_pipeline_is_deterministic(run_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["run", "--config", str(TINY), "--out", str(again), "--jobs", "2"]) == 0
    a, b = artifacts(run_dir), artifacts(again)
    assert a.keys() == b.keys()
    assert all(a[k] == b[k] for k in a)


def test_seed_override_changes_outputs(run_dir, tmp_path):
    other = tmp_path / "other"
    assert main(["run", "--config", str(TINY), "--out", str(other), "--seed-override", "5",
                 "--stage", "ingest"]) == 0
    assert (other / "data" / "S1.prices.csv").read_bytes() != (run_dir / "data" / "S1.prices.csv").read_bytes()


def test_rerun_invalidates_downstream(run_dir, tmp_path):
    clone = tmp_path / "clone"
    shutil.copytree(run_dir, clone)
    assert main(["train-sam", "--config", str(TINY), "--out", str(clone)]) == 0
    man = json.loads((clone / "manifest.json").read_text())
    assert "train-sam" in man["stages"] and "backtest" not in man["stages"] and "ablate" not in man["stages"]
    assert "baseline" in man["stages"]


def test_ledgers_cover_the_experiment_range(run_dir):
    cfg = cfgmod.load(TINY)
    for name in ("MSPM", "CRP", "FTRL"):
        led = Ledger.read_csv(run_dir / "backtest" / "P1" / f"{name}.csv", cfg.p0)
        assert str(led.dates[0]) >= cfg.split.sam_experiment[0]
        assert str(led.dates[-1]) <= cfg.split.sam_experiment[1]
        assert np.all(led.allocations >= 0) and np.allclose(led.allocations.sum(1), 1, atol=1e-9)
        led.check_recursion(1e-12)


def test_ablated_market_differs_only_in_signal_channel():
    mk = random_market(np.random.default_rng(0), m=3, T=30)
    off = mk.ablated()
    assert np.array_equal(off.data[:5], mk.data[:5]) and np.array_equal(off.y, mk.y)
    assert np.all(off.data[5] == 0) and np.any(mk.data[5] != 0)
    s_on, s_off = mk.states(np.arange(9, 30), 10), off.states(np.arange(9, 30), 10)
    assert s_on.shape == s_off.shape
    assert np.array_equal(s_on[:, :5], s_off[:, :5])


# --- comparison -------------------------------------------------------------

def _ledger(mk, weights, name):
    from mspm.sam import run_ledger
    return run_ledger(mk, lambda k, w: np.asarray(weights, float), name, 10_000.0, 0.0025, 0.001, 3)


def test_compare_single_strategy_and_underwater_oracle():
    mk = random_market(np.random.default_rng(1), m=2, T=40)
    led = _ledger(mk, [0, 0.5, 0.5], "A")
    cmp = compare({"A": led})
    assert cmp.strategies == ["A"] and all(v == ["A"] for v in cmp.best.values())
    p = np.concatenate([[led.p0], led.values])
    peak = p[0]
    dd = []
    for v in p:
        peak = max(peak, v)
        dd.append(100.0 * (v / peak - 1.0))
    np.testing.assert_allclose(cmp.underwater["A"], dd[1:], atol=1e-12)
    np.testing.assert_allclose(drawdown_series(p)[1:], dd[1:], atol=1e-12)


def test_compare_flags_best_cells():
    closes = np.concatenate([np.linspace(1, 2, 20), np.linspace(2, 1.5, 20)])
    mk = Market([frame_from_closes("UP", closes), frame_from_closes("FLAT", np.ones(40))])
    cash = _ledger(mk, [1, 0, 0], "CASH")
    risky = _ledger(mk, [0, 1, 0], "RISKY")
    cmp = compare({"CASH": cash, "RISKY": risky})
    assert cmp.best["ARR (%)"] == ["RISKY"]
    assert cmp.best["MD (%)"] == ["CASH"]  # 0 drawdown beats any loss
    assert cmp.table["SR"]["CASH"] is None  # no losing day: downside undefined


def test_compare_rejects_misaligned_ledgers():
    mk = random_market(np.random.default_rng(2), m=2, T=40)
    a = _ledger(mk, [0, 0.5, 0.5], "A")
    from mspm.sam import run_ledger
    b = run_ledger(mk, lambda k, w: np.array([0, 0.5, 0.5]), "B", 10_000.0, 0.0025, 0.001, 3, start=5)
    with pytest.raises(ReportError):
        compare({"A": a, "B": b})


def test_schema_requires_core_fields():
    assert "digest" in REPORT_SCHEMA["required"] and "status" in REPORT_SCHEMA["required"]
