"""Exit criteria. Each test carries a criterion marker; the terminal summary prints one line per criterion."""
from __future__ import annotations

import csv
import io
import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import linalg

from factorsearch import dsl, portfolio as pf
from factorsearch.combine import FactorMatrix, composite_score, fit_ridge, ridge_solve
from factorsearch.config import SessionConfig
from factorsearch.evaluation import (REASON_DAYS, REASON_MEAN_IC, REASON_TSTAT, EvalMetrics, GateConfig,
                                     apply_gate, daily_ic, summarize_ic)
from factorsearch.search import Engine
from factorsearch.trace import Trace, fixed_clock, read_state, verify_integrity
from factorsearch.panel import load_cache
from helpers import PIPELINE, STAMP, build_trace, run_pipeline
from oracles import (assert_same_cells, naive_daily_ic, naive_evaluate, one_sample_t, random_expr,
                     random_panel, step_metrics)

pytestmark = pytest.mark.acceptance

SYNTH_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic.yaml"
ARTIFACTS = ("trace.jsonl", "model.json", *(f"reports/backtest_{w}_{k}.csv" for w in ("train", "validation", "oos")
                                              for k in ("equal", "cap")),
             "reports/fee_sweep.csv", "reports/fee_paths.csv",
             *(f"reports/paths_{w}_{k}.csv" for w in ("train", "validation", "oos") for k in ("equal", "cap")))


def synthetic_session(root: Path) -> Path:
    """Copy of the shipped synthetic config with data and outputs under ``root``."""
    raw = yaml.safe_load(SYNTH_CONFIG.read_text())
    raw["data"]["path"] = "data/synthetic.csv"
    raw["output_dir"] = "out"
    root.mkdir(parents=True, exist_ok=True)
    path = root / "session.yaml"
    path.write_text(yaml.safe_dump(raw, sort_keys=True))
    return path


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run_a")
    cfg = synthetic_session(root)
    t0 = time.perf_counter()
    codes = run_pipeline(cfg, 5)
    return root, cfg, codes, time.perf_counter() - t0


# -- 1 ----------------------------------------------------------------------------------

@pytest.mark.criterion(1, "DSL oracle equivalence (1000 pairs, <= 1e-10, < 60 s)")
def test_ac01_dsl_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for i in range(1000):
        A, D = int(rng.integers(2, 11)), int(rng.integers(5, 101))
        cols = random_panel(rng, A, D)
        e = random_expr(rng, max_depth=int(rng.integers(2, 7)))
        try:
            assert_same_cells(dsl.evaluate(e, cols), naive_evaluate(e, cols), tol=1e-10)
        except AssertionError as exc:
            raise AssertionError(f"pair {i}: {dsl.canonical_form(e)}: {exc}") from None
    assert time.perf_counter() - t0 < 60


# -- 2 ----------------------------------------------------------------------------------

@pytest.mark.criterion(2, "point-in-time prefix property (200 exprs, exact, < 30 s)")
def test_ac02_point_in_time():
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    for i in range(200):
        cols = random_panel(rng, 8, 100)
        e = random_expr(rng, max_depth=6, max_window=20)
        full = dsl.evaluate(e, cols)
        for cut in sorted(set(rng.integers(1, 100, 5).tolist()) | {1, 99}):
            part = dsl.evaluate(e, {k: v[:, :cut] for k, v in cols.items()})
            same = np.array_equal(part, full[:, :cut], equal_nan=True)
            assert same, f"expr {i} {dsl.canonical_form(e)} differs at cut {cut}"
    assert time.perf_counter() - t0 < 30


# -- 3 ----------------------------------------------------------------------------------

@pytest.mark.criterion(3, "IC and t-stat oracle (500 panels, <= 1e-10)")
def test_ac03_ic_oracle():
    rng = np.random.default_rng(3)
    for i in range(500):
        A, T = int(rng.integers(5, 40)), int(rng.integers(3, 60))
        s = rng.normal(size=(A, T)) * rng.uniform(0.01, 100)
        r = 0.1 * s / s.std() + rng.normal(0, 0.02, (A, T))
        if i % 5 == 0:
            s = np.round(s)                                     # ties and constant days
        s[rng.random(s.shape) < 0.1] = np.nan
        r[rng.random(r.shape) < 0.1] = np.nan
        got = daily_ic(s, r, 5)
        want = np.array(naive_daily_ic(s, r, 5))
        assert np.array_equal(np.isnan(got), np.isnan(want)), i
        ok = ~np.isnan(want)
        assert np.abs(got[ok] - want[ok]).max(initial=0) <= 1e-10, i
        if ok.sum() >= 2:
            mean, t, _ = summarize_ic(got)
            m2, t2 = one_sample_t(list(want[ok]))
            assert abs(mean - m2) <= 1e-10
            assert abs(t - t2) <= 1e-10 * max(1.0, abs(t2)), (i, t, t2)


# -- 4 ----------------------------------------------------------------------------------

@pytest.mark.criterion(4, "ridge oracle (100 problems, <= 1e-8; OLS <= 1e-10)")
def test_ac04_ridge_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = int(rng.integers(1, 6))
        A, T = int(rng.integers(5, 30)), int(rng.integers(20, 80))
        scores = {f"f{k}": rng.normal(size=(A, T)) for k in range(q)}
        F = FactorMatrix.from_scores(scores)
        y = rng.normal(0, 0.02, (A, T))
        y[rng.random(y.shape) < 0.05] = np.nan
        lam = float(rng.choice([0.0, 0.01, 1.0, 25.0]))
        train = np.arange(T // 2)
        m = fit_ridge(F, y, lam, train)
        S, r = F.rows(train, y)
        resid = (S.T @ S + lam * np.eye(q)) @ m.beta - S.T @ r
        assert np.abs(resid).max() < 1e-8
        aug = np.vstack([S, math.sqrt(lam) * np.eye(q)])
        indep = linalg.lstsq(aug, np.concatenate([r, np.zeros(q)]))[0]
        assert np.abs(m.beta - indep).max() < 1e-8
    for _ in range(20):
        x = rng.normal(size=int(rng.integers(5, 500)))
        y = rng.normal() * x + rng.normal(size=x.size)
        slope = sum(a * b for a, b in zip(x, y)) / sum(a * a for a in x)
        assert abs(ridge_solve(x[:, None], y, 0.0)[0] - slope) < 1e-10


# -- 5 ----------------------------------------------------------------------------------

@pytest.mark.criterion(5, "backtest accounting (wealth <= 1e-12, fee monotone, cap == equal bitwise)")
def test_ac05_backtest_accounting():
    rng = np.random.default_rng(5)
    fees = (0.0, 0.0005, 0.001, 0.002, 0.003)
    for _ in range(30):
        A, T = int(rng.integers(10, 40)), int(rng.integers(40, 150))
        s = rng.normal(size=(A, T))
        s[rng.random(s.shape) < 0.1] = np.nan
        r = rng.normal(0.0, 0.03, (A, T))
        r[rng.random(r.shape) < 0.03] = np.nan
        idx = np.arange(T)
        curves = []
        for fee in fees:
            res = pf.backtest(s, r, idx, pf.PortfolioConfig(fee_one_way=fee))
            final = {lab: v for d, lab, v in res.paths() if d == str(res.dates[-1])}
            for k, lab in enumerate(res.labels):
                compounded = step_metrics(list(res.net[k]))["wealth"]
                assert abs((final[lab] + 1.0) - compounded) <= 1e-12 * max(1.0, compounded)
            curves.append(np.cumprod(1 + res.net, axis=1))
        for lo, hi in zip(curves, curves[1:]):
            assert (hi <= lo).all()
        eq = pf.backtest(s, r, idx, pf.PortfolioConfig(weighting="equal"))
        cap = pf.backtest(s, r, idx, pf.PortfolioConfig(weighting="cap"), mcap=np.full((A, T), 1e8))
        assert eq.gross.tobytes() == cap.gross.tobytes() and eq.turnover.tobytes() == cap.turnover.tobytes()
        assert pf.report_csv(eq.rows) == pf.report_csv(cap.rows)


# -- 6 ----------------------------------------------------------------------------------

@pytest.mark.criterion(6, "gate semantics (boundaries pass, one reason per failed condition)")
def test_ac06_gate_semantics():
    g = GateConfig(tau_ic=0.01, tau_t=2.0, min_names_per_day=5, min_days=60)

    def m(ic, t, days):
        return EvalMetrics(ic, t, 0.5, 1.0, days)
    assert apply_gate(m(0.01, 3.0, 100), g).passed
    assert apply_gate(m(0.02, 2.0, 100), g).passed
    assert apply_gate(m(0.02, 3.0, 60), g).passed
    assert apply_gate(m(0.01, 2.0, 60), g).passed
    cases = [(m(math.nextafter(0.01, 0), 3.0, 100), (REASON_MEAN_IC,)),
             (m(0.02, math.nextafter(2.0, 0), 100), (REASON_TSTAT,)),
             (m(0.02, 3.0, 59), (REASON_DAYS,))]
    for metrics_, reasons in cases:
        v = apply_gate(metrics_, g)
        assert not v.passed and v.reasons == reasons


# -- 7 ----------------------------------------------------------------------------------

@pytest.mark.criterion(7, "trace integrity (every single-byte mutation caught at its seq; replay identical)")
def test_ac07_trace_integrity(tmp_path):
    tr = build_trace(tmp_path / "t.jsonl", 50)
    data = tr.path.read_bytes()
    assert verify_integrity(tr.path).n_records == 50
    line_of = np.cumsum([0] + [1 if b == 0x0A else 0 for b in data[:-1]])   # line index of each byte
    bad = tmp_path / "bad.jsonl"
    rng = np.random.default_rng(7)
    for pos in range(len(data)):
        for delta in (0x01, int(rng.integers(2, 256))):
            mutated = bytearray(data)
            mutated[pos] ^= delta
            bad.write_bytes(bytes(mutated))
            rep = verify_integrity(bad)
            assert not rep.ok and rep.first_bad_seq == int(line_of[pos]) - 1, (pos, delta, rep)
    # replay: re-append the logical records to a fresh trace with the same header
    replay = Trace.create(tmp_path / "replay.jsonl", gate=GateConfig(), split=tr.header["split"],
                          config_digest=tr.header["config_digest"], seed=tr.header["seed"],
                          clock=fixed_clock(STAMP))
    for rec in Trace.open(tr.path).records:
        replay.append({k: v for k, v in rec.items() if k not in ("seq", "prev_hash", "hash")})
    assert replay.path.read_bytes() == data


# -- 8 ----------------------------------------------------------------------------------

@pytest.mark.criterion(8, "planted-signal recovery end to end (beats 95% of 100 permutations, < 10 min)")
def test_ac08_planted_signal(synthetic_run):
    root, cfg_path, codes, elapsed = synthetic_run
    assert codes == [0] * len(PIPELINE)
    assert elapsed < 600
    cfg = SessionConfig.load(cfg_path)
    out = root / "out"
    state = read_state(out / "trace.jsonl")
    planted = [c for c in state.passed if "col(alpha)" in c.recipe_text]
    assert planted, "no candidate using the planted column passed the gate"

    engine = Engine.build(load_cache(out / "panel_cache.zip"), cfg.split, cfg.gate)
    train = engine.partitions.train
    assert len(train) == 1096
    recipes = {name: state.hold[name] for name in state.good}
    F = FactorMatrix.from_scores({n: engine.scores(dsl.parse_recipe(t)) for n, t in recipes.items()}, state.good)
    lam = float(cfg.raw["ridge"]["lambda"])
    pcfg = pf.PortfolioConfig(weighting="equal")
    p = engine.panel

    def train_sharpe(targets):
        model = fit_ridge(F, targets, lam, train)
        comp = composite_score(model, F)
        return pf.backtest(comp, targets, train, pcfg, p.tradable, p["mcap"], p.dates).rows[-1].sharpe

    real = train_sharpe(engine.targets)
    rng = np.random.default_rng(cfg.seed)
    null = []
    for _ in range(100):
        y = engine.targets.copy()
        for t in train:                                    # shuffle labels across assets within each date
            ok = np.flatnonzero(~np.isnan(y[:, t]))
            y[ok, t] = y[rng.permutation(ok), t]
        null.append(train_sharpe(y))
    q95 = float(np.quantile(null, 0.95))
    print(f"train L-S Sharpe {real:.3f}; permutation 95th percentile {q95:.3f}")
    assert real > 0 and real > q95


# -- 9 ----------------------------------------------------------------------------------

@pytest.mark.criterion(9, "determinism replay (byte-identical trace, model, CSVs)")
def test_ac09_determinism(synthetic_run, tmp_path):
    root_a = synthetic_run[0]
    root_b = tmp_path / "run_b"
    assert run_pipeline(synthetic_session(root_b), 5) == [0] * len(PIPELINE)
    for rel in ARTIFACTS:
        a, b = (root_a / "out" / rel).read_bytes(), (root_b / "out" / rel).read_bytes()
        assert a == b, rel
    assert (root_a / "data" / "synthetic.csv").read_bytes() == (root_b / "data" / "synthetic.csv").read_bytes()


# -- 10 ---------------------------------------------------------------------------------

@pytest.mark.criterion(10, "report schema fidelity (backtest and fee-sweep CSV columns)")
def test_ac10_report_schema(synthetic_run):
    reports = synthetic_run[0] / "out" / "reports"
    for w in ("train", "validation", "oos"):
        for k in ("equal", "cap"):
            rows = list(csv.reader(io.StringIO((reports / f"backtest_{w}_{k}.csv").read_text())))
            assert rows[0] == ["Group", "AnnRet", "AnnVol", "Sharpe", "MaxDD", "Calmar", "Turnover"]
            assert [r[0] for r in rows[1:]] == ["Q0", "Q1", "Q2", "Q3", "Q4", "L-S"]
            assert all(len(r) == 7 for r in rows)
    fee = list(csv.reader(io.StringIO((reports / "fee_sweep.csv").read_text())))
    assert fee[0] == ["Fee Rate", "AnnRet", "AnnVol", "Sharpe Ratio", "Alpha"]
    assert [float(r[0]) for r in fee[1:]] == [0.0, 0.0005, 0.001, 0.002, 0.003]
