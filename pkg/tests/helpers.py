"""Builders shared by several test modules."""
from __future__ import annotations

from factorsearch.evaluation import EvalMetrics, GateConfig, Verdict
from factorsearch.panel import SplitConfig
from factorsearch.trace import CandidateRecord, RoundSummary, Trace, fixed_clock

STAMP = "2026-01-01T00:00:00Z"


def candidate(name: str, round_no: int = 1, ic: float = 0.02, t: float = 3.0, recipe: str = "abs(col(ret))",
              passed: bool | None = None) -> CandidateRecord:
    m = EvalMetrics(ic, t, 1.0, 0.9, 100)
    ok = (ic >= 0.01 and t >= 2.0) if passed is None else passed
    return CandidateRecord(name=name, hypothesis=f"{name} predicts returns", rationale="test",
                           candidate_type="hypothesis", recipe_text=recipe, metrics_train=m,
                           verdict=Verdict(ok, () if ok else ("t-stat",)), round=round_no)


def records_for(n: int) -> list:
    """n mixed records: candidates, amendments and one summary every ten."""
    out = []
    for i in range(n):
        r = 1 + i // 10
        if i % 10 == 9:
            out.append(RoundSummary(r, f"round {r} done", "continue", {"hold": []}, {"passed": 0}))
        elif i % 3 == 2:
            out.append({"kind": "amendment", "round": r, "ref_seq": i - 1, "ref_name": f"f{i - 1}",
                        "author": "stub", "interpretation": f"note {i}"})
        else:
            out.append(candidate(f"f{i}", r, ic=0.001 * (i % 7), t=0.5 * (i % 9)))
    return out


def build_trace(path, n: int = 50, one_by_one: bool = True) -> Trace:
    tr = Trace.create(path, gate=GateConfig(), split=SplitConfig(), config_digest="d" * 64, seed=7,
                      clock=fixed_clock(STAMP))
    recs = records_for(n)
    if one_by_one:
        for r in recs:
            tr.append(r)
    else:
        tr.append_many(recs)
    return tr


SMALL_SPLIT = {"train": ["2020-01-01", "2020-09-30"], "validation": ["2020-10-01", "2020-11-30"],
               "oos": ["2020-12-01", "2021-03-31"]}


def small_panel(tmp_path, n_assets: int = 20, n_days: int = 456, planted_ic: float = 0.1, seed: int = 3):
    """Ingested synthetic panel (with the planted column) covering SMALL_SPLIT."""
    from factorsearch import synth
    from factorsearch.panel import compute_derived, filter_universe, load_panel
    csv = synth.write_csv(synth.generate(synth.SynthConfig(seed=seed, n_assets=n_assets, n_days=n_days,
                                                           planted_ic=planted_ic)), tmp_path / "p.csv")
    panel, _ = load_panel(csv, extra_columns=(synth.PLANTED_COLUMN,))
    return compute_derived(filter_universe(panel, min_history_days=20))


def small_engine(tmp_path, **kw):
    from factorsearch.search import Engine
    return Engine.build(small_panel(tmp_path, **kw), SplitConfig.from_dict(SMALL_SPLIT), GateConfig())


def new_trace(path, engine) -> Trace:
    return Trace.create(path, gate=engine.gate, split=engine.split_cfg, clock=fixed_clock(STAMP))


def session_yaml(root, rounds: int = 3, **extra) -> "Path":
    """Small, fast session config under ``root`` (data and output live beside it)."""
    import yaml
    cfg = {
        "seed": 11,
        "data": {"path": "data/panel.csv", "extra_columns": ["alpha"]},
        "filter": {"min_history_days": 20},
        "split": SMALL_SPLIT,
        "search": {"rounds": rounds, "batch": {"mechanical": 3, "hypothesis": 6}},
        "agent": {"kind": "stub", "focus_columns": ["alpha"], "focus_prob": 0.5},
        "synth": {"n_assets": 20, "n_days": 456, "planted_ic": 0.1},
        "output_dir": "out",
    }
    for k, v in extra.items():
        cfg[k] = v
    path = root / "session.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


PIPELINE = ("synth", "ingest", "round", "curate", "combine", "backtest", "fee-sweep", "report")


def run_pipeline(config, rounds: int) -> list[int]:
    from factorsearch.cli import main
    codes = []
    for step in PIPELINE:
        argv = [step, "-c", str(config)]
        if step == "round":
            argv += ["--count", str(rounds)]
        codes.append(main(argv))
    return codes
