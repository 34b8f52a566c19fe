"""Command-line pipeline: synth -> ingest -> round x N -> curate -> combine -> backtest -> fee-sweep -> report."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dsl, portfolio, synth
from .combine import FactorMatrix, RidgeModel, composite_score, fit_ridge
from .config import SessionConfig
from .errors import (ConfigError, DataError, DslSyntaxError, FactorSearchError, ProtocolFrozenError,
                     StageDependencyError, TraceIntegrityError)
from .agents import make_agent
from .panel import (DERIVED_COLUMNS, RAW_COLUMNS, WINDOWS, compute_derived, filter_universe, load_cache,
                    load_panel, save_panel)
from .search import Engine, curate, run_round
from .trace import Trace, fixed_clock, read_state, repair_truncated_tail, utc_now, verify_integrity

log = logging.getLogger("factorsearch")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_FROZEN = 5
EXIT_INTEGRITY = 6
EXIT_STAGE = 7
EXIT_ROUND = 8

WEIGHTINGS = ("equal", "cap")


# -- session layout -------------------------------------------------------------

class Session:
    """Artifact paths and shared loaders for one config file."""

    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        self.cache = self.out / "panel_cache.zip"
        self.ingest_report = self.out / "ingest_report.jsonl"
        self.trace_path = self.out / "trace.jsonl"
        self.agent_log = self.out / "agent_log.jsonl"
        self.model_path = self.out / "model.json"
        self.reports = self.out / "reports"

    def backtest_csv(self, window: str, weighting: str) -> Path:
        return self.reports / f"backtest_{window}_{weighting}.csv"

    def paths_csv(self, window: str, weighting: str) -> Path:
        return self.reports / f"paths_{window}_{weighting}.csv"

    @property
    def fee_csv(self) -> Path:
        return self.reports / "fee_sweep.csv"

    @property
    def fee_paths_csv(self) -> Path:
        return self.reports / "fee_paths.csv"

    def clock(self):
        c = self.cfg.raw["clock"]
        return fixed_clock(c["epoch"]) if c["mode"] == "fixed" else utc_now

    def engine(self) -> Engine:
        if not self.cache.is_file():
            raise StageDependencyError(f"no panel cache at {self.cache}; run 'ingest' first")
        s = self.cfg.raw["search"]
        t = self.cfg.raw["target"]
        return Engine.build(load_cache(self.cache), self.cfg.split, self.cfg.gate, int(t["exec_lag"]),
                            int(t["hold"]), max_depth=int(s["max_depth"]), quantile=float(s["quantile"]),
                            max_workers=int(s["max_workers"]))

    def open_trace(self) -> Trace:
        if not self.trace_path.is_file():
            raise StageDependencyError(f"no trace at {self.trace_path}; run 'round' first")
        trace = Trace.open(self.trace_path, clock=self.clock())
        self.check_digest(trace)
        return trace

    def check_digest(self, trace: Trace) -> None:
        if trace.header.get("config_digest") != self.cfg.digest:
            raise ProtocolFrozenError(
                "protocol frozen: config digest differs from the trace header "
                f"({self.cfg.digest[:12]} vs {str(trace.header.get('config_digest'))[:12]})")

    def load_model(self) -> RidgeModel:
        if not self.model_path.is_file():
            raise StageDependencyError(f"no model file at {self.model_path}; run 'combine' first")
        return RidgeModel.from_json(self.model_path.read_text(encoding="utf-8"))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def composite_for(engine: Engine, model: RidgeModel) -> np.ndarray:
    scores = {name: engine.scores(dsl.parse_recipe(model.recipes[name])) for name in model.factor_names}
    return composite_score(model, FactorMatrix.from_scores(scores, model.factor_names))


# -- commands ---------------------------------------------------------------------

def cmd_synth(sess: Session, args) -> int:
    override = {k: v for k, v in (("n_assets", args.n_assets), ("n_days", args.n_days),
                                  ("planted_ic", args.planted_ic)) if v is not None}
    scfg = sess.cfg.synth_config(**override)
    if args.seed is not None:
        scfg = dataclasses.replace(scfg, seed=args.seed)
    out = Path(args.out) if args.out else sess.cfg.data_path
    synth.write_csv(synth.generate(scfg), out)
    print(f"wrote {out} ({scfg.n_assets} assets x {scfg.n_days} days, planted_ic={scfg.planted_ic}) "
          f"sha256={sha256_file(out)}")
    return EXIT_OK


def cmd_ingest(sess: Session, args) -> int:
    d = sess.cfg.raw["data"]
    f = sess.cfg.raw["filter"]
    panel, report = load_panel(sess.cfg.data_path, d["schema"], tuple(d["extra_columns"]))
    # record the path as configured so the cache is independent of where the session lives
    report.source = str(d["path"])
    panel = dataclasses.replace(panel, provenance={**panel.provenance, "source": str(d["path"])})
    panel = filter_universe(panel, int(f["min_history_days"]), float(f["min_avg_volume"]),
                            bool(f["rolling_volume"]), int(f["volume_window"]))
    panel = compute_derived(panel, sess.cfg.windows)
    sess.out.mkdir(parents=True, exist_ok=True)
    save_panel(panel, sess.cache)
    _write_text(sess.ingest_report, report.to_jsonl())
    print(f"ingested {report.n_kept}/{report.n_rows} rows, dropped {report.n_dropped}; "
          f"universe {panel.shape[0]} assets x {panel.shape[1]} dates; cache sha256={sha256_file(sess.cache)}")
    return EXIT_OK


def _agents(sess: Session, engine: Engine) -> list:
    a = sess.cfg.raw["agent"]
    columns = sorted(engine.allowed_columns)
    if a["kind"] == "stub":
        return [make_agent("stub", seed=sess.cfg.seed, columns=columns,
                           focus_columns=[c for c in a.get("focus_columns", []) if c in engine.allowed_columns],
                           focus_prob=float(a.get("focus_prob", 0.5)),
                           exploit_prob=float(a.get("exploit_prob", 0.25)))]
    if not a.get("endpoint") or not a.get("model"):
        raise ConfigError("remote agent needs 'endpoint' and 'model'")
    return [make_agent("remote", endpoint=a["endpoint"], model=a["model"], columns=columns,
                       api_key_env=a.get("api_key_env", "FACTORSEARCH_API_KEY"),
                       timeout=float(a.get("timeout", 60.0)), retries=int(a.get("retries", 1)),
                       log_path=sess.agent_log)]


def cmd_round(sess: Session, args) -> int:
    engine = sess.engine()
    if sess.trace_path.is_file():
        trace = sess.open_trace()
    else:
        trace = Trace.create(sess.trace_path, gate=sess.cfg.gate, split=sess.cfg.split,
                             config_digest=sess.cfg.digest, seed=sess.cfg.seed, clock=sess.clock(),
                             extra={"panel_sha256": sha256_file(sess.cache)})
    budget = int(sess.cfg.raw["search"]["rounds"])
    agents = _agents(sess, engine)
    for _ in range(args.count):
        state = read_state(trace)
        if state.last_round >= budget:
            raise StageDependencyError(f"round budget exhausted ({budget} rounds)")
        try:
            report = run_round(engine, trace, agents, sess.cfg.batch)
        except OSError as exc:
            print(f"error: round aborted: {exc}", file=sys.stderr)
            return EXIT_ROUND
        print(report.to_text())
    return EXIT_OK


def cmd_curate(sess: Session, args) -> int:
    trace = sess.open_trace()
    state = read_state(trace)
    if not state.hold:
        raise StageDependencyError("hold pool is empty; no candidate has passed the gate")
    c = sess.cfg.raw["curation"]
    pools = curate(sess.engine(), trace, float(c["corr_threshold"]), int(c["max_size"]))
    print(f"good pool ({len(pools.good)} of {len(pools.hold)}): " + ", ".join(pools.good))
    return EXIT_OK


def cmd_combine(sess: Session, args) -> int:
    trace = sess.open_trace()
    state = read_state(trace)
    if not state.good:
        raise StageDependencyError("good pool is empty; run 'curate' first")
    engine = sess.engine()
    engine.check_frozen(trace.header)
    recipes = {name: state.hold[name] for name in state.good}
    scores = {name: engine.scores(dsl.parse_recipe(text)) for name, text in recipes.items()}
    F = FactorMatrix.from_scores(scores, state.good)
    train = engine.partitions.train
    dates = engine.panel.dates
    window = (str(dates[train[0]]), str(dates[train[-1]]))
    model = fit_ridge(F, engine.targets, float(sess.cfg.raw["ridge"]["lambda"]), train, window)
    model.recipes = recipes
    model.provenance = {"trace_header_hash": trace.header["hash"], "trace_head_hash": trace.head_hash,
                        "config_digest": sess.cfg.digest, "panel_sha256": sha256_file(sess.cache)}
    _write_text(sess.model_path, model.to_json())
    print(f"ridge fit on {model.n_rows} train rows, lambda={model.lam}")
    for name, b in zip(model.factor_names, model.beta):
        print(f"  {b:+.6f}  {name}")
    return EXIT_OK


def cmd_backtest(sess: Session, args) -> int:
    engine = sess.engine()
    model = sess.load_model()
    composite = composite_for(engine, model)
    p = engine.panel
    base = sess.cfg.portfolio
    for window in WINDOWS:
        for weighting in WEIGHTINGS:
            cfg = dataclasses.replace(base, weighting=weighting)
            res = portfolio.backtest(composite, engine.targets, engine.partitions[window], cfg,
                                     p.tradable, p["mcap"], p.dates)
            _write_text(sess.backtest_csv(window, weighting), portfolio.report_csv(res.rows))
            _write_text(sess.paths_csv(window, weighting), portfolio.paths_csv(res.paths()))
            ls = res.rows[-1]
            print(f"{window:<10} {weighting:<5} L-S AnnRet={ls.ann_ret:+.4f} Sharpe={ls.sharpe:+.3f} "
                  f"MaxDD={ls.max_dd:.4f} Turnover={ls.turnover:.3f}")
    return EXIT_OK


def cmd_fee_sweep(sess: Session, args) -> int:
    engine = sess.engine()
    model = sess.load_model()
    composite = composite_for(engine, model)
    p = engine.panel
    window = sess.cfg.raw["fee_sweep"]["window"]
    cfg = dataclasses.replace(sess.cfg.portfolio, weighting="equal", fee_one_way=0.0)
    res = portfolio.backtest(composite, engine.targets, engine.partitions[window], cfg, p.tradable,
                             p["mcap"], p.dates)
    bench = None
    if sess.cfg.raw["fee_sweep"]["benchmark"] == "market":
        bench = portfolio.market_benchmark(engine.targets[:, res.index], p.tradable[:, res.index])
    fees = [float(f) for f in sess.cfg.raw["fees"]]
    rows, paths = portfolio.fee_sweep(res.gross[-1], res.turnover[-1], fees, bench)
    _write_text(sess.fee_csv, portfolio.fee_sweep_csv(rows))
    long = [(str(d), f"fee={fee!r}", float(v)) for fee in fees for d, v in zip(res.dates, paths[fee])]
    _write_text(sess.fee_paths_csv, portfolio.paths_csv(long))
    for r in rows:
        print(f"fee={r.fee:<8g} AnnRet={r.ann_ret:+.4f} Sharpe={r.sharpe:+.3f} Alpha={r.alpha:+.4f}")
    return EXIT_OK


def cmd_report(sess: Session, args) -> int:
    needed = [sess.backtest_csv(w, k) for w in WINDOWS for k in WEIGHTINGS]
    missing = [str(x) for x in needed if not x.is_file()]
    if missing:
        raise StageDependencyError("backtest artifacts missing; run 'backtest' first: " + ", ".join(missing))
    if not sess.fee_csv.is_file():
        raise StageDependencyError("fee sweep missing; run 'fee-sweep' first")
    trace = sess.open_trace()
    state = read_state(trace)
    model = sess.load_model()
    lines = ["# Session report", "", f"config digest: {sess.cfg.digest}",
             f"trace head: seq {trace.head_seq}, hash {trace.head_hash}",
             f"rounds: {state.last_round}; candidates: {len(state.candidates)} "
             f"({len(state.passed)} passed, {len(state.rejected)} rejected before evaluation)",
             f"good pool: {', '.join(state.good)}", "", "## Ridge weights", ""]
    lines += [f"- {n}: {b:+.6f}" for n, b in zip(model.factor_names, model.beta)]
    for w in WINDOWS:
        for k in WEIGHTINGS:
            lines += ["", f"## {w} / {k}", "", "```", sess.backtest_csv(w, k).read_text().rstrip(), "```"]
    lines += ["", "## Fee sensitivity", "", "```", sess.fee_csv.read_text().rstrip(), "```", ""]
    _write_text(sess.reports / "summary.md", "\n".join(lines))
    artifacts = [sess.trace_path, sess.model_path, *needed, *(sess.paths_csv(w, k) for w in WINDOWS for k in WEIGHTINGS),
                 sess.fee_csv, sess.fee_paths_csv]
    manifest = {str(a.relative_to(sess.out)): sha256_file(a) for a in artifacts if a.is_file()}
    _write_text(sess.reports / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_verify_trace(sess: Session | None, args) -> int:
    path = Path(args.trace) if args.trace else sess.trace_path
    if args.repair:
        dropped = repair_truncated_tail(path)
        if dropped:
            print(f"removed {dropped} byte(s) of partial trailing record")
    rep = verify_integrity(path)
    if rep.ok:
        tail = " (partial last line ignored)" if rep.truncated_tail else ""
        print(f"ok: {rep.n_records} records, head {rep.head_hash}{tail}")
        return EXIT_OK
    print(f"integrity failure: first bad seq {rep.first_bad_seq}: {rep.message}", file=sys.stderr)
    return EXIT_INTEGRITY


def cmd_validate_recipe(sess: Session | None, args) -> int:
    if args.columns:
        columns = set(args.columns.split(","))
    else:
        columns = set(RAW_COLUMNS) | set(DERIVED_COLUMNS)
        if sess is not None:
            columns |= set(sess.cfg.raw["data"]["extra_columns"])
    try:
        expr = dsl.parse_recipe(args.recipe)
    except DslSyntaxError as exc:
        print(f"syntax error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    rep = dsl.validate(expr, columns, args.max_depth)
    print(dsl.canonical_form(expr))
    if rep.ok:
        print(f"ok ({rep.note})")
        return EXIT_OK
    for v in rep.violations:
        print(f"violation [{v.rule}] at {list(v.path)}: {v.message}", file=sys.stderr)
    return EXIT_FAILURE


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "round": cmd_round, "curate": cmd_curate,
    "combine": cmd_combine, "backtest": cmd_backtest, "fee-sweep": cmd_fee_sweep, "report": cmd_report,
    "verify-trace": cmd_verify_trace, "validate-recipe": cmd_validate_recipe,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="factorsearch", description="Auditable factor search pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(name, help_, required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", required=required, help="session YAML file")
        return p

    p = with_config("synth", "write a synthetic panel CSV with a planted signal")
    p.add_argument("--out", help="CSV path (default: data.path from the config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-assets", type=int)
    p.add_argument("--n-days", type=int)
    p.add_argument("--planted-ic", type=float)
    with_config("ingest", "load, filter and derive the panel; write the cache")
    p = with_config("round", "run one search round (appends to the trace)")
    p.add_argument("--count", type=int, default=1, help="number of consecutive rounds")
    with_config("curate", "select the good pool from the hold pool")
    with_config("combine", "fit the ridge model on the good pool (train window)")
    with_config("backtest", "quintile reports per window and weighting")
    with_config("fee-sweep", "L-S metrics across the configured fee grid")
    with_config("report", "summarize artifacts and write a digest manifest")
    p = with_config("verify-trace", "check the trace hash chain", required=False)
    p.add_argument("trace", nargs="?", help="trace file (default: the session trace)")
    p.add_argument("--repair", action="store_true", help="drop a partial trailing line first")
    p = with_config("validate-recipe", "parse and validate a DSL recipe", required=False)
    p.add_argument("recipe")
    p.add_argument("--columns", help="comma-separated approved columns")
    p.add_argument("--max-depth", type=int, default=dsl.DEFAULT_MAX_DEPTH)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sess = Session(SessionConfig.load(args.config)) if args.config else None
        if sess is None and args.command == "verify-trace" and not args.trace:
            raise ConfigError("verify-trace needs a trace path or --config")
        return COMMANDS[args.command](sess, args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except DataError as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except ProtocolFrozenError as exc:
        code, msg = EXIT_FROZEN, str(exc)
    except TraceIntegrityError as exc:
        code, msg = EXIT_INTEGRITY, f"integrity error: {exc}"
    except StageDependencyError as exc:
        code, msg = EXIT_STAGE, f"dependency error: {exc}"
    except (FactorSearchError, np.linalg.LinAlgError, ValueError) as exc:
        code, msg = EXIT_FAILURE, f"error: {exc}"
    print(msg, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
