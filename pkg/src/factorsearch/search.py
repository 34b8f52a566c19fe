"""Round orchestration: gather proposals, screen, evaluate, gate, log, curate pools."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import dsl
from .agents import AgentAdapter, CandidateProposal
from .errors import FactorSearchError, ProtocolFrozenError
from .evaluation import EvalMetrics, GateConfig, apply_gate, evaluate_signal
from .panel import Panel, Partitions, SplitConfig, forward_return, split
from .trace import CandidateRecord, ResearchState, RoundSummary, Trace, read_state

log = logging.getLogger(__name__)


@dataclass
class Engine:
    """Deterministic evaluator bound to one panel, one target, one frozen protocol."""

    panel: Panel
    targets: np.ndarray
    partitions: Partitions
    gate: GateConfig
    split_cfg: SplitConfig
    max_depth: int = dsl.DEFAULT_MAX_DEPTH
    quantile: float = 0.2
    max_workers: int = 1

    @classmethod
    def build(cls, panel: Panel, split_cfg: SplitConfig, gate: GateConfig, exec_lag: int = 1,
              hold: int = 1, **kw) -> "Engine":
        return cls(panel, forward_return(panel, exec_lag, hold), split(panel, split_cfg), gate, split_cfg, **kw)

    @property
    def allowed_columns(self) -> frozenset[str]:
        return frozenset(self.panel.columns)

    def scores(self, expr: dsl.Expr) -> np.ndarray:
        """Recipe scores with non-tradable cells blanked."""
        return np.where(self.panel.tradable, dsl.evaluate(expr, self.panel), np.nan)

    def metrics(self, scores: np.ndarray, window: str = "train") -> EvalMetrics:
        return evaluate_signal(scores, self.targets, self.panel.tradable, self.partitions[window],
                               self.gate.min_names_per_day, self.quantile)

    def check_frozen(self, header: dict) -> None:
        if header.get("gate") != self.gate.to_dict():
            raise ProtocolFrozenError("protocol frozen: gate config differs from the trace header")
        if header.get("split") != self.split_cfg.to_dict():
            raise ProtocolFrozenError("protocol frozen: split config differs from the trace header")


@dataclass
class PoolState:
    hold: dict[str, str] = field(default_factory=dict)
    good: list[str] = field(default_factory=list)

    def __post_init__(self):
        missing = [g for g in self.good if g not in self.hold]
        if missing:
            raise ValueError(f"good pool members not in hold pool: {missing}")

    @classmethod
    def from_state(cls, state: ResearchState) -> "PoolState":
        return cls(dict(state.hold), list(state.good))


@dataclass(frozen=True)
class BatchConfig:
    mechanical: int = 6
    hypothesis: int = 6


@dataclass
class RoundReport:
    round: int
    n_proposed: int = 0
    n_rejected: int = 0
    n_evaluated: int = 0
    passed: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)
    agent_errors: list[str] = field(default_factory=list)

    @property
    def n_passed(self) -> int:
        return len(self.passed)

    def to_text(self) -> str:
        lines = [f"round {self.round}: proposed={self.n_proposed} rejected={self.n_rejected} "
                 f"evaluated={self.n_evaluated} passed={self.n_passed} failed={len(self.failed)}"]
        lines += [f"  pass  {n}" for n in self.passed]
        lines += [f"  fail  {n}" for n in self.failed]
        lines += [f"  agent-error {e}" for e in self.agent_errors]
        return "\n".join(lines)


def _rank_passed(state: ResearchState) -> list[CandidateRecord]:
    return sorted(state.passed, key=lambda c: (-c.metrics_train.mean_ic, c.name))


MECHANICAL = (
    ("lag1", lambda e: dsl.Lag(1, e), "holds with a one-day delay"),
    ("ma3", lambda e: dsl.RollMean(3, e), "survives 3-day smoothing"),
    ("csz", lambda e: dsl.CsZscore(e), "survives cross-sectional standardization"),
)


def mechanical_variants(pools: PoolState, state: ResearchState, k: int) -> list[CandidateProposal]:
    """Lag / smoothing / z-score wrappers around the top-k passed factors by train mean IC."""
    ranked = [c for c in _rank_passed(state) if c.name in pools.hold][:k]
    taken = set(state.names)
    out = []
    for base in ranked:
        expr = dsl.parse_recipe(base.recipe_text)
        for suffix, wrap, claim in MECHANICAL:
            name = f"{base.name}__{suffix}"
            if name in taken:
                continue
            taken.add(name)
            out.append(CandidateProposal(
                name=name, hypothesis=f"the signal in {base.name} {claim}",
                rationale=f"robustness check of passed factor {base.name} "
                          f"(train mean IC {base.metrics_train.mean_ic:.4f})",
                candidate_type="mechanical", recipe_text=dsl.canonical_form(wrap(expr)), source="mechanical"))
    return out


def screen(p: CandidateProposal, engine: Engine, taken: set[str]) -> tuple[dsl.Expr | None, list[str]]:
    """Parse and validate a proposal; returns (expr, []) or (None, reasons)."""
    reasons = p.problems()
    if p.name in taken:
        reasons.append(f"duplicate name {p.name!r}")
    if reasons:
        return None, reasons
    try:
        expr = dsl.parse_recipe(p.recipe_text)
    except FactorSearchError as exc:
        return None, [f"syntax: {exc}"]
    rep = dsl.validate(expr, engine.allowed_columns, engine.max_depth)
    if not rep.ok:
        return None, rep.messages()
    return expr, []


def _evaluate(engine: Engine, p: CandidateProposal, expr: dsl.Expr, round_no: int) -> CandidateRecord:
    s = engine.scores(expr)
    train = engine.metrics(s, "train")
    validation = engine.metrics(s, "validation")
    return CandidateRecord(name=p.name, hypothesis=p.hypothesis, rationale=p.rationale,
                           candidate_type=p.candidate_type, recipe_text=dsl.canonical_form(expr),
                           metrics_train=train, metrics_validation=validation,
                           verdict=apply_gate(train, engine.gate), round=round_no)


def run_round(engine: Engine, trace: Trace, agents: Sequence[AgentAdapter],
              batch: BatchConfig = BatchConfig()) -> RoundReport:
    """One discovery round; every record of the round is written in a single append."""
    engine.check_frozen(trace.header)
    state = read_state(trace)
    k = state.last_round + 1
    report = RoundReport(k)
    pools = PoolState.from_state(state)

    errors = []
    proposals = mechanical_variants(pools, state, math.ceil(batch.mechanical / len(MECHANICAL)))
    proposals = proposals[: batch.mechanical]
    for agent in agents:
        try:
            proposals += agent.propose(state, batch.hypothesis, k)
        except Exception as exc:  # adapter failures must not stop the round
            log.warning("agent %s failed: %s", agent.name, exc)
            errors.append({"kind": "agent_error", "round": k, "source": agent.name,
                           "stage": "propose", "message": f"{type(exc).__name__}: {exc}"})
    report.n_proposed = len(proposals)

    rejected, valid = [], []
    taken = set(state.names)
    for i, p in enumerate(proposals):
        expr, reasons = screen(p, engine, taken)
        if expr is None:
            rejected.append({"kind": "rejected", "round": k, "name": p.name or f"unnamed_{i}",
                             "hypothesis": p.hypothesis, "rationale": p.rationale,
                             "candidate_type": p.candidate_type, "recipe_text": p.recipe_text,
                             "source": p.source, "reasons": reasons})
        else:
            taken.add(p.name)
            valid.append((p, expr))
    report.n_rejected = len(rejected)

    if engine.max_workers > 1 and len(valid) > 1:
        with ThreadPoolExecutor(engine.max_workers) as pool:
            records = list(pool.map(lambda pe: _evaluate(engine, pe[0], pe[1], k), valid))
    else:
        records = [_evaluate(engine, p, e, k) for p, e in valid]
    report.n_evaluated = len(records)
    report.passed = [r.name for r in records if r.verdict.passed]
    report.failed = [r.name for r in records if not r.verdict.passed]

    lead = agents[0] if agents else AgentAdapter()
    try:
        notes = lead.interpret(state, records)
        author = lead.name
    except Exception as exc:
        errors.append({"kind": "agent_error", "round": k, "source": lead.name,
                       "stage": "interpret", "message": f"{type(exc).__name__}: {exc}"})
        notes, author = AgentAdapter().interpret(state, records), "engine"
    try:
        text, decision = lead.summarize(state, records, k)
    except Exception as exc:
        errors.append({"kind": "agent_error", "round": k, "source": lead.name,
                       "stage": "summarize", "message": f"{type(exc).__name__}: {exc}"})
        text, decision = AgentAdapter().summarize(state, records, k)
    report.agent_errors = [e["message"] for e in errors]

    first_seq = trace.head_seq + 1 + len(errors) + len(rejected)
    amendments = [{"kind": "amendment", "round": k, "ref_seq": first_seq + j, "ref_name": r.name,
                   "author": author, "interpretation": notes.get(r.name, "")}
                  for j, r in enumerate(records)]
    summary = RoundSummary(k, text, decision, {"hold": report.passed},
                           {"proposed": report.n_proposed, "rejected": report.n_rejected,
                            "evaluated": report.n_evaluated, "passed": report.n_passed})
    batch_records = [*errors, *rejected, *records, *amendments, summary]
    try:
        trace.append_many(batch_records)
    except OSError as exc:
        try:
            trace.append({"kind": "round_abort", "round": k, "reason": f"{type(exc).__name__}: {exc}"})
        except OSError:
            log.error("could not write round-abort marker for round %d", k)
        raise
    return report


def pooled_corr(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation over jointly non-missing cells; nan when undefined."""
    joint = ~np.isnan(a) & ~np.isnan(b)
    if joint.sum() < 3:
        return math.nan
    x, y = a[joint], b[joint]
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    return float((dx * dy).sum() / den) if den > 0 else math.nan


def curate_good_pool(pools: PoolState, state: ResearchState, scores: Mapping[str, np.ndarray],
                     corr_threshold: float = 0.7, max_size: int = 10) -> tuple[PoolState, dict]:
    """Greedy redundancy filter over the hold pool.

    Candidates are visited by train mean IC (descending, ties by name) and
    admitted when their |correlation| with every admitted factor is below the
    threshold. ``scores`` holds per-date standardized train-window matrices.
    Pairs with no overlapping cells count as uncorrelated.
    """
    if not pools.hold:
        raise ValueError("hold pool is empty")
    ic = {c.name: c.metrics_train.mean_ic for c in state.candidates}
    order = sorted(pools.hold, key=lambda n: (-ic.get(n, -math.inf), n))
    admitted: list[str] = []
    redundant: dict[str, list] = {}
    for name in order:
        if len(admitted) >= max_size:
            break
        clash = None
        for other in admitted:
            r = pooled_corr(scores[name], scores[other])
            if not math.isnan(r) and abs(r) >= corr_threshold:
                clash = [other, round(r, 6)]
                break
        if clash is None:
            admitted.append(name)
        else:
            redundant[name] = clash
    return PoolState(dict(pools.hold), admitted), redundant


def standardized_train_scores(engine: Engine, recipes: Mapping[str, str]) -> dict[str, np.ndarray]:
    idx = engine.partitions.train
    return {name: dsl.cs_zscore(engine.scores(dsl.parse_recipe(text))[:, idx]) for name, text in recipes.items()}


def curate(engine: Engine, trace: Trace, corr_threshold: float = 0.7, max_size: int = 10) -> PoolState:
    """Curate from the trace's hold pool and append the decision as a curation record."""
    engine.check_frozen(trace.header)
    state = read_state(trace)
    pools = PoolState.from_state(state)
    scores = standardized_train_scores(engine, pools.hold)
    new, redundant = curate_good_pool(pools, state, scores, corr_threshold, max_size)
    trace.append(RoundSummary(
        state.last_round,
        f"curated {len(new.good)} of {len(pools.hold)} hold-pool factors "
        f"(|corr| < {corr_threshold}, max {max_size})",
        "fit the combination model on the good pool",
        {"good": new.good, "redundant": redundant}, {"hold": len(pools.hold), "good": len(new.good)},
        kind="curation"))
    return new
