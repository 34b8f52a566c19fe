"""Proposal sources for the search loop.

An agent reads the research state and returns candidate proposals; it may
also write interpretations and a round summary. Agents never see or change
the gate, the splits, or the evaluation code.
"""
from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import AgentError
from .trace import CANDIDATE_TYPES, CandidateRecord, ResearchState

log = logging.getLogger(__name__)

PROPOSAL_FIELDS = ("name", "hypothesis", "rationale", "candidate_type", "recipe_text")


@dataclass(frozen=True)
class CandidateProposal:
    name: str
    hypothesis: str
    rationale: str
    candidate_type: str
    recipe_text: str
    source: str = ""
    defect: str = ""

    def problems(self) -> list[str]:
        out = [f"missing field: {f}" for f in PROPOSAL_FIELDS if not str(getattr(self, f)).strip()]
        if self.candidate_type and self.candidate_type not in CANDIDATE_TYPES:
            out.append(f"invalid candidate_type {self.candidate_type!r}")
        if self.defect:
            out.append(self.defect)
        return out


def describe_metrics(c: CandidateRecord) -> str:
    m = c.metrics_train
    verdict = "passed" if c.verdict.passed else "failed (" + ", ".join(c.verdict.reasons) + ")"
    return (f"{verdict}: mean IC {m.mean_ic:.4f}, t {m.ic_tstat:.2f}, "
            f"L-S Sharpe {m.ls_sharpe:.2f}, coverage {m.coverage:.2f} over {m.n_days} days")


class AgentAdapter:
    name = "agent"

    def propose(self, state: ResearchState, n: int, round_no: int) -> list[CandidateProposal]:
        raise NotImplementedError

    def interpret(self, state: ResearchState, records: Sequence[CandidateRecord]) -> dict[str, str]:
        out = {}
        for c in records:
            m = c.metrics_train
            if c.verdict.passed:
                note = "supports the stated mechanism on the training window"
            elif m.mean_ic < 0:
                note = "sign is opposite to the hypothesis; treat as negative evidence"
            else:
                note = "direction agrees but evidence is too weak to pass"
            out[c.name] = f"{describe_metrics(c)}; {note}."
        return out

    def summarize(self, state: ResearchState, records: Sequence[CandidateRecord],
                  round_no: int) -> tuple[str, str]:
        passed = [c for c in records if c.verdict.passed]
        text = f"round {round_no}: {len(passed)} of {len(records)} evaluated candidates passed"
        if passed:
            best = max(passed, key=lambda c: (c.metrics_train.mean_ic, c.name))
            text += f"; strongest {best.name} (mean IC {best.metrics_train.mean_ic:.4f})"
            decision = f"exploit the mechanism behind {best.name} and test neighbouring variants"
        else:
            decision = "no confirmations; broaden exploration to untested columns"
        return text, decision


# -- stub agent ----------------------------------------------------------------

_WINDOWS = (3, 5, 10, 20)
_LAGS = (1, 2, 5)


def _w(x: float) -> str:
    return repr(round(float(x), 2))


class StubAgent(AgentAdapter):
    """Seeded template sampler over the DSL grammar.

    ``focus_columns`` are drawn with probability ``focus_prob``; other columns
    come uniformly from ``columns``. Columns used by already-passed factors are
    re-drawn with probability ``exploit_prob`` so the proposals follow evidence.
    """

    name = "stub"

    def __init__(self, seed: int, columns: Sequence[str], focus_columns: Sequence[str] = (),
                 focus_prob: float = 0.5, exploit_prob: float = 0.25):
        self.seed = int(seed)
        self.columns = sorted(columns)
        self.focus = sorted(focus_columns)
        self.focus_prob = focus_prob
        self.exploit_prob = exploit_prob

    def _column(self, rng, exploit: list[str]) -> str:
        u = rng.random()
        if self.focus and u < self.focus_prob:
            return str(rng.choice(self.focus))
        if exploit and u < self.focus_prob + self.exploit_prob:
            return str(rng.choice(exploit))
        return str(rng.choice(self.columns))

    def _template(self, rng, exploit):
        c1 = self._column(rng, exploit)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        direction = "higher" if sign > 0 else "lower"
        kind = int(rng.integers(0, 8))
        w = int(rng.choice(_WINDOWS))
        if kind == 0:
            slug = f"ma{w}_{c1}"
            text = f"cs_rank(lincomb({_w(sign)}, roll_mean({w}, col({c1}))))"
            hyp = f"assets with {direction} {w}-day average {c1} earn higher next-period returns"
        elif kind == 1:
            slug = f"z_{c1}"
            text = f"cs_rank(lincomb({_w(sign)}, clip(-3.0, 3.0, cs_zscore(col({c1})))))"
            hyp = f"{direction} cross-sectional {c1} (winsorized) predicts higher returns"
        elif kind == 2:
            n = int(rng.choice(_LAGS))
            slug = f"chg{n}_{c1}"
            text = f"cs_rank(lincomb({_w(sign)}, pct_change({n}, col({c1}))))"
            hyp = f"a {direction} {n}-day change in {c1} predicts higher returns"
        elif kind == 3:
            slug = f"vol{w}_{c1}"
            text = f"cs_zscore(lincomb({_w(sign)}, roll_std({w}, col({c1}))))"
            hyp = f"{direction} {w}-day variability of {c1} predicts higher returns"
        elif kind == 4:
            n = int(rng.choice(_LAGS))
            slug = f"lag{n}_{c1}"
            text = f"cs_rank(lag({n}, lincomb({_w(sign)}, col({c1}))))"
            hyp = f"{direction} {c1} from {n} days ago still predicts higher returns"
        elif kind == 5:
            slug = f"diff{w}_{c1}"
            text = f"cs_rank(lincomb({_w(sign)}, diff({w}, col({c1}))))"
            hyp = f"a {direction} {w}-day difference in {c1} predicts higher returns"
        elif kind == 6:
            slug = f"abs_{c1}"
            text = f"cs_rank(lincomb({_w(sign)}, abs(col({c1}))))"
            hyp = f"{direction} magnitude of {c1} predicts higher returns"
        else:
            c2, c3 = self._column(rng, exploit), self._column(rng, exploit)
            a, b, c = (rng.uniform(0.1, 1.0) * (1 if rng.random() < 0.5 else -1) for _ in range(3))
            m = int(rng.choice(_WINDOWS[:2]))
            slug = f"mix_{c1}_{c2}_{c3}"
            text = (f"cs_rank(lincomb({_w(a)}, log1p(abs(col({c1}))), {_w(b)}, roll_mean({w}, col({c2})), "
                    f"{_w(c)}, roll_mean({m}, col({c3}))))")
            hyp = f"a blend of scaled {c1}, smoothed {c2} and short-run {c3} ranks future returns"
        return slug, text, hyp

    def propose(self, state: ResearchState, n: int, round_no: int) -> list[CandidateProposal]:
        rng = np.random.default_rng([self.seed, round_no])
        exploit = sorted({m for name in state.hold for m in re.findall(r"col\((\w+)\)", state.hold[name])})
        taken = set(state.names)
        out = []
        for j in range(n):
            slug, text, hyp = self._template(rng, exploit)
            name = f"h{round_no}_{j}_{slug}"
            while name in taken:
                name += "_b"
            taken.add(name)
            basis = ("prior passes used " + ", ".join(exploit)) if exploit else "no confirmed mechanism yet"
            out.append(CandidateProposal(
                name=name, hypothesis=hyp,
                rationale=f"template draw; {basis}; {len(state.failed)} failures on record",
                candidate_type="hypothesis", recipe_text=text, source=self.name))
        return out


# -- remote chat-completion agent ------------------------------------------------

SYSTEM_PROMPT = """You are a quantitative researcher searching for cross-sectional return factors.
You can only act by proposing recipes in the factor DSL below. You cannot change the data
splits, the evaluation metrics, or the selection gate.

DSL operators: col(name), cs_rank(e), cs_zscore(e), lag(n, e), roll_mean(w, e), roll_std(w, e),
diff(n, e), pct_change(n, e), log1p(e), abs(e), clip(lo, hi, e), lincomb(w1, e1, w2, e2, ...).
Each recipe must contain at least one time-series or nonlinear operator.

Reply with one block per candidate, exactly in this form:
### CANDIDATE
name: <unique identifier>
hypothesis: <falsifiable statement>
rationale: <link to evidence or market structure>
type: hypothesis
recipe: <DSL expression>
"""

_BLOCK_KEYS = {"name": "name", "hypothesis": "hypothesis", "rationale": "rationale",
               "type": "candidate_type", "recipe": "recipe_text"}


def render_state(state: ResearchState, allowed_columns: Sequence[str], n: int, round_no: int) -> str:
    lines = [f"Round {round_no}. Approved columns: {', '.join(sorted(allowed_columns))}.", ""]
    if state.candidates:
        lines.append("Previous candidates:")
        for c in state.candidates:
            lines.append(f"- {c.name} [{c.candidate_type}] {c.recipe_text} -> {describe_metrics(c)}")
            if c.interpretation:
                lines.append(f"  interpretation: {c.interpretation}")
    for s in state.summaries:
        lines.append(f"Summary r{s.round}: {s.text}. Next: {s.decision}")
    lines += ["", f"Hold pool: {', '.join(state.hold) or '(empty)'}",
              f"Good pool: {', '.join(state.good) or '(empty)'}", "",
              f"Propose {n} new candidates with names not used above."]
    return "\n".join(lines)


def parse_reply(text: str, source: str = "remote") -> list[CandidateProposal]:
    """Split a reply into proposal blocks; malformed blocks carry a defect, never a repair."""
    chunks = re.split(r"^\s*###\s*CANDIDATE\s*$", text, flags=re.MULTILINE)[1:]
    out = []
    for i, chunk in enumerate(chunks):
        fields: dict[str, str] = {}
        defects = []
        current = None
        for raw in chunk.strip().splitlines():
            m = re.match(r"^\s*([A-Za-z_]+)\s*:\s*(.*)$", raw)
            if m and m.group(1).lower() in _BLOCK_KEYS:
                current = _BLOCK_KEYS[m.group(1).lower()]
                if current in fields:
                    defects.append(f"repeated key {m.group(1)!r}")
                fields[current] = m.group(2).strip()
            elif current is not None and raw.strip():
                fields[current] += " " + raw.strip()
            elif raw.strip():
                defects.append(f"unrecognized line {raw.strip()[:40]!r}")
        name = fields.get("name", "")
        if not name:
            defects.append("missing field: name")
            name = f"unnamed_block_{i}"
        out.append(CandidateProposal(
            name=name, hypothesis=fields.get("hypothesis", ""), rationale=fields.get("rationale", ""),
            candidate_type=fields.get("candidate_type", ""), recipe_text=fields.get("recipe_text", ""),
            source=source, defect="; ".join(defects)))
    return out


class RemoteAgent(AgentAdapter):
    """Chat-completion HTTP client (OpenAI-compatible request/response bodies)."""

    name = "remote"

    def __init__(self, endpoint: str, model: str, allowed_columns: Sequence[str],
                 api_key_env: str = "FACTORSEARCH_API_KEY", timeout: float = 60.0, retries: int = 1,
                 log_path: str | os.PathLike | None = None,
                 transport: Callable[[urllib.request.Request, float], bytes] | None = None):
        self.endpoint = endpoint
        self.model = model
        self.allowed_columns = list(allowed_columns)
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retries = retries
        self.log_path = Path(log_path) if log_path else None
        self.transport = transport or self._urlopen

    @staticmethod
    def _urlopen(req: urllib.request.Request, timeout: float) -> bytes:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read()

    def _log(self, entry: dict) -> None:
        if self.log_path is None:
            return
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def complete(self, user: str) -> str:
        key = os.environ.get(self.api_key_env, "")
        body = {"model": self.model, "temperature": 0,
                "messages": [{"role": "system", "content": SYSTEM_PROMPT},
                             {"role": "user", "content": user}]}
        data = json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_exc = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.endpoint, data=data, headers=headers, method="POST")
            entry = {"endpoint": self.endpoint, "attempt": attempt, "request": body,
                     "headers": {k: ("Bearer ***" if k == "Authorization" else v) for k, v in headers.items()}}
            try:
                raw = self.transport(req, self.timeout)
                reply = json.loads(raw)
                content = reply["choices"][0]["message"]["content"]
            except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError, IndexError) as exc:
                last_exc = exc
                entry["error"] = f"{type(exc).__name__}: {exc}"
                self._log(entry)
                log.warning("remote agent attempt %d failed: %s", attempt, exc)
                if attempt < self.retries:
                    time.sleep(0.1)
                continue
            entry["response"] = reply
            self._log(entry)
            return content
        raise AgentError(f"remote agent failed after {self.retries + 1} attempt(s): {last_exc}")

    def propose(self, state: ResearchState, n: int, round_no: int) -> list[CandidateProposal]:
        reply = self.complete(render_state(state, self.allowed_columns, n, round_no))
        return parse_reply(reply, self.name)

    def interpret(self, state: ResearchState, records: Sequence[CandidateRecord]) -> dict[str, str]:
        if not records:
            return {}
        prompt = ["Interpret each result in one or two sentences. Reply with one block per candidate:",
                  "### INTERPRETATION", "name: <name>", "text: <interpretation>", ""]
        prompt += [f"- {c.name}: {c.hypothesis} | {c.recipe_text} -> {describe_metrics(c)}" for c in records]
        reply = self.complete("\n".join(prompt))
        out = {}
        for chunk in re.split(r"^\s*###\s*INTERPRETATION\s*$", reply, flags=re.MULTILINE)[1:]:
            name = re.search(r"^\s*name\s*:\s*(.+)$", chunk, re.MULTILINE)
            text = re.search(r"^\s*text\s*:\s*(.+)$", chunk, re.MULTILINE | re.DOTALL)
            if name and text:
                out[name.group(1).strip()] = " ".join(text.group(1).split())
        fallback = super().interpret(state, records)
        return {c.name: out.get(c.name, fallback[c.name]) for c in records}


def make_agent(kind: str, **kw) -> AgentAdapter:
    if kind == "stub":
        return StubAgent(kw["seed"], kw["columns"], kw.get("focus_columns", ()),
                         kw.get("focus_prob", 0.5), kw.get("exploit_prob", 0.25))
    if kind == "remote":
        return RemoteAgent(kw["endpoint"], kw["model"], kw["columns"], kw.get("api_key_env", "FACTORSEARCH_API_KEY"),
                           kw.get("timeout", 60.0), kw.get("retries", 1), kw.get("log_path"))
    raise ValueError(f"unknown agent kind {kind!r}")
