"""Append-only, hash-chained experiment trace.

File layout: one JSON object per line, UTF-8, ASCII-escaped, keys sorted, no
insignificant whitespace. Line 1 is a header that freezes the protocol (gate,
split, config digest, seed). Every later line carries ``seq``, ``prev_hash``
and ``hash``, where ``hash`` is the SHA-256 of the line's canonical form with
the ``hash`` key removed. Verification also requires each line to be byte-equal
to its own canonical re-serialization, so no byte can change silently.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from .errors import DuplicateNameError, TraceIntegrityError
from .evaluation import EvalMetrics, GateConfig, Verdict

TRACE_VERSION = 1
HASH_ALG = "sha256"
GENESIS = "0" * 64
HEADER_SEQ = -1

KINDS = {"candidate", "rejected", "amendment", "round_summary", "curation", "round_abort", "agent_error"}
CANDIDATE_TYPES = ("mechanical", "hypothesis")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _sealed(body: dict) -> dict:
    out = dict(body)
    out.pop("hash", None)
    out["hash"] = digest(out)
    return out


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def fixed_clock(stamp: str) -> Callable[[], str]:
    return lambda: stamp


@dataclass
class CandidateRecord:
    name: str
    hypothesis: str
    rationale: str
    candidate_type: str
    recipe_text: str
    metrics_train: EvalMetrics
    verdict: Verdict
    round: int
    metrics_validation: EvalMetrics | None = None
    interpretation: str = ""
    timestamp: str | None = None
    seq: int | None = None
    prev_hash: str | None = None
    hash: str | None = None

    def __post_init__(self):
        for f in ("name", "hypothesis", "rationale", "candidate_type", "recipe_text"):
            if not str(getattr(self, f)).strip():
                raise ValueError(f"candidate field {f!r} must be non-empty")
        if self.candidate_type not in CANDIDATE_TYPES:
            raise ValueError(f"candidate_type must be one of {CANDIDATE_TYPES}")

    def to_body(self) -> dict:
        body = {
            "kind": "candidate", "round": self.round, "name": self.name,
            "hypothesis": self.hypothesis, "rationale": self.rationale,
            "candidate_type": self.candidate_type, "recipe_text": self.recipe_text,
            "metrics_train": self.metrics_train.to_dict(),
            "metrics_validation": None if self.metrics_validation is None else self.metrics_validation.to_dict(),
            "verdict": self.verdict.to_dict(), "interpretation": self.interpretation,
        }
        for k in ("timestamp", "seq", "prev_hash"):
            if getattr(self, k) is not None:
                body[k] = getattr(self, k)
        return body

    @classmethod
    def from_record(cls, d: dict) -> "CandidateRecord":
        mv = d.get("metrics_validation")
        return cls(name=d["name"], hypothesis=d["hypothesis"], rationale=d["rationale"],
                   candidate_type=d["candidate_type"], recipe_text=d["recipe_text"],
                   metrics_train=EvalMetrics.from_dict(d["metrics_train"]),
                   verdict=Verdict.from_dict(d["verdict"]), round=int(d["round"]),
                   metrics_validation=None if mv is None else EvalMetrics.from_dict(mv),
                   interpretation=d.get("interpretation", ""), timestamp=d.get("timestamp"),
                   seq=d.get("seq"), prev_hash=d.get("prev_hash"), hash=d.get("hash"))


@dataclass
class RoundSummary:
    round: int
    text: str
    decision: str
    pool_delta: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    kind: str = "round_summary"

    def to_body(self) -> dict:
        return {"kind": self.kind, "round": self.round, "text": self.text, "decision": self.decision,
                "pool_delta": self.pool_delta, "counts": self.counts}

    @classmethod
    def from_record(cls, d: dict) -> "RoundSummary":
        return cls(int(d["round"]), d["text"], d["decision"], d.get("pool_delta", {}),
                   d.get("counts", {}), d["kind"])


@dataclass
class IntegrityReport:
    ok: bool
    n_records: int
    first_bad_seq: int | None = None
    message: str = ""
    truncated_tail: bool = False
    head_hash: str = GENESIS


def make_header(*, gate: GateConfig, split, config_digest: str = "", seed: int | None = None,
                created: str | None = None, extra: dict | None = None) -> dict:
    split_d = split.to_dict() if hasattr(split, "to_dict") else dict(split)
    body = {"kind": "header", "version": TRACE_VERSION, "hash_alg": HASH_ALG,
            "gate": gate.to_dict(), "split": split_d, "config_digest": config_digest,
            "seed": seed, "created": created or utc_now()}
    if extra:
        body["extra"] = extra
    return _sealed(body)


def _check_line(raw: bytes, expect_seq: int, prev_hash: str) -> tuple[dict | None, str]:
    if not raw.endswith(b"\n"):
        return None, "truncated line"
    try:
        text = raw[:-1].decode("utf-8")
        rec = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return None, f"unparseable record: {exc}"
    if not isinstance(rec, dict):
        return None, "record is not an object"
    if canonical_json(rec) != text:
        return None, "non-canonical bytes"
    if rec.get("hash") != digest({k: v for k, v in rec.items() if k != "hash"}):
        return None, "hash mismatch"
    if expect_seq == HEADER_SEQ:
        if rec.get("kind") != "header" or rec.get("hash_alg") != HASH_ALG:
            return None, "bad header"
        return rec, ""
    if rec.get("seq") != expect_seq:
        return None, f"seq {rec.get('seq')!r} != expected {expect_seq}"
    if rec.get("prev_hash") != prev_hash:
        return None, "prev_hash does not chain"
    if rec.get("kind") not in KINDS:
        return None, f"unknown kind {rec.get('kind')!r}"
    return rec, ""


def _scan(data: bytes):
    """Yield (seq, record-or-None, message) until the first bad line."""
    parts = data.split(b"\n")
    lines = [p + b"\n" for p in parts[:-1]] + ([parts[-1]] if parts[-1] else [])
    prev = GENESIS
    for i, raw in enumerate(lines):
        seq = i - 1
        rec, msg = _check_line(raw, seq, prev)
        yield seq, rec, msg
        if rec is None:
            return
        if seq >= 0:
            prev = rec["hash"]


def verify_integrity(path) -> IntegrityReport:
    """Recompute the chain; report the first record that fails (header = -1)."""
    data = Path(path).read_bytes()
    if not data:
        return IntegrityReport(False, 0, HEADER_SEQ, "empty trace (no header)")
    n_ok, head = 0, GENESIS
    for seq, rec, msg in _scan(data):
        if rec is None:
            truncated = seq == data.count(b"\n") - 1 and not data.endswith(b"\n")
            return IntegrityReport(False, n_ok, seq, msg, truncated_tail=truncated, head_hash=head)
        if seq >= 0:
            n_ok += 1
            head = rec["hash"]
    return IntegrityReport(True, n_ok, head_hash=head)


def repair_truncated_tail(path) -> int:
    """Drop a partially written final line; returns bytes removed."""
    path = Path(path)
    rep = verify_integrity(path)
    if rep.ok or not rep.truncated_tail:
        return 0
    data = path.read_bytes()
    cut = data.rfind(b"\n") + 1
    with open(path, "r+b") as fh:
        fh.truncate(cut)
    return len(data) - cut


class Trace:
    """Single-writer handle on a trace file."""

    def __init__(self, path, header: dict, records: list[dict], clock: Callable[[], str] | None = None):
        self.path = Path(path)
        self.header = header
        self.records = records
        self.clock = clock or utc_now
        self._names = {r["name"] for r in records if r["kind"] == "candidate"}

    @classmethod
    def create(cls, path, *, gate: GateConfig, split, config_digest: str = "", seed: int | None = None,
               clock: Callable[[], str] | None = None, extra: dict | None = None) -> "Trace":
        path = Path(path)
        if path.exists() and path.stat().st_size > 0:
            raise FileExistsError(f"trace already exists: {path}")
        clock = clock or utc_now
        header = make_header(gate=gate, split=split, config_digest=config_digest, seed=seed,
                             created=clock(), extra=extra)
        with open(path, "wb") as fh:
            fh.write((canonical_json(header) + "\n").encode("utf-8"))
            fh.flush()
            os.fsync(fh.fileno())
        return cls(path, header, [], clock)

    @classmethod
    def open(cls, path, clock: Callable[[], str] | None = None) -> "Trace":
        path = Path(path)
        rep = verify_integrity(path)
        if not rep.ok:
            raise TraceIntegrityError(f"trace integrity failure at seq {rep.first_bad_seq}: {rep.message}",
                                      rep.first_bad_seq)
        header, records = None, []
        for seq, rec, _ in _scan(path.read_bytes()):
            if seq == HEADER_SEQ:
                header = rec
            else:
                records.append(rec)
        return cls(path, header, records, clock)

    @property
    def head_seq(self) -> int:
        return len(self.records) - 1

    @property
    def head_hash(self) -> str:
        return self.records[-1]["hash"] if self.records else GENESIS

    @property
    def gate(self) -> GateConfig:
        return GateConfig(**self.header["gate"])

    def _seal(self, record, seq: int, prev: str, batch_names: set) -> dict:
        body = record.to_body() if hasattr(record, "to_body") else dict(record)
        body.pop("hash", None)
        if body.get("kind") not in KINDS:
            raise ValueError(f"unknown record kind {body.get('kind')!r}")
        if "prev_hash" in body and body["prev_hash"] != prev:
            raise TraceIntegrityError("stale prev_hash: record does not extend the current head", seq)
        if "seq" in body and body["seq"] != seq:
            raise TraceIntegrityError(f"seq {body['seq']} does not follow head {seq - 1}", seq)
        if body["kind"] == "candidate":
            if body["name"] in self._names or body["name"] in batch_names:
                raise DuplicateNameError(f"duplicate candidate name {body['name']!r}")
            batch_names.add(body["name"])
        body["seq"], body["prev_hash"] = seq, prev
        body.setdefault("timestamp", self.clock())
        return _sealed(body)

    def append(self, record) -> int:
        return self.append_many([record])[0]

    def append_many(self, records: Iterable) -> list[int]:
        """Seal and write records as one unit; on write failure the file is rolled back."""
        sealed, names = [], set()
        seq, prev = self.head_seq + 1, self.head_hash
        for r in records:
            rec = self._seal(r, seq, prev, names)
            sealed.append(rec)
            seq, prev = seq + 1, rec["hash"]
        if not sealed:
            return []
        payload = "".join(canonical_json(r) + "\n" for r in sealed).encode("utf-8")
        size = self.path.stat().st_size
        try:
            self._write(payload)
        except BaseException:
            with open(self.path, "r+b") as fh:
                fh.truncate(size)
            raise
        self.records.extend(sealed)
        self._names |= names
        return [r["seq"] for r in sealed]

    def _write(self, payload: bytes) -> None:
        with open(self.path, "ab") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())


@dataclass
class ResearchState:
    header: dict
    candidates: list[CandidateRecord]
    rejected: list[dict]
    summaries: list[RoundSummary]
    amendments: list[dict]
    hold: dict[str, str]
    good: list[str]
    last_round: int
    head_seq: int

    @property
    def names(self) -> set[str]:
        return {c.name for c in self.candidates}

    @property
    def passed(self) -> list[CandidateRecord]:
        return [c for c in self.candidates if c.verdict.passed]

    @property
    def failed(self) -> list[CandidateRecord]:
        return [c for c in self.candidates if not c.verdict.passed]

    def by_name(self, name: str) -> CandidateRecord:
        for c in self.candidates:
            if c.name == name:
                return c
        raise KeyError(name)

    def near_threshold(self, gate: GateConfig, margin: float = 0.5) -> list[CandidateRecord]:
        """Failed candidates whose t-stat came within ``margin`` of the threshold with the right sign."""
        return [c for c in self.failed
                if c.metrics_train.mean_ic > 0 and c.metrics_train.ic_tstat >= gate.tau_t - margin]


def read_state(trace: Trace | str | os.PathLike) -> ResearchState:
    if not isinstance(trace, Trace):
        trace = Trace.open(trace)
    candidates: list[CandidateRecord] = []
    by_seq: dict[int, CandidateRecord] = {}
    rejected, summaries, amendments = [], [], []
    good: list[str] = []
    last_round = 0
    for rec in trace.records:
        kind = rec["kind"]
        if "round" in rec:
            last_round = max(last_round, int(rec["round"]))
        if kind == "candidate":
            c = CandidateRecord.from_record(rec)
            candidates.append(c)
            by_seq[c.seq] = c
        elif kind == "rejected":
            rejected.append(rec)
        elif kind == "amendment":
            amendments.append(rec)
            if rec["ref_seq"] in by_seq:
                by_seq[rec["ref_seq"]].interpretation = rec["interpretation"]
        elif kind in ("round_summary", "curation"):
            s = RoundSummary.from_record(rec)
            summaries.append(s)
            if kind == "curation":
                good = list(s.pool_delta.get("good", []))
    hold = {c.name: c.recipe_text for c in candidates if c.verdict.passed}
    return ResearchState(trace.header, candidates, rejected, summaries, amendments, hold, good,
                         last_round, trace.head_seq)
