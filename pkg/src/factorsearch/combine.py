"""Ridge aggregation of curated factors, fit on training rows only."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dsl import cs_zscore
from .errors import InsufficientDataError


def standardize_by_date(scores: np.ndarray) -> np.ndarray:
    """Per-date (x - mean) / sample std; missing with < 2 names or zero spread."""
    return cs_zscore(np.asarray(scores, dtype=float))


@dataclass(frozen=True)
class FactorMatrix:
    names: tuple[str, ...]
    values: np.ndarray  # (q, assets, dates), standardized per date

    @classmethod
    def from_scores(cls, scores: Mapping[str, np.ndarray], names: Sequence[str] | None = None) -> "FactorMatrix":
        names = tuple(names if names is not None else scores)
        return cls(names, np.stack([standardize_by_date(scores[n]) for n in names]))

    def rows(self, date_idx: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Complete-case (S, r) rows for the given dates, ordered by (asset, date)."""
        S = self.values[:, :, date_idx].reshape(len(self.names), -1).T
        r = targets[:, date_idx].reshape(-1)
        ok = ~np.isnan(S).any(axis=1) & ~np.isnan(r)
        return S[ok], r[ok]


@dataclass
class RidgeModel:
    beta: np.ndarray
    lam: float
    factor_names: tuple[str, ...]
    fit_window: tuple[str, str] = ("", "")
    n_rows: int = 0
    recipes: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "factor_names": list(self.factor_names), "beta": [float(b) for b in self.beta],
            "lambda": self.lam, "fit_window": list(self.fit_window), "n_rows": self.n_rows,
            "recipes": self.recipes, "provenance": self.provenance,
        }, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RidgeModel":
        d = json.loads(text)
        return cls(np.array(d["beta"], dtype=float), float(d["lambda"]), tuple(d["factor_names"]),
                   tuple(d["fit_window"]), int(d["n_rows"]), d.get("recipes", {}), d.get("provenance", {}))


def ridge_solve(S: np.ndarray, r: np.ndarray, lam: float) -> np.ndarray:
    """Solve (S'S + lam I) beta = S'r."""
    q = S.shape[1]
    A = S.T @ S + lam * np.eye(q)
    if lam == 0 and np.linalg.matrix_rank(A) < q:
        raise np.linalg.LinAlgError("singular normal equations at lambda = 0; use lambda > 0")
    return np.linalg.solve(A, S.T @ r)


def fit_ridge(F: FactorMatrix, targets: np.ndarray, lam: float, train_idx: np.ndarray,
              fit_window: tuple[str, str] = ("", "")) -> RidgeModel:
    """Pooled ridge fit without intercept on complete train rows."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    S, r = F.rows(np.asarray(train_idx), targets)
    q = len(F.names)
    if S.shape[0] < q + 1:
        raise InsufficientDataError(f"need >= {q + 1} complete train rows, got {S.shape[0]}")
    beta = ridge_solve(S, r, lam)
    if not np.all(np.isfinite(beta)):
        raise np.linalg.LinAlgError("non-finite ridge solution")
    return RidgeModel(beta, float(lam), F.names, tuple(fit_window), int(S.shape[0]))


def composite_score(model: RidgeModel, F: FactorMatrix) -> np.ndarray:
    """Sum of beta_k * factor_k; missing wherever any factor is missing."""
    if tuple(model.factor_names) != tuple(F.names):
        raise ValueError(f"factor order mismatch: model {model.factor_names} vs matrix {F.names}")
    out = model.beta[0] * F.values[0]
    for k in range(1, len(F.names)):
        out = out + model.beta[k] * F.values[k]
    return out
