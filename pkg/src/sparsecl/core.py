"""Domain types and empirical score summaries shared by all modules.

A model contributes ``m`` partial scores ``u_1, ..., u_m`` (each a p-vector
per observation). The empirical score Gram matrix

    G_jk = (1/n) sum_i u_j(x_i)^T u_k(x_i)

and its diagonal ``b`` are the entire input of the truncation solver; the
per-observation scores themselves are kept around because the one-step
update and the variability matrix need observation-level quantities.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

MAX_GRAM_DIM = 5000  # dense Gram storage only; desk-scale target


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class SparseClError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SparseClError):
    """Inconsistent dimensions or invalid options."""


class EvaluationError(SparseClError):
    """A score evaluation produced a non-finite value."""


class ModelError(SparseClError):
    """Unsupported model family, bad covariance, or domain violation."""


class SingularityError(SparseClError):
    """A matrix that must be invertible is (numerically) singular."""


class ConvergenceError(SparseClError):
    """An iterative solver exhausted its budget."""


class PathError(SparseClError):
    """The homotopy path exceeded its event budget (cycling guard)."""


class EstimationError(SparseClError):
    """Parameter estimation failed (singular Jacobian, divergence, ...)."""


class DegenerateRuleError(SparseClError):
    """A composition rule with no effective weight where one is required."""


class DegenerateInputError(SparseClError):
    """Structurally degenerate input (e.g. zero-trace Gram)."""


class ExperimentError(SparseClError):
    """A Monte Carlo experiment failed its validity checks."""


# ---------------------------------------------------------------------------
# Formatting helpers (shared CSV conventions: '.' decimal, 17 significant digits)
# ---------------------------------------------------------------------------

def fmt_float(x) -> str:
    return format(float(x), ".17g")


def write_csv(path, header: Sequence[str], rows) -> None:
    """Write rows of already-formatted strings/numbers; floats get 17 digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([c if isinstance(c, str) else fmt_float(c)
                             if isinstance(c, float) else str(c) for c in row])


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """A family of ``m`` partial scores for a p-dimensional parameter.

    Parameters
    ----------
    p : int
        Parameter dimension.
    m : int
        Number of partial scores (sub-likelihood components).
    score_eval : callable
        ``score_eval(theta, row) -> (m, p)`` array of partial scores for a
        single observation ``row``.
    deriv_eval : callable, optional
        ``deriv_eval(theta, row) -> (m, p, p)`` stacked score derivatives.
        When absent, derivatives fall back to central finite differences
        with step ``max(1e-6, 1e-6 * |theta_k|)`` per coordinate.
    labels : sequence of str, optional
        Human-readable sub-likelihood names (defaults to ``u1..um``).
    penalty_weights : array, optional
        Positive per-score penalty constants alpha_j (default all 1).
    batch_score_eval : callable, optional
        ``batch_score_eval(theta, values, cols=None) -> (n, k, p)`` vectorized
        scores for all rows at once, restricted to the column subset ``cols``
        when given. Purely a fast path; must agree with ``score_eval``.
    batch_mean_deriv : callable, optional
        ``batch_mean_deriv(theta, values, cols=None) -> (k, p, p)`` mean score
        derivatives over rows. Fast path analogue of ``deriv_eval``.
    data_dim : int, optional
        Expected number of data columns; checked when set.
    """

    p: int
    m: int
    score_eval: Callable
    deriv_eval: Optional[Callable] = None
    labels: Optional[Sequence[str]] = None
    penalty_weights: Optional[np.ndarray] = None
    batch_score_eval: Optional[Callable] = None
    batch_mean_deriv: Optional[Callable] = None
    data_dim: Optional[int] = None

    def __post_init__(self):
        if self.p < 1 or self.m < 1:
            raise ConfigurationError(f"require p >= 1 and m >= 1, got p={self.p}, m={self.m}")
        if self.labels is None:
            object.__setattr__(self, "labels", tuple(f"u{j + 1}" for j in range(self.m)))
        else:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != self.m:
                raise ConfigurationError(f"expected {self.m} labels, got {len(labels)}")
            object.__setattr__(self, "labels", labels)
        if self.penalty_weights is None:
            alpha = np.ones(self.m)
        else:
            alpha = np.asarray(self.penalty_weights, dtype=float).copy()
        if alpha.shape != (self.m,):
            raise ConfigurationError(f"penalty_weights must have shape ({self.m},)")
        if not np.all(alpha > 0):
            raise ConfigurationError("penalty weights alpha_j must all be positive")
        alpha.setflags(write=False)
        object.__setattr__(self, "penalty_weights", alpha)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataMatrix:
    """An n x d matrix of i.i.d. observation rows. Immutable, finite entries."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float, copy=True)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ConfigurationError("data must be a 2-d array (rows = observations)")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ConfigurationError("data must have n >= 1 rows and d >= 1 columns")
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise ConfigurationError(
                f"non-finite data entry at row {bad[0]}, column {bad[1]}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_csv(cls, path) -> "DataMatrix":
        """Read a comma-separated numeric matrix; a single header row is allowed."""
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        first = text.splitlines()[0] if text.strip() else ""
        skip = 0
        try:
            [float(tok) for tok in first.split(",") if tok.strip() != ""]
        except ValueError:
            skip = 1
        try:
            arr = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=skip, ndmin=2)
        except ValueError as exc:
            raise ConfigurationError(f"could not parse CSV data from {path}: {exc}") from exc
        return cls(arr)

    def to_csv(self, path) -> None:
        write_csv(path, [f"x{k + 1}" for k in range(self.d)],
                  ([float(v) for v in row] for row in self.values))


@dataclass(frozen=True)
class ScoreBatch:
    """Per-observation partial scores: entry (i, j, :) = u_j(x_i, theta)."""

    scores: np.ndarray  # (n, m, p)
    theta: np.ndarray   # (p,)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float)).copy()
        if scores.ndim != 3:
            raise ConfigurationError("scores must have shape (n, m, p)")
        if scores.shape[2] != theta.shape[0]:
            raise ConfigurationError("score array p-dimension inconsistent with theta")
        if not np.all(np.isfinite(scores)):
            i, j, _ = np.argwhere(~np.isfinite(scores))[0]
            raise EvaluationError(
                f"non-finite partial score at observation {i}, sub-likelihood {j}")
        scores = scores.copy()
        scores.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "theta", theta)

    @property
    def n_obs(self) -> int:
        return self.scores.shape[0]

    @property
    def m(self) -> int:
        return self.scores.shape[1]

    @property
    def p(self) -> int:
        return self.scores.shape[2]


@dataclass(frozen=True)
class GramSummary:
    """Empirical (or population) m x m score Gram matrix and its diagonal.

    Symmetrized on construction via (G + G^T)/2; ``diag_b`` is extracted from
    the symmetrized matrix so ``diag_b[j] == gram[j, j]`` exactly.
    ``n_obs`` is None for population summaries; ``mc_se`` records the largest
    entrywise Monte Carlo standard error when the Gram was MC-estimated.
    """

    gram: np.ndarray
    diag_b: np.ndarray = field(default=None)
    n_obs: Optional[int] = None
    theta: Optional[np.ndarray] = None
    p: int = 1
    mc_se: Optional[float] = None

    def __post_init__(self):
        gram = np.array(self.gram, dtype=float, copy=True)
        if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
            raise ConfigurationError("gram must be a square matrix")
        if gram.shape[0] > MAX_GRAM_DIM:
            raise ConfigurationError(f"dense Gram support is capped at m = {MAX_GRAM_DIM}")
        if not np.all(np.isfinite(gram)):
            raise ConfigurationError("gram contains non-finite entries")
        gram = 0.5 * (gram + gram.T)
        gram.setflags(write=False)
        object.__setattr__(self, "gram", gram)
        object.__setattr__(self, "diag_b", np.diag(gram).copy())
        self.diag_b.setflags(write=False)
        if self.theta is not None:
            theta = np.atleast_1d(np.asarray(self.theta, dtype=float)).copy()
            theta.setflags(write=False)
            object.__setattr__(self, "theta", theta)
            object.__setattr__(self, "p", theta.shape[0])
        if self.n_obs is not None and self.n_obs < 1:
            raise ConfigurationError("n_obs must be a positive sample size")

    @property
    def m(self) -> int:
        return self.gram.shape[0]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.gram)[0])

    def validate_psd(self, tol: float = 1e-10) -> None:
        lam = self.min_eigenvalue()
        scale = max(1.0, float(np.max(np.abs(self.diag_b))) if self.m else 1.0)
        if lam < -tol * scale:
            raise ConfigurationError(f"gram is not PSD: min eigenvalue {lam:.3e}")

    @classmethod
    def from_matrix(cls, mat, n_obs: Optional[int] = None,
                    theta=None, p: int = 1) -> "GramSummary":
        return cls(gram=np.asarray(mat, dtype=float), n_obs=n_obs, theta=theta, p=p)


@dataclass(frozen=True)
class CompositionRule:
    """A sparse weight vector over the m partial scores.

    ``active`` is exactly the nonzero support (ordered), ``signs`` the signs
    of the active weights, ``lam`` the penalty level that produced the rule
    (NaN when not solver-produced).
    """

    weights: np.ndarray
    lam: float = float("nan")

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True).ravel()
        if w.size < 1:
            raise ConfigurationError("rule must have at least one coordinate")
        if not np.all(np.isfinite(w)):
            raise ConfigurationError("rule weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        active = np.flatnonzero(w)
        active.setflags(write=False)
        object.__setattr__(self, "_active", active)
        signs = np.sign(w[active]).astype(int)
        signs.setflags(write=False)
        object.__setattr__(self, "_signs", signs)

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    @property
    def active(self) -> np.ndarray:
        return self._active

    @property
    def signs(self) -> np.ndarray:
        return self._signs

    @property
    def n_active(self) -> int:
        return int(self._active.size)

    @property
    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.weights)))

    def nonzero_map(self) -> dict:
        return {int(j): float(self.weights[j]) for j in self._active}

    def dense(self) -> np.ndarray:
        return self.weights.copy()

    @classmethod
    def zero(cls, m: int, lam: float = float("nan")) -> "CompositionRule":
        return cls(np.zeros(m), lam)


# ---------------------------------------------------------------------------
# Score evaluation
# ---------------------------------------------------------------------------

def _check_theta(model: ModelSpec, theta) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (model.p,):
        raise ConfigurationError(
            f"theta must have length p={model.p}, got shape {theta.shape}")
    return theta


def _check_data(model: ModelSpec, values: np.ndarray) -> None:
    if model.data_dim is not None and values.shape[1] != model.data_dim:
        raise ConfigurationError(
            f"model expects d={model.data_dim} data columns, got {values.shape[1]}")


def _raw_scores(model: ModelSpec, theta: np.ndarray, values: np.ndarray,
                cols=None) -> np.ndarray:
    """(n, k, p) partial scores, restricted to column subset ``cols``."""
    if model.batch_score_eval is not None:
        out = np.asarray(model.batch_score_eval(theta, values, cols), dtype=float)
    else:
        rows = [np.asarray(model.score_eval(theta, row), dtype=float)
                for row in values]
        out = np.stack(rows, axis=0)
        if out.shape[1:] != (model.m, model.p):
            raise ConfigurationError(
                f"score_eval must return (m, p) = ({model.m}, {model.p}) arrays, "
                f"got {out.shape[1:]}")
        if cols is not None:
            out = out[:, np.asarray(cols, dtype=int), :]
    k = model.m if cols is None else len(cols)
    if out.shape != (values.shape[0], k, model.p):
        raise ConfigurationError(
            f"batch score evaluation returned shape {out.shape}, "
            f"expected {(values.shape[0], k, model.p)}")
    return out


def eval_scores(model: ModelSpec, theta, data: DataMatrix) -> ScoreBatch:
    """Evaluate all m partial scores at ``theta`` for every observation.

    Deterministic for fixed inputs. Raises ``EvaluationError`` (naming the
    observation and sub-likelihood index) when a score is non-finite and
    ``ConfigurationError`` on dimension mismatches.
    """
    theta = _check_theta(model, theta)
    _check_data(model, data.values)
    scores = _raw_scores(model, theta, data.values)
    return ScoreBatch(scores=scores, theta=theta)


def empirical_gram(batch: ScoreBatch) -> GramSummary:
    """Empirical Gram G_jk = (1/n) sum_i u_j(x_i)^T u_k(x_i), symmetrized."""
    if batch.n_obs < 1:
        raise ConfigurationError("empty score batch")
    g = np.einsum("imp,ikp->mk", batch.scores, batch.scores) / batch.n_obs
    return GramSummary(gram=g, n_obs=batch.n_obs, theta=batch.theta)


def cl_score_mean(batch: ScoreBatch, rule: CompositionRule) -> np.ndarray:
    """Empirical mean of the combined score sum_j w_j u_j; cost ~ |active|."""
    if rule.m != batch.m:
        raise ConfigurationError(
            f"rule has m={rule.m} but batch has m={batch.m}")
    if rule.n_active == 0:
        return np.zeros(batch.p)
    sub = batch.scores[:, rule.active, :]            # (n, k, p)
    mean_sub = sub.mean(axis=0)                      # (k, p)
    return rule.weights[rule.active] @ mean_sub      # (p,)


# ---------------------------------------------------------------------------
# Mean scores / derivatives shared by the estimation step
# ---------------------------------------------------------------------------

def mean_scores(model: ModelSpec, theta, values: np.ndarray, cols=None) -> np.ndarray:
    """(k, p) empirical mean of each partial score over observation rows."""
    theta = _check_theta(model, theta)
    _check_data(model, values)
    scores = _raw_scores(model, theta, values, cols)
    if not np.all(np.isfinite(scores)):
        i, j, _ = np.argwhere(~np.isfinite(scores))[0]
        jj = j if cols is None else cols[j]
        raise EvaluationError(
            f"non-finite partial score at observation {i}, sub-likelihood {jj}")
    return scores.mean(axis=0)


def fd_step(theta_k: float) -> float:
    return max(1e-6, 1e-6 * abs(theta_k))


def mean_score_derivs(model: ModelSpec, theta, values: np.ndarray,
                      cols=None) -> np.ndarray:
    """(k, p, p) empirical mean of the score derivatives d u_j / d theta.

    Uses the model's derivative callback when present, otherwise central
    finite differences of the mean scores (one pair of evaluations per
    parameter coordinate).
    """
    theta = _check_theta(model, theta)
    if model.batch_mean_deriv is not None:
        out = np.asarray(model.batch_mean_deriv(theta, values, cols), dtype=float)
        k = model.m if cols is None else len(cols)
        if out.shape != (k, model.p, model.p):
            raise ConfigurationError(
                f"batch mean derivative returned {out.shape}, expected {(k, model.p, model.p)}")
        return out
    if model.deriv_eval is not None:
        rows = [np.asarray(model.deriv_eval(theta, row), dtype=float)
                for row in values]
        out = np.stack(rows, axis=0)
        if out.shape[1:] != (model.m, model.p, model.p):
            raise ConfigurationError(
                f"deriv_eval must return (m, p, p) arrays, got {out.shape[1:]}")
        if cols is not None:
            out = out[:, np.asarray(cols, dtype=int), :, :]
        return out.mean(axis=0)
    # central finite differences on the mean scores
    k = model.m if cols is None else len(cols)
    derivs = np.empty((k, model.p, model.p))
    for r in range(model.p):
        h = fd_step(theta[r])
        up = theta.copy()
        up[r] += h
        dn = theta.copy()
        dn[r] -= h
        derivs[:, :, r] = (mean_scores(model, up, values, cols)
                           - mean_scores(model, dn, values, cols)) / (2.0 * h)
    return derivs
