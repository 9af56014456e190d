"""Solvers for the l1-penalized score-matching problem (truncation step).

The problem is, for a PSD Gram matrix G with diagonal b and penalty level
lambda >= 0,

    minimize_w  (1/2) w^T G w - b^T w + lambda * sum_j alpha_j |w_j|.

Its KKT conditions read, with the pseudo-covariance c(w) = b - G w,

    |c_j| = lambda * alpha_j      for active j (sign(c_j) = sign(w_j)),
    |c_j| <= lambda * alpha_j     for inactive j,

and on the active set E with sign vector s the stationary system is

    G_EE w_E = b_E - lambda * alpha_E * s.

Two independent solvers are provided (a homotopy path and a cyclic
coordinate-descent solver with an exact active-set polish), plus a
brute-force enumeration oracle for testing.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import (
    CompositionRule,
    ConfigurationError,
    ConvergenceError,
    GramSummary,
    PathError,
    SingularityError,
    fmt_float,
    write_csv,
)


@dataclass(frozen=True)
class SolveOptions:
    """Tolerances shared by the fixed-lambda and path solvers."""

    kkt_tol: float = 1e-8
    cd_tol: float = 1e-10
    max_sweeps: int = 10_000
    tie_tol: float = 1e-12          # relative tie tolerance on event lambdas
    ridge_scale: float = 1e-10      # jitter = ridge_scale * tr(G_EE)/|E| on singular G_EE
    max_condition: float = 1e12     # lambda = 0 requires cond(G) below this


DEFAULT_OPTIONS = SolveOptions()


@dataclass(frozen=True)
class PathEvent:
    kind: str                 # 'enter' | 'leave' | 'terminate'
    indices: Tuple[int, ...]  # affected score indices (empty for terminate)

    def __str__(self):
        if self.kind == "terminate":
            return "terminate"
        return f"{self.kind}({','.join(str(i) for i in self.indices)})"


@dataclass(frozen=True)
class PathBreakpoint:
    lam: float
    rule: CompositionRule
    event: PathEvent


@dataclass(frozen=True)
class PathResult:
    """Piecewise-linear homotopy path: ordered breakpoints with events.

    ``lam`` is strictly decreasing along ``breakpoints``; each rule satisfies
    the KKT certificate at its own lambda. At an 'enter' breakpoint the
    entering coordinate's weight is exactly zero (it grows below).
    """

    breakpoints: Tuple[PathBreakpoint, ...]
    lambda_max: float

    @property
    def n_breakpoints(self) -> int:
        return len(self.breakpoints)

    def lambdas(self) -> np.ndarray:
        return np.array([bp.lam for bp in self.breakpoints])

    def final_rule(self) -> CompositionRule:
        if not self.breakpoints:
            raise ConfigurationError("empty path has no final rule")
        return self.breakpoints[-1].rule

    def active_sets(self):
        """Active set per breakpoint segment (event applied), as index tuples."""
        current: list[int] = []
        out = []
        for bp in self.breakpoints:
            if bp.event.kind == "enter":
                current = sorted(set(current) | set(bp.event.indices))
            elif bp.event.kind == "leave":
                current = sorted(set(current) - set(bp.event.indices))
            out.append(tuple(current))
        return out

    def to_csv(self, path) -> None:
        m = self.breakpoints[0].rule.m if self.breakpoints else 0
        header = ["lambda", "active_count", "event"] + [f"w{j + 1}" for j in range(m)]
        rows = []
        for bp, act in zip(self.breakpoints, self.active_sets()):
            rows.append([fmt_float(bp.lam), str(len(act)), str(bp.event)]
                        + [fmt_float(v) for v in bp.rule.weights])
        write_csv(path, header, rows)

    def to_json(self, path) -> None:
        payload = {
            "lambda_max": self.lambda_max,
            "breakpoints": [
                {
                    "lambda": bp.lam,
                    "event": str(bp.event),
                    "active": [int(j) for j in bp.rule.active],
                    "weights": [float(v) for v in bp.rule.weights],
                }
                for bp in self.breakpoints
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)


@dataclass(frozen=True)
class KktReport:
    """Violations of the KKT certificate at (rule, lambda).

    ``max_active_violation`` is max_j | |c_j| - lambda*alpha_j | over active j,
    ``max_inactive_violation`` is max_j (|c_j| - lambda*alpha_j)_+ over the
    rest, and ``sign_consistent`` records sign(c_j) == sign(w_j) on the active
    set (coordinates with |c_j| below noise level are treated as neutral).
    """

    max_active_violation: float
    max_inactive_violation: float
    sign_consistent: bool

    def ok(self, tol: float = 1e-8) -> bool:
        return (self.max_active_violation <= tol
                and self.max_inactive_violation <= tol
                and self.sign_consistent)


def _resolve_alpha(gram: GramSummary, alpha) -> np.ndarray:
    if alpha is None:
        return np.ones(gram.m)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (gram.m,):
        raise ConfigurationError(f"alpha must have shape ({gram.m},)")
    if not np.all(alpha > 0):
        raise ConfigurationError("alpha entries must be positive")
    return alpha


def objective_value(gram: GramSummary, lam: float, w: np.ndarray,
                    alpha=None) -> float:
    """(1/2) w^T G w - b^T w + lambda * sum alpha_j |w_j| (zero at w = 0)."""
    alpha = _resolve_alpha(gram, alpha)
    w = np.asarray(w, dtype=float)
    return float(0.5 * w @ gram.gram @ w - gram.diag_b @ w
                 + lam * np.sum(alpha * np.abs(w)))


def lambda_entry(gram: GramSummary, alpha=None) -> float:
    """Smallest lambda at which w = 0 is optimal: max_j b_j / alpha_j."""
    alpha = _resolve_alpha(gram, alpha)
    if gram.m == 0:
        return 0.0
    return float(np.max(gram.diag_b / alpha))


def kkt_check(gram: GramSummary, rule: CompositionRule, lam: float,
              alpha=None) -> KktReport:
    """Pure function computing the KKT violations of ``rule`` at ``lam``."""
    alpha = _resolve_alpha(gram, alpha)
    if rule.m != gram.m:
        raise ConfigurationError("rule dimension does not match gram")
    w = rule.weights
    c = gram.diag_b - gram.gram @ w
    thr = lam * alpha
    active = rule.active
    mask = np.zeros(gram.m, dtype=bool)
    mask[active] = True
    if active.size:
        act_viol = float(np.max(np.abs(np.abs(c[active]) - thr[active])))
        noise = 1e-12 * max(1.0, float(np.max(np.abs(c))), float(np.max(thr)))
        signs_ok = bool(np.all((c[active] * w[active] > 0) | (np.abs(c[active]) <= noise)))
    else:
        act_viol = 0.0
        signs_ok = True
    if np.any(~mask):
        inact_viol = float(np.max(np.clip(np.abs(c[~mask]) - thr[~mask], 0.0, None)))
    else:
        inact_viol = 0.0
    return KktReport(max_active_violation=act_viol,
                     max_inactive_violation=inact_viol,
                     sign_consistent=signs_ok)


# ---------------------------------------------------------------------------
# Active-set linear algebra
# ---------------------------------------------------------------------------

def _solve_active(gram_sub: np.ndarray, rhs: np.ndarray,
                  opts: SolveOptions) -> np.ndarray:
    """Solve G_EE x = rhs; on singularity retry with a diagonal jitter."""
    try:
        sol = np.linalg.solve(gram_sub, rhs)
        if np.all(np.isfinite(sol)):
            return sol
    except np.linalg.LinAlgError:
        pass
    k = gram_sub.shape[0]
    jitter = opts.ridge_scale * max(np.trace(gram_sub) / max(k, 1), 1e-300)
    warnings.warn(
        "active-set Gram block is numerically singular; "
        f"solving with diagonal jitter {jitter:.3e}",
        RuntimeWarning, stacklevel=3)
    return np.linalg.solve(gram_sub + jitter * np.eye(k), rhs)


def _rank_cap(gram: GramSummary) -> int:
    if gram.n_obs is None:
        return gram.m
    return min(gram.n_obs * gram.p, gram.m)


# ---------------------------------------------------------------------------
# Fixed-lambda solver: coordinate descent + exact polish
# ---------------------------------------------------------------------------

def _solve_lambda_zero(gram: GramSummary, alpha: np.ndarray,
                       opts: SolveOptions) -> CompositionRule:
    if gram.n_obs is not None and gram.m > gram.n_obs * gram.p:
        raise SingularityError(
            "lambda = 0 requires a nonsingular Gram, which fails when "
            f"n*p = {gram.n_obs * gram.p} < m = {gram.m}; use lambda > 0")
    cond = np.linalg.cond(gram.gram)
    if not np.isfinite(cond) or cond > opts.max_condition:
        raise SingularityError(
            f"Gram condition estimate {cond:.3e} exceeds {opts.max_condition:.1e}; "
            "lambda = 0 is not solvable (use lambda > 0)")
    w = np.linalg.solve(gram.gram, gram.diag_b)
    return CompositionRule(w, 0.0)


def _coordinate_sweeps(gram: np.ndarray, b: np.ndarray, thr: np.ndarray,
                       w: np.ndarray, tol: float, max_sweeps: int) -> int:
    """Cyclic coordinate descent with soft-thresholding, in place on w."""
    m = b.shape[0]
    diag = np.diag(gram)
    for sweep in range(max_sweeps):
        delta = 0.0
        for j in range(m):
            if diag[j] <= 0.0:
                # PSD Gram with zero diagonal forces a zero row; w_j = 0 is optimal
                new = 0.0
            else:
                cj = b[j] - gram[j] @ w + diag[j] * w[j]
                aj = abs(cj) - thr[j]
                new = np.sign(cj) * aj / diag[j] if aj > 0.0 else 0.0
            delta = max(delta, abs(new - w[j]))
            w[j] = new
        if delta < tol:
            return sweep + 1
    return max_sweeps


def solve_fixed_lambda(gram: GramSummary, lam: float, alpha=None,
                       opts: SolveOptions = DEFAULT_OPTIONS) -> CompositionRule:
    """Minimizer of the penalized objective at a single penalty level.

    Runs cyclic coordinate descent (soft-thresholding) until the largest
    coordinate change drops below ``opts.cd_tol``, then polishes by solving
    the stationary system on the recovered active set exactly. The result is
    KKT-certified before being returned.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    alpha = _resolve_alpha(gram, alpha)
    if lam == 0.0:
        return _solve_lambda_zero(gram, alpha, opts)
    g = gram.gram
    b = gram.diag_b
    thr = lam * alpha
    if np.all(np.abs(b) <= thr):
        return CompositionRule.zero(gram.m, lam)
    w = np.zeros(gram.m)
    sweeps_left = opts.max_sweeps
    tol = opts.cd_tol
    last_report = None
    for _ in range(3):
        used = _coordinate_sweeps(g, b, thr, w, tol, sweeps_left)
        sweeps_left = max(sweeps_left - used, 1)
        polished = _polish(gram, lam, alpha, w, opts)
        report = kkt_check(gram, polished, lam, alpha)
        if report.ok(opts.kkt_tol):
            return polished
        last_report = report
        tol = tol / 100.0
    raise ConvergenceError(
        f"coordinate solver did not certify KKT at lambda={lam:g}: {last_report}")


def _polish(gram: GramSummary, lam: float, alpha: np.ndarray, w: np.ndarray,
            opts: SolveOptions) -> CompositionRule:
    """Exact stationary solve on the support of w (falls back to w itself)."""
    active = np.flatnonzero(w)
    if active.size == 0:
        return CompositionRule.zero(gram.m, lam)
    s = np.sign(w[active])
    sub = gram.gram[np.ix_(active, active)]
    rhs = gram.diag_b[active] - lam * alpha[active] * s
    x = _solve_active(sub, rhs, opts)
    if np.all(x * s > 0):
        out = np.zeros(gram.m)
        out[active] = x
        return CompositionRule(out, lam)
    return CompositionRule(w.copy(), lam)


# ---------------------------------------------------------------------------
# Homotopy path
# ---------------------------------------------------------------------------

def solve_path(gram: GramSummary, alpha=None, lambda_min: float = 0.0,
               max_active: Optional[int] = None, budget: float = 0.0,
               opts: SolveOptions = DEFAULT_OPTIONS) -> PathResult:
    """Homotopy (LARS-style) path of minimizers from lambda_max downward.

    On each segment with active set E and signs s the solution is affine in
    lambda: w_E(lambda) = G_EE^{-1} (b_E - lambda * alpha_E * s). Breakpoints
    occur where an inactive pseudo-covariance |c_j| reaches lambda*alpha_j
    (enter) or an active weight crosses zero (leave); simultaneous events
    within a relative tie tolerance are admitted together.

    The path stops at ``max(lambda_min, budget)``, when the active count
    reaches ``max_active`` (default min(n_obs*p, m), the sparsity cap), or at
    lambda = 0. More than 10*m events raise ``PathError``.
    """
    alpha = _resolve_alpha(gram, alpha)
    if lambda_min < 0 or budget < 0:
        raise ConfigurationError("lambda_min and budget must be nonnegative")
    m = gram.m
    cap = _rank_cap(gram) if max_active is None else min(max_active, m)
    floor = max(lambda_min, budget)
    g = gram.gram
    b = gram.diag_b

    lam_max = lambda_entry(gram, alpha)
    if lam_max <= 0.0:
        return PathResult(breakpoints=(), lambda_max=0.0)

    breakpoints: list[PathBreakpoint] = []
    entries = b / alpha
    first = [int(j) for j in np.flatnonzero(entries >= lam_max * (1.0 - opts.tie_tol))]
    active: list[int] = list(first)
    signs = {j: 1.0 for j in first}
    breakpoints.append(PathBreakpoint(
        lam=lam_max, rule=CompositionRule.zero(m, lam_max),
        event=PathEvent("enter", tuple(int(j) for j in first))))
    lam = lam_max

    if lam_max <= floor or len(active) >= cap:
        return PathResult(breakpoints=tuple(breakpoints), lambda_max=lam_max)

    max_events = 10 * m
    for _ in range(max_events):
        idx = np.array(sorted(active), dtype=int)
        s = np.array([signs[int(j)] for j in idx])
        sub = g[np.ix_(idx, idx)]
        sol = _solve_active(sub, np.column_stack([b[idx], alpha[idx] * s]), opts)
        u, v = sol[:, 0], sol[:, 1]          # w_E(lam) = u - lam * v

        candidates: list[tuple[float, str, int, float]] = []
        hi = lam * (1.0 - max(opts.tie_tol, 1e-15))

        inactive = np.setdiff1d(np.arange(m), idx, assume_unique=False)
        if inactive.size:
            gi = g[np.ix_(inactive, idx)]
            pj = b[inactive] - gi @ u        # c_j(lam) = pj + lam * qj
            qj = gi @ v
            with np.errstate(divide="ignore", invalid="ignore"):
                lam_plus = pj / (alpha[inactive] - qj)
                lam_minus = -pj / (alpha[inactive] + qj)
            for arr, sign in ((lam_plus, 1.0), (lam_minus, -1.0)):
                ok = np.isfinite(arr) & (arr > 0.0) & (arr <= hi)
                for j, cand in zip(inactive[ok], arr[ok]):
                    candidates.append((float(cand), "enter", int(j), sign))
        with np.errstate(divide="ignore", invalid="ignore"):
            lam_zero = u / v
        ok = np.isfinite(lam_zero) & (lam_zero > 0.0) & (lam_zero <= hi)
        for j, cand in zip(idx[ok], lam_zero[ok]):
            candidates.append((float(cand), "leave", int(j), 0.0))

        next_lam = max((c[0] for c in candidates), default=-np.inf)
        if next_lam <= floor:
            # segment runs out at the floor (or at lambda = 0): terminate there
            w_end = np.zeros(m)
            w_end[idx] = u - floor * v
            breakpoints.append(PathBreakpoint(
                lam=floor, rule=CompositionRule(w_end, floor),
                event=PathEvent("terminate", ())))
            break

        tied = [c for c in candidates
                if c[0] >= next_lam * (1.0 - opts.tie_tol)]
        lam = next_lam
        w_bp = np.zeros(m)
        w_bp[idx] = u - lam * v
        enter_ids = tuple(sorted(c[2] for c in tied if c[1] == "enter"))
        leave_ids = tuple(sorted(c[2] for c in tied if c[1] == "leave"))
        for c in tied:
            if c[1] == "enter":
                signs[c[2]] = c[3]
                active.append(c[2])
            else:
                active.remove(c[2])
                signs.pop(c[2], None)
                w_bp[c[2]] = 0.0             # exact zero at a leave event
        kind = "enter" if enter_ids else "leave"
        ids = enter_ids if enter_ids else leave_ids
        breakpoints.append(PathBreakpoint(
            lam=lam, rule=CompositionRule(w_bp, lam),
            event=PathEvent(kind, ids)))
        if not active or len(active) >= cap or lam <= floor:
            break
    else:
        raise PathError(f"homotopy exceeded {max_events} events (cycling guard)")

    return PathResult(breakpoints=tuple(breakpoints), lambda_max=lam_max)


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

_MAX_ORACLE_M = 12


def brute_force_oracle(gram: GramSummary, lam: float,
                       alpha=None) -> CompositionRule:
    """Global minimizer by enumerating every support and sign pattern.

    For each support E the stationary system is solved simultaneously for
    all 2^|E| sign vectors (the solution is affine in the sign vector);
    sign-consistent candidates are scored by the objective and the best one
    wins. Exact up to linear-solve error; refuses m > 12.
    """
    alpha = _resolve_alpha(gram, alpha)
    if gram.m > _MAX_ORACLE_M:
        raise ConfigurationError(
            f"brute-force oracle is limited to m <= {_MAX_ORACLE_M}")
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    g = gram.gram
    b = gram.diag_b
    m = gram.m

    best_w = np.zeros(m)
    best_obj = 0.0  # objective at w = 0
    sign_blocks = {k: np.array(list(itertools.product((-1.0, 1.0), repeat=k)))
                   for k in range(1, m + 1)}
    for k in range(1, m + 1):
        signs = sign_blocks[k]
        for support in itertools.combinations(range(m), k):
            idx = np.array(support)
            sub = g[np.ix_(idx, idx)]
            try:
                sol = np.linalg.solve(sub, np.column_stack(
                    [b[idx], np.diag(alpha[idx])]))
            except np.linalg.LinAlgError:
                continue
            base, pmat = sol[:, 0], sol[:, 1:]
            cand = base[None, :] - lam * signs @ pmat.T        # (2^k, k)
            consistent = np.all(cand * signs > 0.0, axis=1)
            if not np.any(consistent):
                continue
            ws = cand[consistent]
            quad = 0.5 * np.einsum("ij,jk,ik->i", ws, sub, ws)
            lin = ws @ b[idx]
            pen = lam * np.abs(ws) @ alpha[idx]
            objs = quad - lin + pen
            pos = int(np.argmin(objs))
            if objs[pos] < best_obj:
                best_obj = float(objs[pos])
                best_w = np.zeros(m)
                best_w[idx] = ws[pos]
    return CompositionRule(best_w, lam)
