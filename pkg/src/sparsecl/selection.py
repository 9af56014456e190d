"""Tuning-constant selection by explained score variability.

phi(lambda) is the share of the Gram diagonal (score variability) carried by
the currently selected sub-likelihoods, gated by the computing-budget floor
lambda_star:

    phi(lambda) = [sum_{j in E} G_jj / sum_j G_jj] * 1(lambda > lambda_star).

The selected constant is the largest breakpoint lambda with phi > tau; when
no breakpoint qualifies before the budget floor is reached, lambda_star is
returned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .core import (
    CompositionRule,
    ConfigurationError,
    DegenerateInputError,
    GramSummary,
    write_csv,
)
from .tstep import PathResult


@dataclass(frozen=True)
class SelectionConfig:
    tau: float = 0.9
    lambda_budget: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.tau <= 1.0):
            raise ConfigurationError("tau must lie in (0, 1]")
        if self.lambda_budget < 0.0:
            raise ConfigurationError("lambda_budget must be nonnegative")


def _trace_share(gram: GramSummary, active) -> float:
    total = float(np.sum(gram.diag_b))
    if total <= 0.0:
        raise DegenerateInputError("Gram trace is zero; phi is undefined")
    if len(active) == 0:
        return 0.0
    return float(np.sum(gram.diag_b[np.asarray(list(active), dtype=int)])) / total


def phi(gram: GramSummary, rule: CompositionRule, lam: float,
        lambda_budget: float = 0.0) -> float:
    """Explained-score-variability share of the rule's active set at ``lam``."""
    if rule.m != gram.m:
        raise ConfigurationError("rule dimension does not match gram")
    if lam <= lambda_budget:
        # still check the degenerate-trace precondition before gating to 0
        _trace_share(gram, rule.active)
        return 0.0
    return _trace_share(gram, rule.active)


def selection_trace(path: PathResult, gram: GramSummary,
                    config: SelectionConfig) -> List[Tuple[float, int, float]]:
    """(lambda, active count, phi) per breakpoint, events applied.

    At an entry breakpoint the entering score is counted as selected even
    though its weight is exactly zero there (it is nonzero just below).
    """
    rows = []
    for bp, active in zip(path.breakpoints, path.active_sets()):
        share = _trace_share(gram, active)
        val = share if bp.lam > config.lambda_budget else 0.0
        rows.append((bp.lam, len(active), val))
    return rows


def select_lambda(path: PathResult, gram: GramSummary,
                  config: SelectionConfig) -> float:
    """Largest breakpoint lambda with phi > tau, else the budget floor."""
    if path.n_breakpoints == 0:
        raise ConfigurationError("cannot select lambda from an empty path")
    for lam, _count, val in selection_trace(path, gram, config):
        if val > config.tau:
            return float(lam)
    return float(config.lambda_budget)


def trace_to_csv(path_result: PathResult, gram: GramSummary,
                 config: SelectionConfig, out_path) -> None:
    rows = [(lam, str(count), val)
            for lam, count, val in selection_trace(path_result, gram, config)]
    write_csv(out_path, ["lambda", "active_count", "phi"], rows)
