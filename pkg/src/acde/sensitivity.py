"""Gamma-sensitivity bounds for the sign-flip test under unmeasured confounding.

With sensitivity parameter ``gamma >= 1`` each pair's chance of carrying the
observed orientation lies in ``[1/(1+gamma), gamma/(1+gamma)]``. The upper
(lower) bound on the one-sided p-value comes from the sum of independent
``+-w|delta|`` terms that are positive with the larger (smaller) probability.
Bounds are one-sided in the direction of the observed estimate.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateStatisticError, DomainError
from .inference import (EXACT, GREATER, LESS, MC_MIN_REPS, MONTE_CARLO, NORMAL,
                        comparison_tolerance, exact_tail_probability, sign_draws)

DEFAULT_GAMMA_GRID = tuple(round(1 + 0.01 * j, 2) for j in range(101))


def bound_probs(gamma):
    """``(1/(1+gamma), gamma/(1+gamma))``."""
    if not gamma >= 1:
        raise DomainError(f"gamma must be >= 1, got {gamma}")
    if math.isinf(gamma):
        return 0.0, 1.0
    return 1 / (1 + gamma), gamma / (1 + gamma)


@dataclass(frozen=True)
class SensitivityResult:
    gamma: float
    p_lower: float
    p_upper: float
    method: str
    direction: str
    reps: int = 0
    seed: int = None


def _magnitudes(pw):
    terms = np.asarray(pw.terms)
    total = math.fsum(terms ** 2)
    if total == 0:
        raise DegenerateStatisticError("all matched slopes are zero; no sensitivity bound exists")
    t_obs = pw.estimate
    return np.abs(terms), abs(t_obs), (LESS if t_obs < 0 else GREATER), total


def _normal_tail(p, a, sum_abs, sum_sq):
    mean = (2 * p - 1) * sum_abs
    sd = math.sqrt(4 * p * (1 - p) * sum_sq)
    if sd == 0:
        return 1.0 if mean >= a else 0.0
    return float(ndtr(-(a - mean) / sd))


def sensitivity_pvalues(pw, gamma, method=MONTE_CARLO, reps=10000, seed=None, threads=1):
    """Lower and upper one-sided p-value bounds at ``gamma``.

    ``monte-carlo`` draws both envelopes from one set of uniforms keyed by
    ``seed``, so the bounds are monotone in gamma and coincide with the
    one-sided permutation p-value at ``gamma = 1``. ``exact`` enumerates all
    sign patterns (at most 25 pairs); ``normal`` matches the envelope means
    and variances.
    """
    p_minus, p_plus = bound_probs(gamma)
    mags, a, direction, sum_sq = _magnitudes(pw)
    if method == NORMAL:
        sum_abs = math.fsum(mags)
        upper = _normal_tail(p_plus, a, sum_abs, sum_sq)
        lower = _normal_tail(p_minus, a, sum_abs, sum_sq)
        return SensitivityResult(gamma, lower, upper, NORMAL, direction)
    if method == EXACT:
        upper = exact_tail_probability(mags, p_plus, a)
        lower = exact_tail_probability(mags, p_minus, a)
        return SensitivityResult(gamma, lower, upper, EXACT, direction)
    if method != MONTE_CARLO:
        raise ValueError(f"unknown sensitivity method {method!r}")
    if reps < MC_MIN_REPS:
        raise ValueError(f"monte-carlo bounds need at least {MC_MIN_REPS} reps, got {reps}")
    if seed is None:
        raise ValueError("monte-carlo bounds require an explicit seed")
    tol = comparison_tolerance(mags)

    def count(p):
        parts = sign_draws(mags, p, reps, seed, threads,
                           fn=lambda s: int(np.count_nonzero(s >= a - tol)))
        return (1 + sum(parts)) / (1 + reps)

    upper = count(p_plus)
    lower = upper if p_minus == p_plus else count(p_minus)
    return SensitivityResult(gamma, lower, upper, MONTE_CARLO, direction, reps, seed)


@dataclass(frozen=True)
class GammaCurve:
    grid: tuple
    alpha: float
    breakeven_gamma: float = None

    @property
    def gammas(self):
        return [r.gamma for r in self.grid]

    @property
    def p_upper(self):
        return [r.p_upper for r in self.grid]

    @property
    def p_lower(self):
        return [r.p_lower for r in self.grid]


def gamma_breakeven(pw, alpha=0.05, gamma_grid=DEFAULT_GAMMA_GRID, method=MONTE_CARLO,
                    reps=10000, seed=None, threads=1):
    """Bounds over an ascending gamma grid and the first gamma whose upper bound exceeds ``alpha``."""
    grid = [float(g) for g in gamma_grid]
    if not grid:
        raise ValueError("gamma grid is empty")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if grid[0] < 1:
        raise DomainError(f"gamma grid must start at or above 1, got {grid[0]}")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("gamma grid must be sorted ascending")
    results = tuple(sensitivity_pvalues(pw, g, method, reps, seed, threads) for g in grid)
    breakeven = next((r.gamma for r in results if r.p_upper > alpha), None)
    return GammaCurve(results, alpha, breakeven)


def write_gamma_curve(curve, fh):
    """Curve rows plus a footer row ``breakeven,<gamma or none>,alpha,<alpha>,,``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["gamma", "p_lower", "p_upper", "method", "reps", "seed"])
    for r in curve.grid:
        w.writerow([repr(r.gamma), repr(r.p_lower), repr(r.p_upper), r.method,
                    r.reps if r.method == MONTE_CARLO else "",
                    r.seed if r.seed is not None else ""])
    be = "none" if curve.breakeven_gamma is None else repr(curve.breakeven_gamma)
    w.writerow(["breakeven", be, "alpha", repr(curve.alpha), "", ""])
