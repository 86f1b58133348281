"""Sign-flip permutation test of no local causal effect at ``z0``.

Under the null each distinct matched pair's contribution ``w * delta`` is
equally likely to carry either sign, independently across pairs, and the
observed statistic is the matching estimate ``sum(w * delta)``. Because the
flip distribution of ``sum(+-t_j)`` equals that of ``sum(+-|t_j|)``, every
method below works on the magnitudes ``|w * delta|``; the sensitivity bounds
reuse the same draws.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateStatisticError, EnumerationBudgetError
from .streams import map_uniform_blocks

TWO_SIDED = "two-sided"
GREATER = "greater"
LESS = "less"
SIDES = (TWO_SIDED, GREATER, LESS)

EXACT = "exact"
MONTE_CARLO = "monte-carlo"
NORMAL = "normal"

EXACT_MAX_PAIRS = 25
MC_MIN_REPS = 1000
LINDEBERG_WARN = 0.1
_ENUM_CHUNK = 1 << 16


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    t_obs: float
    method: str
    sidedness: str
    p_value: float
    std_error: float
    lindeberg_ratio: float
    mc_reps: int = 0
    seed: int = None

    @property
    def lindeberg_warning(self):
        return not self.lindeberg_ratio <= LINDEBERG_WARN


def _check_side(sidedness):
    if sidedness not in SIDES:
        raise ValueError(f"sidedness must be one of {SIDES}, got {sidedness!r}")


def comparison_tolerance(magnitudes):
    """Slack for ``>=`` comparisons so that the observed sign pattern always counts."""
    return 1e-10 * math.fsum(np.abs(magnitudes))


def lindeberg_diagnostic(pw):
    """``max(w^2 delta^2) / sum(w^2 delta^2)`` for a pair-weight table."""
    sq = np.asarray(pw.terms) ** 2
    total = math.fsum(sq)
    if total == 0:
        raise DegenerateStatisticError("all matched slopes are zero; the statistic is degenerate")
    return float(sq.max() / total)


def _summary(pw):
    total = pw.variance
    ratio = float(np.max(pw.terms ** 2) / total) if total > 0 else math.nan
    return pw.estimate, math.sqrt(total), ratio


def tail_counts(draws, t_obs, tol):
    """Counts of permuted statistics at least as extreme as ``t_obs``.

    ``draws`` are realisations of ``sum(+-|t_j|)``; the ``less`` count uses
    their reflection, which has the same null distribution.
    """
    return {
        GREATER: int(np.count_nonzero(draws >= t_obs - tol)),
        LESS: int(np.count_nonzero(-draws <= t_obs + tol)),
        TWO_SIDED: int(np.count_nonzero(np.abs(draws) >= abs(t_obs) - tol)),
    }


def enumerate_sign_sums(magnitudes, chunk=_ENUM_CHUNK):
    """Yield ``(sums, n_plus)`` over all ``2**n`` sign vectors, chunk by chunk."""
    m = np.asarray(magnitudes, dtype=float)
    n = m.shape[0]
    shifts = np.arange(n, dtype=np.int64)
    total = 1 << n
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        bits = (codes[:, None] >> shifts) & 1
        yield (2 * bits - 1) @ m, bits.sum(axis=1)


def permutation_test_exact(pw, sidedness=TWO_SIDED):
    """Exact sign-flip p-value by enumerating all ``2**|pairs|`` sign vectors."""
    _check_side(sidedness)
    n = len(pw)
    if n > EXACT_MAX_PAIRS:
        raise EnumerationBudgetError(
            f"{n} pairs exceed the exact enumeration budget of {EXACT_MAX_PAIRS}; "
            "use the monte-carlo method")
    t_obs, se, ratio = _summary(pw)
    mags = np.abs(pw.terms)
    tol = comparison_tolerance(mags)
    hits = 0
    for sums, _ in enumerate_sign_sums(mags):
        hits += tail_counts(sums, t_obs, tol)[sidedness]
    return TestResult(t_obs, EXACT, sidedness, hits / (1 << n), se, ratio)


def sign_draws(magnitudes, p_plus, reps, seed, threads=1, fn=None):
    """Monte Carlo sums of ``+-magnitudes`` with ``P(+) = p_plus`` per term.

    A term is positive when its uniform draw is below ``p_plus``, so runs with
    the same seed share draws across ``p_plus`` values. ``fn`` reduces each
    block of sums; by default the sums themselves are returned.
    """
    m = np.asarray(magnitudes, dtype=float)

    def block(u):
        sums = np.where(u < p_plus, 1.0, -1.0) @ m
        return sums if fn is None else fn(sums)

    return map_uniform_blocks(block, seed, reps, m.shape[0], threads=threads)


def permutation_test_mc(pw, reps, seed, sidedness=TWO_SIDED, threads=1):
    """Monte Carlo sign-flip p-value ``(1 + hits) / (1 + reps)``."""
    _check_side(sidedness)
    if reps < MC_MIN_REPS:
        raise ValueError(f"monte-carlo tests need at least {MC_MIN_REPS} reps, got {reps}")
    if seed is None:
        raise ValueError("monte-carlo tests require an explicit seed")
    t_obs, se, ratio = _summary(pw)
    mags = np.abs(pw.terms)
    tol = comparison_tolerance(mags)
    parts = sign_draws(mags, 0.5, reps, seed, threads,
                       fn=lambda s: tail_counts(s, t_obs, tol)[sidedness])
    p = (1 + sum(parts)) / (1 + reps)
    return TestResult(t_obs, MONTE_CARLO, sidedness, p, se, ratio, reps, seed)


def normal_pvalue(stat, sidedness):
    if sidedness == GREATER:
        return float(ndtr(-stat))
    if sidedness == LESS:
        return float(ndtr(stat))
    return float(min(1.0, 2 * ndtr(-abs(stat))))


def permutation_test_normal(pw, sidedness=TWO_SIDED):
    """Normal approximation: ``t_obs / sqrt(sum(w^2 delta^2))`` against N(0, 1)."""
    _check_side(sidedness)
    t_obs, se, _ = _summary(pw)
    ratio = lindeberg_diagnostic(pw)
    return TestResult(t_obs, NORMAL, sidedness, normal_pvalue(t_obs / se, sidedness), se, ratio)


def permutation_test(pw, method=NORMAL, sidedness=TWO_SIDED, reps=10000, seed=None, threads=1):
    if method == EXACT:
        return permutation_test_exact(pw, sidedness)
    if method == MONTE_CARLO:
        return permutation_test_mc(pw, reps, seed, sidedness, threads)
    if method == NORMAL:
        return permutation_test_normal(pw, sidedness)
    raise ValueError(f"unknown test method {method!r}")


def binomial_band(p, reps, sigmas=3.0):
    """Half-width of the ``sigmas``-sigma band for a proportion estimated from ``reps`` draws."""
    return sigmas * math.sqrt(p * (1 - p) / reps)


def exact_tail_probability(magnitudes, p_plus, a):
    """``P(sum(+-m_j) >= a)`` with independent ``P(+) = p_plus``, by enumeration."""
    m = np.asarray(magnitudes, dtype=float)
    n = m.shape[0]
    if n > EXACT_MAX_PAIRS:
        raise EnumerationBudgetError(f"{n} pairs exceed the enumeration budget {EXACT_MAX_PAIRS}")
    tol = comparison_tolerance(m)
    by_plus = np.zeros(n + 1, dtype=np.int64)
    for sums, n_plus in enumerate_sign_sums(m):
        by_plus += np.bincount(n_plus[sums >= a - tol], minlength=n + 1)
    return math.fsum(int(c) * p_plus ** k * (1 - p_plus) ** (n - k)
                     for k, c in enumerate(by_plus) if c)


def write_test_report(rows, fh):
    """``rows`` are ``(z0, TestResult)`` pairs."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["z0", "estimate", "method", "sidedness", "p_value", "std_error",
                "lindeberg_ratio", "mc_reps", "seed", "lindeberg_warning"])
    for z0, r in rows:
        w.writerow([repr(float(z0)), repr(r.t_obs), r.method, r.sidedness, repr(r.p_value),
                    repr(r.std_error), repr(r.lindeberg_ratio),
                    r.mc_reps if r.method == MONTE_CARLO else "",
                    r.seed if r.seed is not None else "", str(r.lindeberg_warning).lower()])

