"""Covariate balance of matched triplets and balance-driven tuning of (eta, kappa).

Balance within an exposure block is the average of the three pairwise
absolute standardized mean differences among the original covariates, the
lower matches and the upper matches of the triplets whose own exposure falls
in that block. The tuning score averages this over blocks and covariates.
"""

import csv
import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (ACDEWarning, EmptyBlocksError, EmptyGroupError,
                     NoFeasibleCandidateError, UnmatchedError)
from .matching import DROP, DROP_WARN_FRACTION, FAIL, MatchConfig, SCALED_EUCLIDEAN, find_matches

BALANCE_THRESHOLD = 0.1


def asmd(group_a, group_b):
    """Absolute standardized mean difference per covariate.

    The pooled variance is ``(S_a^2 + S_b^2) / 2`` with ``ddof=1`` sample
    variances (0 for a group of one). A zero mean difference over a zero
    pooled SD gives 0; a nonzero difference over a zero SD gives ``inf``.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyGroupError("ASMD needs two nonempty groups")
    diff = np.abs(a.mean(axis=0) - b.mean(axis=0))
    va = a.var(axis=0, ddof=1) if a.shape[0] > 1 else np.zeros(a.shape[1])
    vb = b.var(axis=0, ddof=1) if b.shape[0] > 1 else np.zeros(b.shape[1])
    pooled = np.sqrt((va + vb) / 2)
    out = np.zeros_like(diff)
    nz = diff != 0
    with np.errstate(divide="ignore"):
        out[nz] = diff[nz] / pooled[nz]
    return out


def basmd_block(ds, ms, block):
    """Triplet BASMD for the retained individuals ``i`` listed in ``block``.

    ``block`` holds dataset indices; only those that appear as ``i`` in the
    matched set contribute.
    """
    sel = np.isin(ms.i, np.asarray(block, dtype=np.int64))
    if not sel.any():
        raise EmptyGroupError("block contains no retained triplet")
    x = np.asarray(ds.x)
    x0, x1, x2 = x[ms.i[sel]], x[ms.i1[sel]], x[ms.i2[sel]]
    return (asmd(x0, x1) + asmd(x0, x2) + asmd(x1, x2)) / 3


@dataclass(frozen=True, eq=False)
class BalanceReport:
    """Block-by-covariate BASMD table and its summaries.

    Rows of ``per_block`` for blocks without any retained triplet are NaN
    and excluded from ``per_covariate_mean``.
    """

    per_block: np.ndarray
    per_covariate_mean: np.ndarray
    average_basmd: float
    threshold_pass: bool
    empty_blocks: tuple
    block_sizes: tuple

    @property
    def effective_k(self):
        return self.per_block.shape[0] - len(self.empty_blocks)

    @property
    def infinite(self):
        return not math.isfinite(self.average_basmd)


def summarize_blocks(per_block, block_sizes=None):
    """Build a :class:`BalanceReport` from a ``K x d`` BASMD matrix.

    NaN rows mark blocks without triplets; they are left out of the average.
    """
    per_block = np.array(per_block, dtype=float)
    if per_block.ndim == 1:
        per_block = per_block[:, None]
    k = per_block.shape[0]
    empty = [b for b in range(k) if np.all(np.isnan(per_block[b]))]
    if len(empty) == k:
        raise EmptyBlocksError("no block contains a matched triplet")
    used = np.abs(per_block[[b for b in range(k) if b not in empty]])
    per_cov = used.mean(axis=0)
    avg = float(per_cov.mean())
    per_block.setflags(write=False)
    per_cov.setflags(write=False)
    sizes = tuple(block_sizes) if block_sizes is not None else ()
    return BalanceReport(per_block, per_cov, avg, bool(np.all(per_cov <= BALANCE_THRESHOLD)),
                         tuple(empty), sizes)


def average_basmd(ds, ms, bp):
    """Average BASMD of a matched set over the blocks of ``bp``.

    Triplets are assigned to blocks by the exposure of the index individual.
    """
    labels = bp.assign(np.asarray(ds.z)[ms.i])
    per_block = np.full((bp.k, ds.d), np.nan)
    sizes = []
    for b in range(bp.k):
        sel = labels == b
        sizes.append(int(sel.sum()))
        if sel.any():
            per_block[b] = basmd_block(ds, ms, ms.i[sel])
    report = summarize_blocks(per_block, sizes)
    if report.empty_blocks:
        warnings.warn(f"blocks {list(report.empty_blocks)} contain no matched triplets and are "
                      f"left out; averaging over {report.effective_k} of {bp.k} blocks",
                      ACDEWarning, stacklevel=2)
    return report


@dataclass(frozen=True)
class Candidate:
    eta: float
    kappa: float
    average_basmd: float
    feasible: bool
    reason: str = ""


@dataclass(frozen=True, eq=False)
class TuneResult:
    grid: tuple
    best: Candidate
    matched: object
    report: BalanceReport

    @property
    def best_params(self):
        return self.best.eta, self.best.kappa


def _evaluate(ds, z0, eta, kappa, bp, on_unmatched, metric, allow_self=True):
    try:
        cfg = MatchConfig(z0, eta, kappa, metric, allow_self)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ACDEWarning)
            ms = find_matches(ds, cfg, on_unmatched)
            if ms.dropped and len(ms.dropped) / ds.n > DROP_WARN_FRACTION:
                return Candidate(eta, kappa, math.nan, False,
                                 f"dropped {len(ms.dropped)}/{ds.n} individuals"), None, None
            report = average_basmd(ds, ms, bp)
    except UnmatchedError as exc:
        return Candidate(eta, kappa, math.nan, False,
                         f"{len(exc.unmatched)} individuals unmatched"), None, None
    except EmptyBlocksError:
        return Candidate(eta, kappa, math.nan, False, "no nonempty block"), None, None
    if report.infinite:
        return Candidate(eta, kappa, report.average_basmd, False,
                         "infinite BASMD (zero-variance block)"), None, None
    return Candidate(eta, kappa, report.average_basmd, True), ms, report


def tune_hyperparams(ds, z0, eta_grid, kappa_grid, bp, on_unmatched=FAIL,
                     metric=SCALED_EUCLIDEAN, threads=1, allow_self=True):
    """Grid search for the (eta, kappa) pair with the smallest average BASMD.

    Every grid point is matched and scored; points whose matching fails, or
    that drop more than 5% of the sample in ``drop`` mode, are infeasible.
    Ties in the score go to the smaller eta, then the smaller kappa.

    Returns
    -------
    TuneResult
        ``grid`` lists candidates in ``eta_grid x kappa_grid`` order.
    """
    eta_grid, kappa_grid = list(eta_grid), list(kappa_grid)
    if not eta_grid or not kappa_grid:
        raise ValueError("eta and kappa grids must be nonempty")
    for eta in eta_grid:
        if not eta > 0:
            raise ValueError(f"eta grid values must be positive, got {eta}")
    for kappa in kappa_grid:
        if not 0 < kappa < 1:
            raise ValueError(f"kappa grid values must lie in (0, 1), got {kappa}")
    if on_unmatched not in (FAIL, DROP):
        raise ValueError(f"on_unmatched must be 'fail' or 'drop', got {on_unmatched!r}")
    points = list(itertools.product(eta_grid, kappa_grid))

    def run(p):
        return _evaluate(ds, z0, p[0], p[1], bp, on_unmatched, metric, allow_self)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, points))
    else:
        results = [run(p) for p in points]
    feasible = [r for r in results if r[0].feasible]
    if not feasible:
        reasons = [(c.eta, c.kappa, c.reason) for c, _, _ in results]
        detail = "; ".join(f"eta={e}, kappa={k}: {why}" for e, k, why in reasons)
        raise NoFeasibleCandidateError(f"no feasible (eta, kappa) candidate: {detail}", reasons)
    best = min(feasible, key=lambda r: (r[0].average_basmd, r[0].eta, r[0].kappa))
    return TuneResult(tuple(r[0] for r in results), best[0], best[1], best[2])


def _fmt(v):
    return repr(float(v))


def write_balance_report(report, fh, covariate_names=None):
    """One row per (block, covariate), then per-covariate means and summary rows."""
    k, d = report.per_block.shape
    names = covariate_names or [f"x{j}" for j in range(1, d + 1)]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["row", "block", "covariate", "value"])
    for b in range(k):
        for j in range(d):
            w.writerow(["block", b + 1, names[j], _fmt(report.per_block[b, j])])
    for j in range(d):
        w.writerow(["covariate_mean", "", names[j], _fmt(report.per_covariate_mean[j])])
    w.writerow(["average_basmd", "", "", _fmt(report.average_basmd)])
    w.writerow(["threshold_pass", "", "", str(report.threshold_pass).lower()])
    w.writerow(["effective_k", "", "", report.effective_k])


def write_tune_trace(result, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["eta", "kappa", "average_basmd", "feasible", "reason"])
    for c in result.grid:
        w.writerow([_fmt(c.eta), _fmt(c.kappa), _fmt(c.average_basmd),
                    str(c.feasible).lower(), c.reason])
