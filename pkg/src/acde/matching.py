"""Caliper triplet matching and the matching estimator of the average causal
derivative effect (ACDE).

For a target exposure ``z0`` each individual ``i`` is paired with the
covariate-nearest individual ``i1`` whose exposure lies in the lower window
``[z0 - eta, z0 - kappa*eta]`` and the nearest ``i2`` in the upper window
``[z0 + kappa*eta, z0 + eta]``. Matching is with replacement and ``i`` may
match itself. Distance ties go to the smallest index.
"""

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ACDEWarning, NoTripletsError, UnmatchedError

SCALED_EUCLIDEAN = "scaled-euclidean"
EUCLIDEAN = "euclidean"
PRECOMPUTED = "custom-precomputed"
METRICS = (SCALED_EUCLIDEAN, EUCLIDEAN, PRECOMPUTED)

FAIL = "fail"
DROP = "drop"

DROP_WARN_FRACTION = 0.05
_CHUNK_ELEMENTS = 1 << 21
_KDTREE_MIN_CANDIDATES = 32

BRUTE = "brute"
KDTREE = "kdtree"
AUTO = "auto"


@dataclass(frozen=True)
class MatchConfig:
    z0: float
    eta: float
    kappa: float
    metric: str = SCALED_EUCLIDEAN
    allow_self: bool = True

    def __post_init__(self):
        if not math.isfinite(self.z0):
            raise ValueError(f"z0 must be finite, got {self.z0}")
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be positive and finite, got {self.eta}")
        if not 0 < self.kappa < 1:
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {METRICS}")


def candidate_windows(cfg):
    """Closed lower and upper exposure windows ``((lo, hi), (lo, hi))``."""
    z0, eta, kappa = cfg.z0, cfg.eta, cfg.kappa
    return (z0 - eta, z0 - kappa * eta), (z0 + kappa * eta, z0 + eta)


def window_members(z, window):
    lo, hi = window
    z = np.asarray(z)
    return np.flatnonzero((z >= lo) & (z <= hi))


class MatchTriplet(NamedTuple):
    i: int
    i1: int
    i2: int


@dataclass(frozen=True, eq=False)
class MatchedSet:
    """Retained triplets as parallel index arrays plus the dropped indices."""

    config: MatchConfig
    i: np.ndarray
    i1: np.ndarray
    i2: np.ndarray
    dropped: tuple = ()

    @property
    def n_used(self):
        return int(self.i.shape[0])

    @property
    def triplets(self):
        return [MatchTriplet(int(a), int(b), int(c)) for a, b, c in zip(self.i, self.i1, self.i2)]

    def __len__(self):
        return self.n_used

    def same_matches(self, other):
        return (np.array_equal(self.i, other.i) and np.array_equal(self.i1, other.i1)
                and np.array_equal(self.i2, other.i2) and self.dropped == other.dropped)


def _sq_dist_block(x_rows, x_cand, scale):
    # column-by-column accumulation keeps the floating-point operation order
    # identical to the scalar reference in ``match_reference``
    acc = np.zeros((x_rows.shape[0], x_cand.shape[0]))
    for j in range(x_rows.shape[1]):
        diff = x_cand[None, :, j] - x_rows[:, None, j]
        if scale is not None:
            diff = diff / scale[j]
        acc += diff * diff
    return acc


def _nearest(rows, cand, x, scale, allow_self, distances):
    """Index of the nearest candidate for each row, or -1 if none exists."""
    out = np.full(rows.shape[0], -1, dtype=np.int64)
    if cand.shape[0] == 0:
        return out
    step = max(1, _CHUNK_ELEMENTS // cand.shape[0])
    for s in range(0, rows.shape[0], step):
        r = rows[s:s + step]
        if distances is not None:
            dist = np.array(distances[np.ix_(r, cand)], dtype=float)
        else:
            dist = _sq_dist_block(x[r], x[cand], scale)
        if not allow_self:
            hit = r[:, None] == cand[None, :]
            dist[hit] = np.inf
        # cand is sorted, so argmin's first-occurrence rule is the smallest index
        best = dist.argmin(axis=1)
        ok = np.isfinite(dist[np.arange(r.shape[0]), best])
        out[s:s + step] = np.where(ok, cand[best], -1)
    return out


def _nearest_kdtree(rows, cand, x, scale):
    """Tree search on pre-scaled coordinates, exact rescan where it is ambiguous.

    The tree's distances carry rounding error, so its answer is accepted only
    when the runner-up is clearly farther; every other row is resolved by the
    exact scan, which also applies the smallest-index tie rule.
    """
    if cand.shape[0] < 2:
        return _nearest(rows, cand, x, scale, True, None)
    xs = x / scale if scale is not None else x
    tree = cKDTree(xs[cand])
    dist, pos = tree.query(xs[rows], k=2)
    reach = float(np.abs(xs[cand]).max()) + float(np.abs(xs[rows]).max()) + 1.0
    margin = 1e-9 * reach
    out = cand[pos[:, 0]]
    unsure = np.flatnonzero(dist[:, 1] - dist[:, 0] <= margin)
    if unsure.size:
        out[unsure] = _nearest(rows[unsure], cand, x, scale, True, None)
    return out


def find_matches(ds, cfg, on_unmatched=FAIL, distances=None, threads=1, algorithm=AUTO):
    """Match every individual in ``ds`` to a lower- and an upper-window neighbour.

    Parameters
    ----------
    ds : Dataset
    cfg : MatchConfig
    on_unmatched : {'fail', 'drop'}
        ``fail`` raises :class:`UnmatchedError` listing every individual
        with an empty window; ``drop`` records them in ``dropped`` and warns
        when more than 5% of the sample is lost.
    distances : array_like, shape (N, N), optional
        Required for the ``custom-precomputed`` metric. Only the ordering of
        the entries matters.
    threads : int
        Worker threads; the result does not depend on this value.
    algorithm : {'auto', 'brute', 'kdtree'}
        Neighbour search strategy. All strategies return identical matches;
        ``kdtree`` needs a coordinate metric and ``allow_self``.

    Returns
    -------
    MatchedSet
    """
    if on_unmatched not in (FAIL, DROP):
        raise ValueError(f"on_unmatched must be 'fail' or 'drop', got {on_unmatched!r}")
    x, scale = _metric_inputs(ds, cfg, distances)
    tree_ok = distances is None and cfg.allow_self
    if algorithm == KDTREE and not tree_ok:
        raise ValueError("kdtree search needs a coordinate metric with allow_self=True")
    if algorithm not in (AUTO, BRUTE, KDTREE):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    lower, upper = (window_members(ds.z, w) for w in candidate_windows(cfg))
    n = ds.n
    rows = np.arange(n)
    chunks = np.array_split(rows, max(1, min(threads, n)))

    def search(r, cand):
        use_tree = algorithm == KDTREE or (
            algorithm == AUTO and tree_ok and cand.shape[0] >= _KDTREE_MIN_CANDIDATES)
        if use_tree:
            return _nearest_kdtree(r, cand, x, scale)
        return _nearest(r, cand, x, scale, cfg.allow_self, distances)

    def work(r):
        return search(r, lower), search(r, upper)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    i1 = np.concatenate([p[0] for p in parts])
    i2 = np.concatenate([p[1] for p in parts])
    return _assemble(cfg, i1, i2, on_unmatched, n)


def _metric_inputs(ds, cfg, distances):
    if cfg.metric == PRECOMPUTED:
        if distances is None:
            raise ValueError("the custom-precomputed metric needs a distance matrix")
        distances = np.asarray(distances, dtype=float)
        if distances.shape != (ds.n, ds.n):
            raise ValueError(f"distance matrix must be {ds.n}x{ds.n}, got {distances.shape}")
        return None, None
    if distances is not None:
        raise ValueError(f"a distance matrix is only accepted with metric {PRECOMPUTED!r}")
    scale = np.asarray(ds.covariate_scale) if cfg.metric == SCALED_EUCLIDEAN else None
    return np.asarray(ds.x), scale


def _assemble(cfg, i1, i2, on_unmatched, n):
    missing = (i1 < 0) | (i2 < 0)
    bad = np.flatnonzero(missing)
    if bad.size and on_unmatched == FAIL:
        unmatched = {}
        for i in bad:
            sides = [s for s, v in (("lower", i1[i]), ("upper", i2[i])) if v < 0]
            unmatched[int(i)] = tuple(sides)
        shown = ", ".join(f"{i}({'/'.join(s)})" for i, s in list(unmatched.items())[:20])
        more = "" if len(unmatched) <= 20 else f", ... ({len(unmatched)} total)"
        raise UnmatchedError(
            f"{len(unmatched)} of {n} individuals have an empty matching window at "
            f"z0={cfg.z0}, eta={cfg.eta}, kappa={cfg.kappa}: {shown}{more}", unmatched)
    if bad.size and bad.size / n > DROP_WARN_FRACTION:
        warnings.warn(f"dropped {bad.size} of {n} individuals ({bad.size / n:.1%}) with empty "
                      "matching windows; the estimate averages over the retained ones only",
                      ACDEWarning, stacklevel=3)
    keep = np.flatnonzero(~missing)
    return MatchedSet(cfg, keep.astype(np.int64), i1[keep], i2[keep],
                      tuple(int(i) for i in bad))


def match_reference(ds, cfg, on_unmatched=FAIL, distances=None):
    """Plain O(N^2) linear scan; the oracle for :func:`find_matches`."""
    x, scale = _metric_inputs(ds, cfg, distances)
    (l_lo, l_hi), (u_lo, u_hi) = candidate_windows(cfg)
    z = [float(v) for v in ds.z]
    n = ds.n

    def dist(i, l):
        if distances is not None:
            return float(distances[i][l])
        total = 0.0
        for j in range(x.shape[1]):
            t = float(x[l, j]) - float(x[i, j])
            if scale is not None:
                t = t / float(scale[j])
            total += t * t
        return total

    def scan(i, lo, hi):
        best, best_d = -1, math.inf
        for l in range(n):
            if not lo <= z[l] <= hi or (l == i and not cfg.allow_self):
                continue
            dl = dist(i, l)
            if dl < best_d:
                best, best_d = l, dl
        return best

    i1 = np.array([scan(i, l_lo, l_hi) for i in range(n)], dtype=np.int64)
    i2 = np.array([scan(i, u_lo, u_hi) for i in range(n)], dtype=np.int64)
    return _assemble(cfg, i1, i2, on_unmatched, n)


@dataclass(frozen=True, eq=False)
class EstimateResult:
    acde_hat: float
    per_individual: np.ndarray
    n_used: int


def _require_triplets(ms):
    if ms.n_used == 0:
        raise NoTripletsError(f"no matched triplets at z0={ms.config.z0}")


def individual_slopes(ds, ms):
    _require_triplets(ms)
    y, z = np.asarray(ds.y), np.asarray(ds.z)
    return (y[ms.i2] - y[ms.i1]) / (z[ms.i2] - z[ms.i1])


def estimate_acde(ds, ms):
    """Mean of the matched slopes ``(Y_i2 - Y_i1) / (Z_i2 - Z_i1)``."""
    slopes = individual_slopes(ds, ms)
    slopes.setflags(write=False)
    return EstimateResult(math.fsum(slopes) / slopes.shape[0], slopes, ms.n_used)


@dataclass(frozen=True, eq=False)
class PairWeightTable:
    """Distinct matched pairs ``(k, l)`` with integer multiplicities.

    ``weight = count / n_base`` and ``delta`` is the slope between the pair's
    lower member ``k`` and upper member ``l``. The weighted slope sum equals
    the matching estimate.
    """

    k: np.ndarray
    l: np.ndarray
    counts: np.ndarray
    n_base: int
    delta: np.ndarray

    def __post_init__(self):
        if int(np.sum(self.counts)) != self.n_base:
            raise ValueError("pair counts must sum to n_base")
        if np.any(self.counts <= 0):
            raise ValueError("pair counts must be positive")

    @classmethod
    def from_terms(cls, counts, delta):
        """Table with synthetic pair ids, for working directly on weights and slopes."""
        counts = np.asarray(counts, dtype=np.int64)
        m = counts.shape[0]
        return cls(np.arange(m), np.arange(m, 2 * m), counts, int(counts.sum()),
                   np.asarray(delta, dtype=float))

    @property
    def weights(self):
        return self.counts / self.n_base

    @property
    def terms(self):
        """Per-pair contributions ``w * delta``."""
        return self.weights * self.delta

    @property
    def estimate(self):
        return math.fsum(self.terms)

    @property
    def variance(self):
        """``sum(w^2 delta^2)``, the null variance of the statistic."""
        return math.fsum(self.terms ** 2)

    def __len__(self):
        return int(self.k.shape[0])

    def negated(self):
        return PairWeightTable(self.k, self.l, self.counts, self.n_base, -self.delta)


def pair_weights(ds, ms):
    """Collapse a matched set into its distinct ``(i1, i2)`` pairs."""
    _require_triplets(ms)
    pairs, counts = np.unique(np.stack([ms.i1, ms.i2], axis=1), axis=0, return_counts=True)
    k, l = pairs[:, 0], pairs[:, 1]
    y, z = np.asarray(ds.y), np.asarray(ds.z)
    delta = (y[k] - y[l]) / (z[k] - z[l])
    return PairWeightTable(k, l, counts.astype(np.int64), ms.n_used, delta)


def write_matched_set(ds, ms, fh):
    slopes = individual_slopes(ds, ms) if ms.n_used else []
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["i", "i1", "i2", "z_i1", "z_i2", "slope"])
    for t, s in zip(ms.triplets, slopes):
        w.writerow([t.i, t.i1, t.i2, repr(float(ds.z[t.i1])), repr(float(ds.z[t.i2])),
                    repr(float(s))])


def write_pair_weights(pw, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k", "l", "weight", "delta"])
    for k, l, wt, dl in zip(pw.k, pw.l, pw.weights, pw.delta):
        w.writerow([int(k), int(l), repr(float(wt)), repr(float(dl))])
