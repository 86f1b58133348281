"""Simulation designs with a kinked exposure-response curve.

Covariates are iid standard normal; the exposure is ``5 + (linear index in
X) + N(0, 4^2)`` and the outcome is ``3 + 15 * (linear index in X) +
(Z - 5)^2 * 1{Z > 5} + N(0, 1)``, so the true ACDE is ``2 (z0 - 5)`` above 5
and 0 below. Each replication draws from its own counter-keyed substream.
"""

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import Dataset
from .errors import ACDEWarning, DegenerateStatisticError, DomainError, InfeasibleDesignError
from .inference import MONTE_CARLO, NORMAL, TWO_SIDED, permutation_test
from .matching import DROP, SCALED_EUCLIDEAN, MatchConfig, estimate_acde, find_matches, pair_weights
from .streams import substream

MAX_EXCLUDED_FRACTION = 0.05

# (exposure coefficients, outcome coefficients) on X_1..X_d
_DESIGNS = {
    2: ((1.0, 1.0), (1.0, -1.0)),
    3: ((1.0, 1.0, 1.0), (1.0, -1.0, 1.0)),
    4: ((1.0, 1.0, 1.0, -0.5), (1.0, -1.0, 2.0, 2.0)),
}


def kink_response(z):
    """Mean exposure-response curve ``(z - 5)^2 * 1{z > 5}``."""
    z = np.asarray(z, dtype=float)
    return np.where(z > 5, (z - 5) ** 2, 0.0)


def true_acde(z0):
    return 2 * (z0 - 5) if z0 > 5 else 0.0


def generate_dataset(d, n, stream, null_outcome=False):
    """Draw one dataset of size ``n`` with ``d`` covariates.

    ``stream`` needs only a ``standard_normal(size)`` method; the draws are
    taken in the order X, exposure noise, outcome noise. ``null_outcome``
    removes the exposure term from the outcome, giving a flat response.
    """
    if d not in _DESIGNS:
        raise DomainError(f"covariate dimension must be 2, 3 or 4, got {d}")
    z_coef, y_coef = (np.array(c) for c in _DESIGNS[d])
    x = np.asarray(stream.standard_normal((n, d)), dtype=float)
    eps_z = 4.0 * np.asarray(stream.standard_normal(n), dtype=float)
    eps_y = np.asarray(stream.standard_normal(n), dtype=float)
    z = 5 + x @ z_coef + eps_z
    y = 3 + 15 * (x @ y_coef) + eps_y
    if not null_outcome:
        y = y + kink_response(z)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ACDEWarning)
        return Dataset.from_arrays(y, z, x)


@dataclass(frozen=True)
class SimDesign:
    d: int
    n: int
    z0_list: tuple
    eta: float
    kappa: float
    reps: int = 500
    alpha: float = 0.05
    seed: int = 0
    metric: str = SCALED_EUCLIDEAN
    null_outcome: bool = False

    def __post_init__(self):
        if self.d not in _DESIGNS:
            raise DomainError(f"covariate dimension must be 2, 3 or 4, got {self.d}")
        if self.reps < 1:
            raise ValueError(f"reps must be >= 1, got {self.reps}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n < 2:
            raise ValueError(f"sample size must be >= 2, got {self.n}")
        if not self.z0_list:
            raise ValueError("z0_list is empty")
        MatchConfig(float(self.z0_list[0]), self.eta, self.kappa, self.metric)

    def replace(self, **changes):
        return SimDesign(**{**asdict(self), **changes})


TABLE1 = SimDesign(d=3, n=3000, z0_list=(4.5, 4.75, 5.0, 5.25, 5.5), eta=0.5, kappa=0.1)
TABLE2 = tuple(
    SimDesign(d=d, n=n, z0_list=(5.0,), eta=eta, kappa=0.1)
    for n, eta in ((3000, 0.5), (6000, 0.45), (10000, 0.4))
    for d in (2, 3, 4)
)


@dataclass(frozen=True)
class SimRow:
    z0: float
    true_acde: float
    mean_estimate: float
    abs_bias: float
    rmse: float
    rejection_rate: float
    reps_used: int
    reps_excluded: int


@dataclass(frozen=True)
class SimReport:
    design: SimDesign
    method: str
    rows: tuple

    def row(self, z0):
        for r in self.rows:
            if r.z0 == z0:
                return r
        raise KeyError(z0)


def analyse(ds, cfg, method=NORMAL, sidedness=TWO_SIDED, mc_reps=10000, seed=None):
    """Match, estimate and test one dataset at one level; ``None`` if nothing matches."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ACDEWarning)
        ms = find_matches(ds, cfg, DROP)
    if ms.n_used == 0:
        return None
    est = estimate_acde(ds, ms)
    pw = pair_weights(ds, ms)
    try:
        p = permutation_test(pw, method, sidedness, mc_reps, seed).p_value
    except DegenerateStatisticError:
        p = 1.0
    return est.acde_hat, p


def replicate(design, r, method=NORMAL, mc_reps=10000):
    """Estimates and p-values of replication ``r`` for every level (NaN when excluded)."""
    ds = generate_dataset(design.d, design.n, substream(design.seed, r), design.null_outcome)
    out = np.full((len(design.z0_list), 2), np.nan)
    for j, z0 in enumerate(design.z0_list):
        cfg = MatchConfig(float(z0), design.eta, design.kappa, design.metric)
        test_seed = design.seed * 1_000_003 + r * 101 + j if method == MONTE_CARLO else None
        res = analyse(ds, cfg, method, mc_reps=mc_reps, seed=test_seed)
        if res is not None:
            out[j] = res
    return out


def run_experiment(design, method=NORMAL, threads=1, mc_reps=10000, progress=None):
    """Repeat the design ``design.reps`` times and summarise each target level.

    A replication whose windows are empty at some level is excluded for that
    level; more than 5% exclusions raise :class:`InfeasibleDesignError`.
    """
    def run(r):
        res = replicate(design, r, method, mc_reps)
        if progress is not None:
            progress(r)
        return res

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_rep = list(pool.map(run, range(design.reps)))
    else:
        per_rep = [run(r) for r in range(design.reps)]
    results = np.stack(per_rep)  # (reps, levels, [estimate, p])
    rows = []
    for j, z0 in enumerate(design.z0_list):
        est, p = results[:, j, 0], results[:, j, 1]
        ok = ~np.isnan(est)
        excluded = int((~ok).sum())
        if excluded > MAX_EXCLUDED_FRACTION * design.reps:
            raise InfeasibleDesignError(
                f"z0={z0}: {excluded} of {design.reps} replications had empty matching windows")
        truth = true_acde(float(z0))
        est, p = est[ok], p[ok]
        mean = math.fsum(est) / est.shape[0]
        rows.append(SimRow(
            z0=float(z0), true_acde=truth, mean_estimate=mean, abs_bias=abs(mean - truth),
            rmse=math.sqrt(math.fsum((est - truth) ** 2) / est.shape[0]),
            rejection_rate=float(np.count_nonzero(p <= design.alpha)) / est.shape[0],
            reps_used=int(est.shape[0]), reps_excluded=excluded))
    return SimReport(design, method, tuple(rows))


def write_sim_report(reports, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["d", "n", "eta", "kappa", "z0", "true_acde", "mean_estimate", "abs_bias",
                "rmse", "rejection_rate", "reps_used", "reps_excluded"])
    for rep in reports:
        dsn = rep.design
        for r in rep.rows:
            w.writerow([dsn.d, dsn.n, repr(dsn.eta), repr(dsn.kappa), repr(r.z0),
                        repr(r.true_acde), repr(r.mean_estimate), repr(r.abs_bias),
                        repr(r.rmse), repr(r.rejection_rate), r.reps_used, r.reps_excluded])


def write_response_curve(fh, start=3.0, stop=7.0, points=401):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["z", "response"])
    for z in np.linspace(start, stop, points):
        w.writerow([repr(float(z)), repr(float(kink_response(z)))])
