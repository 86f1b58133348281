"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary before asserting,
so the full report is printed even when a criterion fails. Tolerances are the
stated ones; nothing is loosened to make a criterion pass.
"""

import functools
import math
import warnings
from fractions import Fraction

import numpy as np
import pytest

from acde.cli import main
from acde.dataset import write_csv
from acde.errors import ACDEWarning, NoTripletsError
from acde.inference import (EXACT, GREATER, MONTE_CARLO, NORMAL, SIDES, binomial_band,
                            lindeberg_diagnostic, permutation_test, permutation_test_exact,
                            permutation_test_mc, permutation_test_normal)
from acde.matching import (DROP, KDTREE, MatchConfig, PairWeightTable, estimate_acde,
                           find_matches, match_reference, pair_weights)
from acde.sensitivity import DEFAULT_GAMMA_GRID, sensitivity_pvalues
from acde.simulation import TABLE1, TABLE2, SimDesign, generate_dataset, run_experiment
from acde.streams import substream

import conftest
from conftest import random_dataset

pytestmark = pytest.mark.slow


def record(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# Table 1 reference values per level: (abs bias, RMSE, rejection rate)
TABLE1_REFERENCE = {
    4.5: (0.142, 1.758, 0.064),
    4.75: (0.182, 1.595, 0.050),
    5.0: (0.416, 1.794, 0.088),
    5.25: (0.208, 1.798, 0.100),
    5.5: (0.156, 1.886, 0.148),
}


def test_criterion_1_table1():
    report = run_experiment(TABLE1)
    failures, parts = [], []
    for row in report.rows:
        bias, rmse, rej = TABLE1_REFERENCE[row.z0]
        checks = {
            "bias": abs(row.abs_bias - bias) <= 0.20,
            "rmse": abs(row.rmse - rmse) <= 0.20 * rmse,
            "rejection": abs(row.rejection_rate - rej) <= 0.05,
        }
        failures += [f"{name}@{row.z0}" for name, ok in checks.items() if not ok]
        parts.append(f"z0={row.z0} bias={row.abs_bias:.3f}/{bias} rmse={row.rmse:.3f}/{rmse} "
                     f"rej={row.rejection_rate:.3f}/{rej}")
    ok = not failures
    detail = "; ".join(parts) + ("" if ok else f" | out of tolerance: {', '.join(failures)}")
    assert record(1, ok, f"Table 1 (measured/reference) {detail}"), detail


@functools.lru_cache(maxsize=None)
def table2(reps):
    return {(d.n, d.d): run_experiment(d.replace(reps=reps)).rows[0] for d in TABLE2}


def _trends(cells):
    ns, ds = (3000, 6000, 10000), (2, 3, 4)
    bad = []
    for d in ds:
        r = [cells[n, d].rmse for n in ns]
        if not (r[0] > r[1] > r[2]):
            bad.append(f"RMSE not decreasing in N for d={d}: {np.round(r, 3).tolist()}")
    for n in ns:
        r = [cells[n, d].rmse for d in ds]
        if not (r[0] < r[1] < r[2]):
            bad.append(f"RMSE not increasing in d for N={n}: {np.round(r, 3).tolist()}")
    return bad


def test_criterion_2_table2_trends():
    cells = table2(500)
    bad = _trends(cells)
    anchor = cells[10000, 2]
    if abs(anchor.rmse - 0.403) > 0.25 * 0.403:
        bad.append(f"(10000, d=2) RMSE {anchor.rmse:.3f} outside 0.403 +-25%")
    if abs(anchor.rejection_rate - 0.060) > 0.04:
        bad.append(f"(10000, d=2) rejection {anchor.rejection_rate:.3f} outside 0.060 +-0.04")
    grid = " ".join(f"N={n},d={d}:{c.rmse:.3f}" for (n, d), c in sorted(cells.items()))
    detail = f"RMSE {grid}; anchor rmse={anchor.rmse:.3f} rej={anchor.rejection_rate:.3f}"
    assert record(2, not bad, detail + ("" if not bad else " | " + "; ".join(bad))), bad


def test_criterion_2_smoke_200_reps():
    bad = _trends(table2(200))
    assert record("2 (200-rep smoke)", not bad,
                  "monotone trends hold" if not bad else "; ".join(bad)), bad


def test_criterion_3_mc_matches_exact():
    rng = np.random.default_rng(20260101)
    worst, misses = 0.0, []
    for t in range(100):
        n = int(rng.integers(1, 16))
        pw = PairWeightTable.from_terms(rng.integers(1, 5, n), rng.normal(0.3, 1, n))
        for side in SIDES:
            exact = permutation_test_exact(pw, side).p_value
            mc = permutation_test_mc(pw, 10**6, seed=1000 + t, sidedness=side).p_value
            band = binomial_band(exact, 10**6)
            if abs(mc - exact) > band:
                misses.append((t, side, exact, mc))
            if band > 0:
                worst = max(worst, 3 * abs(mc - exact) / band)
    detail = f"300 comparisons, {len(misses)} outside the 3-sigma band, worst {worst:.2f} sigma"
    assert record(3, not misses, detail), misses[:5]


def test_criterion_4_normal_vs_mc():
    rng = np.random.default_rng(404)
    worst, n_tables = 0.0, 0
    for t, (n, shift) in enumerate([(500, 0.0), (500, 0.06), (800, 0.1), (1000, 0.03),
                                    (1500, 0.05), (2000, -0.04)]):
        # redraw until the table meets the criterion's Lindeberg precondition
        while True:
            pw = PairWeightTable.from_terms(rng.integers(1, 4, n), rng.normal(shift, 1, n))
            if lindeberg_diagnostic(pw) < 0.02:
                break
        n_tables += 1
        for side in SIDES:
            normal = permutation_test_normal(pw, side).p_value
            mc = permutation_test_mc(pw, 10**5, seed=t, sidedness=side).p_value
            worst = max(worst, abs(normal - mc))
    ok = worst <= 0.02
    assert record(4, ok, f"{n_tables} tables x 3 sides, max |normal - MC| = {worst:.4f}"), worst


def test_criterion_5_sensitivity():
    bad = []
    rng = np.random.default_rng(55)
    for t in range(10):
        n = int(rng.integers(3, 14))
        pw = PairWeightTable.from_terms(rng.integers(1, 4, n), np.abs(rng.normal(0.5, 1, n)))
        for method, kw in ((EXACT, {}), (NORMAL, {}), (MONTE_CARLO, {"reps": 20000, "seed": t})):
            sens = sensitivity_pvalues(pw, 1.0, method, **kw)
            perm = permutation_test(pw, method, GREATER, **kw).p_value
            if not (sens.p_upper == perm and sens.p_lower == perm):
                bad.append(f"gamma=1 {method} table {t}: {sens.p_upper} vs {perm}")
        for method, kw in ((NORMAL, {}), (MONTE_CARLO, {"reps": 20000, "seed": t})):
            curve = [sensitivity_pvalues(pw, g, method, **kw) for g in DEFAULT_GAMMA_GRID]
            for a, b in zip(curve, curve[1:]):
                slack = 0.0
                if method == MONTE_CARLO:
                    slack = binomial_band(a.p_upper, 20000) + binomial_band(b.p_upper, 20000)
                if b.p_upper < a.p_upper - slack or b.p_lower > a.p_lower + slack:
                    bad.append(f"{method} table {t} not monotone at gamma={b.gamma}")
                    break
    single = sensitivity_pvalues(PairWeightTable.from_terms([1], [2.0]), 3.0, EXACT).p_upper
    triple = sensitivity_pvalues(PairWeightTable.from_terms([1, 1, 1], [1.5, 0.9, 0.6]),
                                 2.0, EXACT).p_upper
    if abs(single - 0.75) > 1e-12:
        bad.append(f"single-pair fixture {single}")
    if abs(triple - 8 / 27) > 1e-12:
        bad.append(f"3-pair fixture {triple}")
    detail = (f"gamma=1 reduction on 10 tables x 3 methods, monotone over 1.00..2.00, "
              f"fixtures {single:.6f} and {triple:.6f}")
    assert record(5, not bad, detail if not bad else "; ".join(bad[:5])), bad


def test_criterion_6_estimator_algebra():
    rng = np.random.default_rng(66)
    worst, bad_sums, done = 0.0, 0, 0
    while done < 1000:
        ds = random_dataset(rng, int(rng.integers(5, 120)), int(rng.integers(1, 5)),
                            duplicates=bool(rng.integers(2)))
        cfg = MatchConfig(float(rng.uniform(3, 7)), float(rng.uniform(0.5, 3)),
                          float(rng.uniform(0.05, 0.6)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ACDEWarning)
            try:
                ms = find_matches(ds, cfg, DROP)
                est = estimate_acde(ds, ms).acde_hat
            except NoTripletsError:
                continue
        pw = pair_weights(ds, ms)
        worst = max(worst, abs(pw.estimate - est) / max(abs(est), 1e-300))
        if sum(Fraction(int(c), pw.n_base) for c in pw.counts) != 1:
            bad_sums += 1
        done += 1
    ok = worst <= 1e-12 and bad_sums == 0
    detail = f"1000 matched sets, max relative gap {worst:.2e}, weight sums != 1: {bad_sums}"
    assert record(6, ok, detail), detail


def test_criterion_7_matching_oracle():
    rng = np.random.default_rng(77)
    mismatches = 0
    for t in range(100):
        ds = random_dataset(rng, int(rng.integers(2, 51)), int(rng.integers(1, 5)),
                            duplicates=True, z_grid=bool(t % 2))
        cfg = MatchConfig(float(rng.uniform(3, 7)), float(rng.uniform(1, 4)),
                          float(rng.uniform(0.05, 0.5)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ACDEWarning)
            try:
                ref = match_reference(ds, cfg, DROP)
            except NoTripletsError:
                ref = None
            for threads in (1, 4):
                try:
                    fast = find_matches(ds, cfg, DROP, threads=threads, algorithm=KDTREE)
                except NoTripletsError:
                    fast = None
                same = (ref is None and fast is None) or (
                    ref is not None and fast is not None and fast.same_matches(ref))
                mismatches += not same
    ok = mismatches == 0
    assert record(7, ok, f"100 datasets (N<=50, duplicated covariates), "
                         f"{mismatches} mismatches vs linear scan"), mismatches


def test_criterion_8_null_calibration():
    design = SimDesign(d=3, n=3000, z0_list=(5.0,), eta=0.5, kappa=0.1, reps=500,
                       null_outcome=True, seed=8)
    rate = run_experiment(design).rows[0].rejection_rate
    ok = 0.03 <= rate <= 0.08
    assert record(8, ok, f"null two-sided rejection at alpha=0.05: {rate:.3f} "
                         f"(normal approximation, 500 reps)"), rate


def test_criterion_9_cli_determinism(tmp_path, capsys):
    data = tmp_path / "data.csv"
    write_csv(generate_dataset(3, 400, substream(909)), data)
    common = ["-i", str(data), "--z0", "5", "--eta", "1", "--kappa", "0.1"]
    commands = {
        "match": ["match", *common],
        "tune": ["tune", "-i", str(data), "--z0", "5", "--eta-grid", "0.75,1,1.5",
                 "--kappa-grid", "0.1,0.2"],
        "balance": ["balance", *common],
        "test": ["test", *common, "--method", "mc", "--reps", "20000", "--seed", "3"],
        "sensitivity": ["sensitivity", *common, "--reps", "5000", "--seed", "3",
                        "--gamma-grid", "1:1.5:0.1"],
        "simulate": ["simulate", "--dim", "2", "--n", "300", "--z0-grid", "4.5:5.5:0.5",
                     "--reps", "6", "--method", "mc", "--mc-reps", "2000", "--seed", "4"],
    }
    differing = []
    for name, argv in commands.items():
        outputs = []
        for run, threads in enumerate(("1", "1", "8")):
            out = tmp_path / f"{name}-{run}.csv"
            assert main([*argv, "--threads", threads, "-o", str(out)]) == 0, name
            outputs.append(out.read_bytes())
        if not outputs[0] == outputs[1] == outputs[2]:
            differing.append(name)
    capsys.readouterr()
    ok = not differing
    detail = f"{len(commands)} subcommands x (repeat, --threads 8)" + (
        "" if ok else f", differing: {differing}")
    assert record(9, ok, detail), differing
