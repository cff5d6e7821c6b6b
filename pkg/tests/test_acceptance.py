"""End-to-end acceptance criteria A1-A10.

Each test prints one ``PASS``/``FAIL`` line with the measured value next to
its tolerance, then asserts.  The rate experiments (A3-A5) dominate the
runtime; expect tens of minutes on one core.
"""
import hashlib
import math
import time

import numpy as np
import pytest

from rfmkit.checks import density_suite, geometry_suite
from rfmkit.experiments import (eps_rate_rows, guard_invertibility_check, h_rate_rows, lemma_reports,
                                schedule_comparison, spd_field, spd_gradient_scaling,
                                sphere_bound_reports, two_bump_field)
from rfmkit.geometry import SPD
from rfmkit.metrics import rate_regress
from rfmkit.sampler import batch_sample, make_schedule, step_guard
from rfmkit.bridge.sphere import UniformSpherePrior


@pytest.fixture
def report(capsys):
    def emit(tag, ok, text):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {tag}: {text}")
        return ok
    return emit


def _failures(results):
    return [r.line() for r in results if not r.passed]


def test_a1_geometry(report):
    t0 = time.time()
    res = geometry_suite(n_cases=1000)
    elapsed = time.time() - t0
    bad = _failures(res)
    ok = not bad and elapsed < 60
    report("A1 geometry", ok, f"{len(res) - len(bad)}/{len(res)} checks, {elapsed:.1f}s (limit 60s)")
    assert not bad, bad
    assert elapsed < 60


def test_a2_density(report):
    t0 = time.time()
    res = density_suite()
    elapsed = time.time() - t0
    bad = _failures(res)
    ok = not bad and elapsed < 600
    report("A2 density", ok, f"{len(res) - len(bad)}/{len(res)} checks, {elapsed:.1f}s (limit 600s)")
    assert not bad, bad
    assert elapsed < 600


def test_a3_h_rate(report):
    rows = h_rate_rows()
    fit = rate_regress(rows, "h")
    resolved = all(r.tv_hat >= 3 * r.std_err for r in rows)
    ok = 0.8 <= fit.slope <= 1.2 and fit.r2 >= 0.95 and resolved
    tvs = " ".join(f"{r.tv_hat:.2e}" for r in rows)
    report("A3 h-rate", ok, f"slope={fit.slope:.3f} in [0.8,1.2] r2={fit.r2:.3f} >= 0.95 "
           f"tv>=3se={resolved} tv=[{tvs}]")
    assert ok


def test_a4_eps_rate(report):
    rows = eps_rate_rows()
    fit = rate_regress(rows, "eps")
    ok = 0.8 <= fit.slope <= 1.2
    report("A4 eps-rate", ok, f"slope={fit.slope:.4f} in [0.8,1.2] r2={fit.r2:.3f}")
    assert ok


def test_a5_schedule_comparison(report):
    cmp = schedule_comparison()
    ratios = " ".join(f"T={T}:{r:.2f}" for T, r in sorted(cmp.ratios.items()))
    ok = abs(cmp.exponent - 1.0) <= 0.3
    report("A5 schedules", ok, f"exponent={cmp.exponent:.3f} in 1+-0.3 r2={cmp.r2:.3f} ratios {ratios}")
    assert ok


@pytest.mark.parametrize("d", [3, 4])
def test_a6_bounds(report, d):
    reps = sphere_bound_reports(d)
    worst = max(r.max_ratio for r in reps)
    flagged = sum(len(r.flagged) for r in reps)
    per_q = " ".join(f"{r.quantity}={r.max_ratio:.2g}" for r in reps)
    ok = worst <= 1.0 and flagged == 0 and all(len(r.rows) == 10 * 50 for r in reps)
    report(f"A6 bounds d={d}", ok, f"max ratio={worst:.3g} <= 1 flagged={flagged} {per_q}")
    assert ok


def test_a7_guard(report):
    chk = guard_invertibility_check(d=2, n_checks=1000)
    spd = step_guard(SPD(2).descriptor, 3.0, 2.0)
    ok = chk.min_singular > 1e-3 and not chk.report.violated and spd.terms[0] == math.inf
    report("A7 guard", ok, f"h={chk.h:.4g} min singular={chk.min_singular:.3g} > 1e-3 over {chk.n_checks} "
           f"points; SPD R/B term={spd.terms[0]}")
    assert ok


def test_a8_tv_derivative(report):
    reps = lemma_reports(d=2, eps=0.1)
    parts = " ".join(f"t={r.t}: {r.lhs_fd:.4f}<={r.rhs_bound:.4f}" for r in reps)
    ok = len(reps) == 3 and all(r.holds for r in reps)
    report("A8 TV derivative", ok, f"lhs <= rhs + 3se at all t: {parts}")
    assert ok


def test_a9_spd_pipeline(report):
    field = spd_field()
    # completes = within the sampler's default failure budget, otherwise this raises
    res = batch_sample(field, make_schedule("constant", 0.9, n_steps=50), field.prior, 2000, seed=0,
                       chunk_size=500)
    pts = res.ok_points
    spd_ok = bool(np.all(np.linalg.eigvalsh(pts) > 0))
    scaling = spd_gradient_scaling(field)
    ok = (res.failed.sum() <= 1e-3 * len(res.failed) and spd_ok
          and abs(scaling.slope - 1.0) <= 0.4)
    report("A9 SPD", ok, f"slope={scaling.slope:.3f} in 1+-0.4 r2={scaling.r2:.3f} "
           f"failures={int(res.failed.sum())} min ESS={field.last_min_ess:.0f}")
    assert ok


def test_a10_determinism(report):
    bridge, field = two_bump_field(3)
    sched = make_schedule("polynomial", 0.9, eta=0.05)
    prior = UniformSpherePrior(3)
    digests = {}
    for backend in ("auto", "generic"):
        for w in (1, 4, 8):
            for _ in range(2):
                res = batch_sample(field, sched, prior, 5000, seed=11, workers=w, chunk_size=1024,
                                   track_logdet=True, backend=backend)
                h = hashlib.sha256(res.points.tobytes() + res.logdet.tobytes()).hexdigest()
                digests.setdefault(backend, set()).add(h)
    ok = all(len(v) == 1 for v in digests.values())
    report("A10 determinism", ok, f"distinct digests per backend over 2 runs x workers 1/4/8: "
           f"{ {k: len(v) for k, v in digests.items()} }")
    assert ok
