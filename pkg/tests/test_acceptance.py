"""Acceptance criteria A1-A10.

Each test prints one line ``A<n> PASS|FAIL <measured values> (<runtime> s, budget <b> s)``
and then asserts the same condition. Run on its own with

    pytest tests/test_acceptance.py -v
"""
import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from bdfqed.bdf_operators import Grid, contour_kernel, gaussian_orbital, inequality_suite, kato_sides, q10_kernel, tbfs_growth
from bdfqed.cli import dispatch
from bdfqed.clifford import ODD, _random_ball, all_generator_words, calcul_identity_check, furry_trace_check, sign_array
from bdfqed.dressed_dirac import PhysicalParams, dress, free_dirac
from bdfqed.fixed_point import lattice_problem, observed_charge, solve
from bdfqed.nonrel_hf import binding_test, concavity_probe, pekar_scaling, scf_minimize
from bdfqed.vacuum_polarization import assemble, compute_B

TWO_OVER_3PI = 2 / (3 * math.pi)


def _report(request, name, ok, detail, elapsed, budget=None):
    within = budget is None or elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    timing = f"{elapsed:.1f} s" + ("" if budget is None else f", budget {budget:g} s")
    line = f"{name} {status} {detail} ({timing})"
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None:
        tr.write_line("")
        tr.write_line(line)
    else:
        print(line)
    return ok and within


def test_A1_furry_exactness(request):
    t0 = time.perf_counter()
    worst_float, nonzero_exact, odd = 0.0, 0, 0
    for idx, word in all_generator_words(5):
        if len(idx) % 2 == 0:
            continue
        odd += 1
        worst_float = max(worst_float, abs(furry_trace_check(word).trace))
        nonzero_exact += furry_trace_check(word, exact=True).trace != 0
    dt = time.perf_counter() - t0
    ok = odd == 4 + 4**3 + 4**5 and worst_float < 1e-12 and nonzero_exact == 0
    assert _report(request, "A1", ok, f"odd words={odd} max|tr|={worst_float:.1e} exact nonzero={nonzero_exact}", dt, 10)


def test_A2_calcul_identities(request, dressed):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 1000
    p, p1, q = (_random_ball(rng, n, dressed.lam) for _ in range(3))
    sp, sp1, sq = (sign_array(x, dressed) for x in (p, p1, q))
    v = rng.normal(size=(n, 2)) + 1j * rng.normal(size=(n, 2))
    worst_res, worst_tr, all_odd = 0.0, 0.0, True
    for i in range(n):
        r = calcul_identity_check(sp[i], sp1[i], sq[i], v[i, 0], v[i, 1])
        worst_res = max(worst_res, r.residual)
        worst_tr = max(worst_tr, max(abs(t) for t in r.traces))
        all_odd &= all(g == ODD for g in r.gradings)
    dt = time.perf_counter() - t0
    ok = worst_res <= 1e-12 and worst_tr < 1e-12 and all_odd
    assert _report(request, "A2", ok, f"residual={worst_res:.1e} max|tr|={worst_tr:.1e} odd={all_odd}", dt, 10)


def test_A3_renormalization_slope(request):
    t0 = time.perf_counter()
    lams = np.array([1e2, 1e3, 1e4])
    free = np.polyfit(np.log(lams), [compute_B(0.0, free_dirac(lam)) for lam in lams], 1)[0]
    dressed_b = [compute_B(0.0, dress(PhysicalParams(0.02, lam))) for lam in lams]
    dressed_slope = np.polyfit(np.log(lams), dressed_b, 1)[0]
    dt = time.perf_counter() - t0
    rel_free = abs(free / TWO_OVER_3PI - 1)
    rel_dressed = abs(dressed_slope / TWO_OVER_3PI - 1)
    ok = rel_free <= 0.05 and rel_dressed <= 0.05
    detail = f"slope free={free:.4f} ({rel_free:.1%}) dressed a=0.02={dressed_slope:.4f} ({rel_dressed:.1%}) target {TWO_OVER_3PI:.4f} tol 5%"
    assert _report(request, "A3", ok, detail, dt, 300)


def test_A4_observed_charge(request):
    t0 = time.perf_counter()
    params = PhysicalParams(0.02, 1e3)
    rf = assemble(dress(params), params)
    q = observed_charge(rf, 1.0, 0.0)
    z3 = 1 / (1 + rf.f0)
    dt = time.perf_counter() - t0
    rel = abs(q / z3 - 1)
    assert _report(request, "A4", rel <= 0.01, f"charge={q:.6f} 1/(1+f0)={z3:.6f} rel={rel:.1e} tol 1e-2", dt, 120)


def test_A5_dressed_operator(request):
    t0 = time.perf_counter()
    rows = []
    for alpha in (0.005, 0.02, 0.05):
        for lam in (1e2, 1e3, 1e4):
            params = PhysicalParams(alpha, lam)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                d = dress(params)
            mass_ok = (not params.in_regime) or d.m == d.g0[0]
            rows.append((d.gstar_report()["ok"], d.iterations, d.residual, mass_ok))
    dt = time.perf_counter() - t0
    ok = all(g and it <= 50 and res < 1e-10 and m for g, it, res, m in rows)
    detail = (
        f"gstar ok {sum(r[0] for r in rows)}/9 max iter={max(r[1] for r in rows)} "
        f"max residual={max(r[2] for r in rows):.1e} m=g0(0) {sum(r[3] for r in rows)}/9"
    )
    assert _report(request, "A5", ok, detail, dt, 120)


def test_A6_q10_kernel_and_growth(request, dressed):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    p, q = _random_ball(rng, 100, dressed.lam), _random_ball(rng, 100, dressed.lam)
    X = rng.normal(size=(100, 4, 4)) + 1j * rng.normal(size=(100, 4, 4))
    a = q10_kernel(p, q, X, dressed)
    b = contour_kernel(p, q, X, dressed)
    rel = float((np.abs(a - b).max(axis=(1, 2)) / np.abs(a).max(axis=(1, 2))).max())
    growth = tbfs_growth(0.02)
    dt = time.perf_counter() - t0
    expo = growth["exponent"]
    ok = rel <= 1e-6 and 0.3 <= expo <= 0.7
    detail = (
        f"q10 vs contour rel={rel:.1e} tol 1e-6; growth exponent={expo:.3f} target [0.3, 0.7] "
        f"norms={['%.4f' % x for x in growth['norms']]}"
    )
    assert _report(request, "A6", ok, detail, dt, 300)


def test_A7_inequalities(request):
    t0 = time.perf_counter()
    rep = inequality_suite(Grid(48, 24.0), samples=1000, rng=7, kernel_samples=0)
    g = Grid(64, 20.0)
    lhs, rhs = kato_sides(g, gaussian_orbital(g, 1.0))
    dt = time.perf_counter() - t0
    err_l, err_r = abs(lhs - 2 / math.sqrt(math.pi)), abs(rhs - math.sqrt(math.pi))
    ok = rep.kato_violations == 0 and rep.hardy_violations == 0 and err_l <= 1e-6 and err_r <= 1e-6
    detail = (
        f"violations kato={rep.kato_violations} hardy={rep.hardy_violations} over {rep.samples}; "
        f"worst ratios {rep.kato_worst:.3f} {rep.hardy_worst:.3f}; gaussian errors {err_l:.1e} {err_r:.1e} tol 1e-6"
    )
    assert _report(request, "A7", ok, detail, dt, 60)


def test_A8_contraction(request):
    ratios, traces, times = [], [], []
    for alpha in (0.005, 0.01, 0.02):
        t0 = time.perf_counter()
        ctx, N = lattice_problem(alpha, 1e3)
        res = solve(ctx, N)
        times.append(time.perf_counter() - t0)
        assert res.converged
        ratios.append(res.contraction_ratio)
        traces.append(abs(res.trace0_gamma))
    ok = all(0 < r < 1 for r in ratios) and ratios[0] < ratios[1] < ratios[2] and max(traces) < 1e-6
    ok = ok and max(times) < 300
    detail = f"ratios={['%.4f' % r for r in ratios]} max|Tr0|={max(traces):.1e} per-alpha times={['%.0f' % t for t in times]} s"
    assert _report(request, "A8", ok, detail, sum(times))


def test_A9_nonrelativistic_limit(request):
    t0 = time.perf_counter()
    e_h = scf_minimize(1.0, 1.0, 0.0).energy
    pek = pekar_scaling((0.05, 0.1, 0.2))
    bind = binding_test(2.0, 2.0, 0.05)
    conc = concavity_probe(2.0, 0.05, M_grid=(1.0, 1.5, 2.0))
    dt = time.perf_counter() - t0
    second = conc["second_differences"][0]
    ok = abs(e_h + 0.5) <= 5e-3 and pek["spread"] < 0.02 and bind["gap"] > 0 and second <= 1e-4
    detail = (
        f"E_H={e_h:.5f} pekar spread={pek['spread']:.1e} tol 2e-2 gap={bind['gap']:.3e} "
        f"second difference={second:.3e}"
    )
    assert _report(request, "A9", ok, detail, dt, 600)


CLI_RUNS = [
    ["dress", "--nodes", "128"],
    ["uehling", "--jmax", "1"],
    ["renorm", "--alpha", "0.01,0.02"],
    ["scf-run", "--max-iter", "20"],
    ["nrhf", "--Z", "2", "--M", "2", "--a", "0.05"],
    ["furry-check", "--trials", "200"],
    ["inequalities", "--samples", "20", "--kernels", "2", "--grid-n", "32", "--extent", "16"],
]


def _run_dir(root: Path, threads: int, monkeypatch) -> dict:
    root.mkdir()
    monkeypatch.chdir(root)
    for argv in CLI_RUNS:
        assert dispatch(argv + ["--seed", "11", "--threads", str(threads), "--out", f"{argv[0]}.out"]) == 0
    files = {}
    for f in sorted(root.iterdir()):
        if f.name.endswith(".manifest.json"):
            m = json.loads(f.read_text())
            m.pop("wall_time_s")
            m.pop("threads")
            files[f.name] = json.dumps(m, sort_keys=True).encode()
        else:
            files[f.name] = f.read_bytes()
    return files


def test_A10_reproducibility(request, tmp_path, monkeypatch):
    t0 = time.perf_counter()
    one = _run_dir(tmp_path / "t1", 1, monkeypatch)
    two = _run_dir(tmp_path / "t4", 4, monkeypatch)
    dt = time.perf_counter() - t0
    differ = sorted(k for k in one.keys() | two.keys() if one.get(k) != two.get(k))
    ok = not differ and len(one) >= 2 * len(CLI_RUNS)
    detail = f"{len(one)} files from {len(CLI_RUNS)} subcommands, threads 1 vs 4, differing={differ}"
    assert _report(request, "A10", ok, detail, dt)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
