"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py).
"""
import math
import time

import numpy as np
import pytest

from metricbv import scenarios as S
from metricbv.certify import certify, image_volume, overlap_exponent
from metricbv.hausdorff import lemma37_pipeline
from metricbv.modulus import curve_integral, gamma_A_family, horizontal_family, p_modulus
from metricbv.numbers import L_f, RadonWeight, SampledMapping, asymptotic_field
from metricbv.space import doubling_constant_estimate, inner_region, uniform_grid

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


# ---------------------------------------------------------------- 1: Dirac line

@pytest.fixture(scope="module")
def dirac():
    t0 = time.perf_counter()
    sc = S.generate("dirac-5.2", 0.005)
    gen_sup = S.measure(sc, "Lip_kappa2_sup")
    # plain Lip at a point on the atom row, at the smallest schedule radius and half of it
    x = sc.space.index_of((0.5, 0.5))
    r = float(sc.schedule.radii[-1])
    growth = (L_f(sc.mapping, x, r / 2) / (r / 2)) / (L_f(sc.mapping, x, r) / r)
    return gen_sup, growth, r, time.perf_counter() - t0


def test_criterion_1_dirac_generalized_bound(dirac):
    gen_sup, growth, r, secs = dirac
    ok_bound = gen_sup <= 2 * math.pi * 1.15 and secs <= 60
    ok_growth = growth >= 2.0
    record(1, ok_bound and ok_growth,
           f"sup Lip^(kappa,2) = {gen_sup:.4f} <= {2 * math.pi * 1.15:.4f}; plain Lip growth at r={r:g} -> r/2: "
           f"{growth:.4f} (needs >= 2, see ledger); {secs:.1f} s")
    assert gen_sup <= 2 * math.pi * 1.15
    assert secs <= 60


@pytest.mark.xfail(strict=True, reason="L_f(x,r)/r = (1+r)/r on the atom row, so halving r multiplies "
                                       "it by (2+r)/(1+r) < 2; recorded in the decisions ledger")
def test_criterion_1_plain_lip_doubles(dirac):
    _, growth, _, _ = dirac
    assert growth >= 2.0


def test_criterion_1_growth_matches_closed_form(dirac):
    _, growth, r, _ = dirac
    assert growth == pytest.approx((2 + r) / (1 + r), rel=1e-12)


# ---------------------------------------------------------------- 2: separable example

def test_criterion_2_separable():
    t0 = time.perf_counter()
    sc = S.generate("separable-5.4", 0.005)
    Ha = S.measure(sc, "H_a2_sup")
    br = S.distortion_bracket(sc)
    secs = time.perf_counter() - t0
    ok = Ha <= 2 * math.pi * 1.15 and br["ok"] and secs <= 60
    record(2, ok, f"sup H^(a,2) = {Ha:.4f} <= {2 * math.pi * 1.15:.4f}; bracket holds at "
                  f"{br['fraction']:.3f} of {br['points']} points; {secs:.1f} s")
    assert ok


# ---------------------------------------------------------------- 3: strips obstruction

def jump_mass_oracle(j, J, M=1.0):
    """Closed-form jump mass seen by level j: for every strip boundary x1 = 1/m
    (m = 2..J+1) inside the region dist > (M+1)/j and with both neighbouring
    strips at least 1/j wide, |jump| times the boundary's length there.
    Across 1/m one side is reflected, so the jump is (2 - 1/m) - 1/m."""
    d = (M + 1) / j
    tot = 0.0
    for m in range(2, J + 2):
        b = 1.0 / m
        if not d < b < 1 - d:
            continue
        if 1.0 / (m * (m + 1)) < 1.0 / j:
            continue
        tot += (2 - 2 * b) * (1 - 2 * d)
    return tot


def test_criterion_3_strips():
    from metricbv.certify import equi_integrability_probe
    sc = S.generate("strips-3.1", 0.002)
    cert = S.strips_energies(sc)
    e = {r["j"]: r["energy"] for r in cert.energy_table}
    growth = e[32] / e[8]
    probe = equi_integrability_probe(sc.space, cert._sequence)
    J = sc.params["strips"]
    oracle = {j: jump_mass_oracle(j, J) for j in (8, 16, 32)}
    cache = {}
    lip = S.measure(sc, "Lip_off_boundaries_range", cache)
    H = S.measure(sc, "H_off_boundaries_range", cache)
    fields_ok = all(0.9 <= v <= 1.1 for v in lip + H)
    ok = (growth >= 1.5 and probe.non_decaying and fields_ok
          and all(e[j] >= oracle[j] for j in oracle) and oracle[32] / oracle[8] >= 1.5)
    record(3, ok, f"energy j=8 {e[8]:.2f} -> j=32 {e[32]:.2f} (x{growth:.2f}); jump-mass oracle "
                  f"{oracle[8]:.3f} -> {oracle[32]:.3f}; probe growth {probe.growth[-1]:.2f}; "
                  f"Lip off boundaries {lip[0]:.3f}..{lip[1]:.3f}, H {H[0]:.3f}..{H[1]:.3f}")
    assert ok


# ---------------------------------------------------------------- 4: null-set density construction

def test_criterion_4_lemma37():
    sp = uniform_grid([[0, 0.3]] * 3, 0.01)
    c = sp.coords
    seg = np.flatnonzero((np.abs(c[:, 0] - 0.15) < 1e-9) & (np.abs(c[:, 1] - 0.15) < 1e-9)
                         & (c[:, 2] > 0.1) & (c[:, 2] < 0.2 + 1e-9))
    Cd = doubling_constant_estimate(sp, [0.02, 0.04], inner_region(sp, 0.1).members).C_hat
    lines, ok = [], True
    for eps in (0.2, 0.05):
        nd = lemma37_pipeline(sp, seg, 1, eps)
        fam = gamma_A_family(sp, seg, 40, max(nd.floor, 4 * sp.resolution), seed=11)
        worst = min(curve_integral(nd.rho, cu) for cu in fam.curves)
        good = nd.energy <= Cd * eps * 1.1 and worst >= 0.95
        ok &= good
        lines.append(f"eps={eps}: energy {nd.energy:.4g} <= {Cd * eps * 1.1:.4g}, min curve integral {worst:.3f}")
    record(4, ok, "; ".join(lines))
    assert ok


# ---------------------------------------------------------------- 5: modulus solver

def test_criterion_5_modulus():
    lines, ok = [], True
    for a in (1, 2, 4):
        sp = uniform_grid([[0, a], [0, 1]], 0.02)
        res = p_modulus(sp, horizontal_family(sp), 2)
        good = res.converged and abs(res.value - 1 / a) <= 0.05 / a
        ok &= good
        lines.append(f"a={a}: {res.value:.4f} vs {1 / a:.4f}")
    sp = uniform_grid([[0, 1], [0, 1]], 0.05)
    tol = 1e-7
    worst = -math.inf
    for seed in range(20):
        A = gamma_A_family(sp, np.arange(sp.n), 6, 0.2, seed=2 * seed)
        B = gamma_A_family(sp, np.arange(sp.n), 6, 0.2, seed=2 * seed + 1)
        va = p_modulus(sp, A, 2, tol=tol).value
        vab = p_modulus(sp, A + B, 2, tol=tol).value
        worst = max(worst, (va - vab) / max(1.0, vab))
    ok &= worst <= 2 * tol
    lines.append(f"union monotone on 20 pairs, worst relative excess {worst:.2e}")
    record(5, ok, "; ".join(lines))
    assert ok


# ---------------------------------------------------------------- 6: certificate arithmetic

def oracle_bound(theorem, comp, prm, cst):
    """The bounds written out from the constant definitions, independently of the package."""
    Cd, CO = cst["C_d"], cst["C_Omega"]
    M, Q, p, eps = prm["M"], prm["Q"], prm["p"], prm["eps"]
    k = math.ceil(math.log2(18 * M))
    if theorem == "T4.1-BV":
        c1 = 2 ** (3 + Q + Q / (Q - 1)) * CO ** 2 * Cd ** (Q + k)
        return c1 * eps ** (-1 / (Q - 1)) * comp["int_h_dkappa"] + c1 * eps * (comp["kappa_Omega"] + comp["nu_V"])
    if theorem == "T4.2-Sobolev-Lip":
        c2 = 4 * Cd ** (1 / p + (1 + 1 / p) * k)
        return c2 ** p * (comp["int_hp_ap"] + (2 * eps) ** p * comp["int_ap"])
    if theorem == "T4.3-Sobolev-H":
        c3 = 2 ** (p + Q * p / (Q - p)) * Cd ** (Q / p + (p + 1) * k) * CO ** 2
        return c3 * comp["nu_V"] + c3 * (comp["int_h_aq"] + 2 * eps * comp["int_aq"])
    c4 = Cd ** 6 * CO ** 2
    return c4 * comp["nu_V"] * comp["a_sup"] ** (Q - 1) * comp["Ha_sup"] ** Q


def random_input(theorem, rng, sp):
    while True:
        A = np.eye(2) + rng.uniform(-0.5, 0.5, size=(2, 2))
        if abs(np.linalg.det(A)) > 0.3:
            break
    f = SampledMapping(sp, sp.coords @ A.T * rng.uniform(0.5, 2.0), injective=True)
    x = sp.coords
    kw = {"M": 1.0, "eps": float(rng.uniform(0.1, 1.0))}
    if theorem == "T4.1-BV":
        kw["Q"] = float(rng.uniform(1.5, 3.0))
        kw["weight"] = RadonWeight(sp, density=1.0 + 0.5 * np.sin(rng.uniform(1, 6) * x[:, 0]) ** 2)
    else:
        kw["a"] = 1.0 + 0.5 * np.cos(rng.uniform(1, 6) * x[:, 1]) ** 2
        kw["Q"] = float(rng.uniform(1.5, 3.0))
        if theorem == "T4.3-p=Q":
            kw["p"] = kw["Q"]
        else:
            kw["p"] = float(rng.uniform(1.0, min(2.0, kw["Q"] - 0.2)))
    return f, kw


def test_criterion_6_certificate_arithmetic():
    sp = uniform_grid([[0, 1], [0, 1]], 0.02)
    rng = np.random.default_rng(20240601)
    worst_rel, chains, exact, total, ok = 0.0, 0, 0, 0, True
    for theorem in ("T4.1-BV", "T4.2-Sobolev-Lip", "T4.3-Sobolev-H", "T4.3-p=Q"):
        for _ in range(10):
            f, kw = random_input(theorem, rng, sp)
            cert = certify(f, theorem, **kw)
            total += 1
            ref = oracle_bound(theorem, cert.bound_components, cert.parameters, cert.constants)
            rel = abs(ref - cert.bound) / abs(ref) if ref else abs(cert.bound)
            worst_rel = max(worst_rel, rel)
            exact += ref == cert.bound
            ok &= cert.verify() and rel <= 1e-12
            assert overlap_exponent(kw["M"]) == math.ceil(math.log2(18 * kw["M"]))
            for row in cert.energy_table:
                for ch in row["chains"].values():
                    chains += 1
                    steps = [v for _, v in ch["steps"]]
                    for a, b in zip(steps[:-1], steps[1:]):
                        ok &= a <= b + 1e-9 * max(abs(a), abs(b), 1e-300)
                ok &= row["chain_ok"]
    record(6, ok, f"{total} certificates: bound vs written-out formula max rel diff {worst_rel:.1e} "
                  f"({exact} bit-identical), stored bound re-evaluates exactly, {chains} chains hold at 1e-9")
    assert ok


# ---------------------------------------------------------------- 7: trivial maps

def test_criterion_7_trivial_maps():
    msgs, ok = [], True
    idr = S.reproduce("identity", 0.01)
    ok &= idr.passed
    sp = uniform_grid([[0, 1], [0, 1]], 0.01)
    ident = SampledMapping(sp, sp.coords.copy(), injective=True)
    verdicts = {th: certify(ident, th, h=1.0).verdict
                for th in ("T4.1-BV", "T4.2-Sobolev-Lip", "T4.3-Sobolev-H", "T4.3-p=Q")}
    ok &= all(v == "PASS" for v in verdicts.values())
    msgs.append(f"identity fields in 1 +- 10%: {idr.passed}, certificates {sorted(set(verdicts.values()))}")

    const = S.generate("constant", 0.01)
    sch = const.schedule
    Lz = all(np.nanmax(np.abs(asymptotic_field(const.mapping, k, sch).on())) == 0 for k in ("Lip", "lip"))
    en = certify(const.mapping, "T4.1-BV")
    ez = all(r["energy"] == 0 for r in en.energy_table)
    ok &= Lz and ez
    msgs.append(f"constant: L-fields 0 {Lz}, energies 0 {ez}")

    sc = S.generate("scaling", 0.01)
    Lip = S.measure(sc, "Lip_field_range")
    H = S.measure(sc, "H_field_range")
    base = asymptotic_field(ident, "H", sc.schedule).on()
    inv = all(np.array_equal(asymptotic_field(ident.scaled(c), "H", sc.schedule).on(), base)
              for c in (0.25, 0.5, 2.0, 8.0))
    good = 1.8 <= Lip[0] and Lip[1] <= 2.2 and 0.9 <= H[0] and H[1] <= 1.1 and inv
    ok &= good
    msgs.append(f"scaling x2: Lip {Lip[0]:.3f}..{Lip[1]:.3f}, H {H[0]:.3f}..{H[1]:.3f}, "
                f"H bit-identical under target rescaling {inv}")
    record(7, ok, "; ".join(msgs))
    assert ok


# ---------------------------------------------------------------- 8: p = Q branch

def test_criterion_8_pQ():
    sp = uniform_grid([[0, 1], [0, 1]], 0.01)
    f = SampledMapping(sp, sp.coords.copy(), injective=True)
    cert = certify(f, "T4.3-p=Q", a=np.ones(sp.n), Q=2.0)
    rep = cert._report
    Cd, CO = cert.constants["C_d"], cert.constants["C_Omega"]
    nu = image_volume(f, cert._partition.D, cert.parameters["beta"])
    c4_nu = Cd ** 6 * CO ** 2 * nu
    ok = (rep.lip_energy <= c4_nu * 1.1 and rep.comparison_ok and nu == cert.bound_components["nu_V"]
          and cert.verdict == "PASS")
    record(8, ok, f"int lip^2 = {rep.lip_energy:.4f} <= C4 nu(V) * 1.1 = {c4_nu * 1.1:.4g} "
                  f"(nu(V) = {nu:.4f}); sup H {rep.H_sup:.6f} <= |a|^(1/2) sup H^(a,2) {rep.Ha_sup:.6f}")
    assert ok
