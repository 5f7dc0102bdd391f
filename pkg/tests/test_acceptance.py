"""Acceptance battery: one test (and one printed verdict line) per criterion.

Run with `pytest tests/test_acceptance.py -v -s` to see the PASS lines; all
tolerances are pinned here, none deferred to later calibration.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from margulislab.errors import UnboundedWc
from margulislab.foliation import (CuChart, TiltedPatch, holonomy_jacobian,
                                   stable_holonomy)
from margulislab.margulis import (CuTestFunction, atom_refinement_ratio,
                                  cs_quasi_invariance_check, cu_conditionals,
                                  default_charts, default_phi1,
                                  margulis_iterate,
                                  segment_dilation_residual)
from margulislab.mme import (DichotomyConfig, build_dichotomy_artifacts,
                             dichotomy_report, entropy_box, parry_sampler,
                             twin_map, unstable_entropy)
from margulislab.model import (LAMBDA, LOG_LAMBDA, MapDescriptor, apply_map,
                               distance, periodic_orbit_points)
from margulislab.splitting import lyapunov_exponent, slice_sampler

EPSILONS = (0.0, 0.02, 0.05)
CFG = DichotomyConfig()


def check(name, ok, detail):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def arts():
    out = {}
    for eps in EPSILONS:
        f = MapDescriptor(family="timechange", epsilon=eps, shape="cos")
        out[eps] = build_dichotomy_artifacts(f, CFG)
    return out


def orbit_sampler(points):
    arr = np.atleast_2d(np.asarray(points, dtype=float))

    def sample(rng, n):
        return arr[np.arange(n) % len(arr)]
    return sample


def _orbits_at_slice(t0, max_period=3):
    orbits = []
    for k, pts in periodic_orbit_points(max_period).items():
        seen = set()
        for p in pts:
            key = tuple(np.round(p, 9))
            if key in seen:
                continue
            orbit = [p]
            q = p
            A = np.array([[2.0, 1.0], [1.0, 1.0]])
            for _ in range(k - 1):
                q = np.mod(q @ A.T, 1.0)
                orbit.append(q)
            for q2 in orbit:
                seen.add(tuple(np.round(q2, 9)))
            orbits.append(np.column_stack([
                np.asarray(orbit), np.full(len(orbit), t0)]))
    return orbits


# ---------------------------------------------------------------------------

def test_dilation_equals_entropy(arts):
    f0 = MapDescriptor(epsilon=0.0)
    t0 = time.perf_counter()
    func0, D0 = margulis_iterate(f0, default_phi1(), n_max=CFG.n_max)
    elapsed0 = time.perf_counter() - t0
    rel0 = abs(D0 - (3 + np.sqrt(5)) / 2) / ((3 + np.sqrt(5)) / 2)
    ok0 = rel0 <= 0.01 and elapsed0 <= 120.0

    f5 = MapDescriptor(epsilon=0.05)
    t0 = time.perf_counter()
    func5, D5 = margulis_iterate(f5, default_phi1(), n_max=CFG.n_max)
    from margulislab.mme import entropy_curve_growth
    slope, _ = entropy_curve_growth(f5, n=CFG.entropy_n)
    elapsed5 = time.perf_counter() - t0
    rel5 = abs(np.log(D5) - slope) / abs(slope)
    ok5 = rel5 <= 0.02 and elapsed5 <= 600.0
    check("dilation-equals-entropy",
          ok0 and ok5,
          f"eps=0: D={D0:.6f} rel={rel0:.2e} in {elapsed0:.1f}s; "
          f"eps=0.05: |logD-slope|/slope={rel5:.2e} in {elapsed5:.1f}s")


def test_three_estimator_agreement(arts):
    details = []
    ok = True
    for eps in EPSILONS:
        ent = arts[eps]["entropies"]
        vals = [ent["curve_growth"], ent["box_extrapolated"],
                ent["log_dilation"]]
        gap = max(abs(a - b) / abs(b) for a in vals for b in vals)
        ok &= gap <= 0.05
        details.append(f"eps={eps}: gap={gap:.3f}")
    check("three-estimator-agreement", ok, "; ".join(details))


def test_variational_inequality(arts):
    worst = -np.inf
    count = 0
    violations = 0
    for eps in EPSILONS:
        f = MapDescriptor(epsilon=eps)
        art = arts[eps]
        logD = np.log(art["dilation"])
        t_inv = 0.25  # both slices are invariant at eps=0; 1/4 attracts
        candidates = []
        for orbit in _orbits_at_slice(t_inv)[:16]:
            candidates.append(("orbit", orbit_sampler(orbit), 6000))
        _, model = entropy_box(f, (16, 16, 8))
        candidates.append(("parry16", parry_sampler(model), 150_000))
        _, model2 = entropy_box(f, (24, 24, 12))
        candidates.append(("parry24", parry_sampler(model2), 150_000))
        candidates.append(("mu_plus", art["mu_plus"].sample, 150_000))
        candidates.append(("mu_minus", art["mu_minus"].sample, 150_000))
        candidates.append(("slice_quarter", slice_sampler(0.25), 150_000))
        candidates.append(("slice_three_quarter", slice_sampler(0.75),
                           150_000))
        assert len(candidates) >= 20
        for name, sampler, n in candidates:
            val, se, _ = unstable_entropy(f, sampler, art["systems"]["u"],
                                          n_samples=n, seed=17)
            count += 1
            excess = val - (logD + 3 * se)
            worst = max(worst, excess)
            if excess > 0:
                violations += 1
    check("variational-inequality",
          violations == 0,
          f"{count} candidates across eps={EPSILONS}, "
          f"violations={violations}, worst excess={worst:.4f}")


def test_equality_case(arts):
    details = []
    ok = True
    for eps, tol in ((0.0, 0.02), (0.05, 0.05)):
        f = MapDescriptor(epsilon=eps)
        art = arts[eps]
        logD = np.log(art["dilation"])
        val, se, _ = unstable_entropy(f, art["mu_plus"].sample,
                                      art["systems"]["u"],
                                      n_samples=300_000, seed=23)
        rel = abs(val - logD) / logD
        ok &= rel <= tol
        details.append(f"eps={eps}: h^u={val:.4f} logD={logD:.4f} rel={rel:.3f}")
    check("equality-case", ok, "; ".join(details))


def test_margulis_invariances(arts):
    details = []
    ok = True
    for eps in (0.0, 0.05):
        f = MapDescriptor(epsilon=eps)
        art = arts[eps]
        func = art["func"]
        s_res = art["s_invariance_residual"]
        dil_res = segment_dilation_residual(func)
        qi = cs_quasi_invariance_check(func)
        atom = atom_refinement_ratio(func)
        ok_eps = (s_res <= 0.02 and dil_res <= 0.02
                  and qi["within_bound"]
                  and qi["bound"] == pytest.approx(
                      1 / func.dilation + 1 + func.dilation)
                  and 1.6 <= atom <= 2.4)
        ok &= ok_eps
        details.append(
            f"eps={eps}: s-inv={s_res:.1e} dil={dil_res:.1e} "
            f"cs in [{qi['min_ratio']:.2f},{qi['max_ratio']:.2f}]"
            f" (C={qi['bound']:.2f}) atom={atom:.2f}")
    check("margulis-invariances", ok, "; ".join(details))


def test_holonomy_absolute_continuity():
    f0 = MapDescriptor(epsilon=0.0)
    sizes = [0.2, 0.1, 0.05, 0.025]
    src = CuChart(np.array([0.31, 0.57, 0.0]), 0.4, 0.8)
    sups = []
    for size in sizes:
        tilt = 0.8 * size / max(sizes)
        tgt = TiltedPatch(src.translated(delta_s=size), tilt=tilt)
        hol = stable_holonomy(f0, src, tgt, max_size=1.0)
        _, sup_dev, _ = holonomy_jacobian(hol, density_grid=(12, 8))
        sups.append(sup_dev)
    logs = np.log(sizes)
    logd = np.log(sups)
    A = np.column_stack([np.ones_like(logs), logs])
    coef, *_ = np.linalg.lstsq(A, logd, rcond=None)
    pred = A @ coef
    r2 = 1 - ((logd - pred) ** 2).sum() / ((logd - logd.mean()) ** 2).sum()
    hol0 = stable_holonomy(f0, src, src.translated(delta_s=0.03))
    _, exact_dev, _ = holonomy_jacobian(hol0, density_grid=(12, 8))
    ok = coef[1] > 0 and r2 >= 0.9 and exact_dev <= 1e-8
    check("holonomy-absolute-continuity", ok,
          f"alpha={coef[1]:.2f} R2={r2:.4f} exact|J-1|={exact_dev:.1e}")


def test_dichotomy_ground_truth(arts):
    f0 = MapDescriptor(epsilon=0.0)
    fast = replace(CFG, hist_samples=20_000, exponent_samples=400)
    false_hyperbolic = 0
    for seed in range(100):
        rep = dichotomy_report(f0, replace(fast, seed=seed),
                               _prebuilt=arts[0.0])
        if rep.verdict == "TwoHyperbolicMMEs":
            false_hyperbolic += 1
        if seed == 0:
            assert rep.verdict == "NonhyperbolicCase"
    sign_ok = True
    hyp_consistent = True
    verdicts = {}
    for eps in EPSILONS:
        f = MapDescriptor(epsilon=eps)
        rep = dichotomy_report(f, CFG, _prebuilt=arts[eps])
        verdicts[eps] = rep.verdict
        sign_ok &= rep.diagnostics["sign_ordering_ok"]
        if rep.verdict == "TwoHyperbolicMMEs":
            hyp_consistent &= (rep.diagnostics["tv_boxes"] >= 0.1
                               and rep.diagnostics["support_plus"] >= 0.98
                               and rep.diagnostics["support_minus"] >= 0.98)
    ok = false_hyperbolic < 1 and sign_ok and hyp_consistent
    check("dichotomy-ground-truth", ok,
          f"false-hyperbolic {false_hyperbolic}/100 at eps=0; "
          f"sign ordering ok={sign_ok}; verdicts={verdicts}")


def test_twin_measure(arts):
    f0 = MapDescriptor(epsilon=0.0)
    with pytest.raises(UnboundedWc):
        twin_map(f0, np.array([0.3, 0.55, 0.1]))

    f5 = MapDescriptor(epsilon=0.05)
    art = arts[0.05]
    rep = dichotomy_report(f5, CFG, _prebuilt=art)
    assert rep.lambda_minus < -3 * rep.stderr_minus
    rng = np.random.default_rng(31)
    sample = art["mu_minus"].sample(rng, 12)
    betas = []
    defined = 0
    for x in sample:
        try:
            betas.append(np.asarray(twin_map(f5, x)).reshape(3))
            defined += 1
        except UnboundedWc:
            pass
    frac = defined / len(sample)
    est = lyapunov_exponent(f5, orbit_sampler(np.array(betas)), horizon=40,
                            n_samples=len(betas), seed=3, burn_in=0)
    x0 = sample[0]
    b_fx = np.asarray(twin_map(f5, apply_map(f5, x0))).reshape(1, 3)
    f_bx = apply_map(f5, np.asarray(twin_map(f5, x0)).reshape(1, 3))
    resid = float(np.asarray(distance(b_fx, f_bx)).ravel()[0])
    ok = (frac >= 0.9 and est.value >= -3 * est.stderr - 1e-9
          and resid <= 1e-6)
    check("twin-measure", ok,
          f"defined {frac:.0%}, beta-image exponent {est.value:.4f} "
          f"(+-{est.stderr:.4f}), equivariance residual {resid:.1e}; "
          f"eps=0 raises UnboundedWc as documented")


def test_uniqueness_probe(arts):
    f5 = MapDescriptor(epsilon=0.05)
    vals = 1.0 + 0.5 * np.cos(np.linspace(0, np.pi, 12))[:, None] \
        * np.ones((12, 48))
    chart2 = CuChart(np.array([0.66, 0.21, 0.43]), 0.3, 1.0, direction="u",
                     chart_id="alt")
    func2, _ = margulis_iterate(f5, CuTestFunction(chart2, vals),
                                n_max=CFG.n_max)
    common = default_charts("u")[:2]
    sysA = cu_conditionals(arts[0.05]["func"], charts=common,
                           holonomy_deltas=())
    sysB = cu_conditionals(func2, charts=common, holonomy_deltas=())
    worst = 0.0
    for cid in sysA.histograms:
        a = sysA.histograms[cid] / sysA.histograms[cid].sum()
        b = sysB.histograms[cid] / sysB.histograms[cid].sum()
        worst = max(worst, 0.5 * np.abs(a - b).sum())
    check("uniqueness-probe", worst <= 0.02, f"worst per-chart TV={worst:.4f}")


def test_runs_without_plotkit():
    import margulislab
    from pathlib import Path
    src = Path(margulislab.__file__).parent
    polluted = [p.name for p in src.glob("*.py") if "plotkit" in p.read_text()]
    check("primary-standalone", not polluted,
          f"no plotkit references in {len(list(src.glob('*.py')))} modules")
