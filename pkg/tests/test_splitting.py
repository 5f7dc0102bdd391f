import numpy as np
import pytest

from margulislab import splitting
from margulislab.errors import NoConvergence
from margulislab.model import LAMBDA, LOG_LAMBDA, MapDescriptor, apply_map, mt_point
from margulislab.splitting import (CSV_HEADER, compute_splitting, log_det_average,
                                   lyapunov_center, lyapunov_exponent,
                                   point_sampler, slice_sampler, volume_sampler)

from conftest import random_points


def _collinear(u, v, tol=1e-9):
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    return min(np.linalg.norm(u - v), np.linalg.norm(u + v)) < tol


def test_frame_unperturbed_is_eigenframe(f0):
    fr = compute_splitting(f0, mt_point(0.3, 0.8, 0.4), n=40)
    assert _collinear(fr.e_s, np.array([1.0, 0, 0]), tol=1e-10)
    assert _collinear(fr.e_u, np.array([0, 1.0, 0]), tol=1e-10)
    assert _collinear(fr.e_c, np.array([0, 0, 1.0]), tol=1e-10)
    assert max(fr.residuals.values()) <= 1e-12


def test_frame_timechange_center_is_flow_direction(f_tc05):
    for xyz in [(0.2, 0.5, 0.11), (0.8, 0.1, 0.62)]:
        fr = compute_splitting(f_tc05, mt_point(*xyz), n=50)
        assert _collinear(fr.e_c, np.array([0, 0, 1.0]), tol=1e-10)


def test_frame_shear_residual_and_center_oracle(f_shear05):
    # center direction solves the affine cocycle: e_c ~ (0, -eps b'(t)/(l-1), 1)
    for xyz in [(0.33, 0.71, 0.3), (0.05, 0.6, 0.52)]:
        fr = compute_splitting(f_shear05, mt_point(*xyz), n=60)
        assert max(fr.residuals.values()) <= 1e-6
        t = xyz[2]
        expect = np.array([0.0, -float(f_shear05.bump_d(t)) / (LAMBDA - 1.0), 1.0])
        assert _collinear(fr.e_c, expect, tol=1e-8)
        assert _collinear(fr.e_s, np.array([1.0, 0, 0]), tol=1e-9)


def test_frame_angles_bounded(f_tc05, f_shear05, rng):
    pts = random_points(rng, 8, t_margin=0.02)
    for f in (f_tc05, f_shear05):
        for row in pts:
            fr = compute_splitting(f, row, n=50)
            assert fr.min_angle() >= splitting.DEFAULT_T_MIN


def test_metric_unit_frame(f_tc05):
    from margulislab.model import metric_norm
    fr = compute_splitting(f_tc05, mt_point(0.44, 0.27, 0.68), n=50)
    for e in (fr.e_s, fr.e_u, fr.e_c):
        assert metric_norm(fr.base, e) == pytest.approx(1.0, abs=1e-10)


def test_splitting_no_convergence_signals():
    f = MapDescriptor(family="shear", epsilon=0.05, shape="bump")
    with pytest.raises(NoConvergence):
        # one iteration cannot align the generic seed with e_u to 1e-6 ... 1 step
        compute_splitting(f, mt_point(0.3, 0.4, 0.5), n=1, tol=1e-14)


# ---------------------------------------------------------------------------
# exponents
# ---------------------------------------------------------------------------

def test_center_exponent_zero_unperturbed(f0):
    est = lyapunov_center(f0, volume_sampler(), horizon=120, n_samples=16, seed=3)
    assert abs(est.value) < 1e-10
    assert est.stderr >= 0.0


def test_unstable_exponent_log_lambda(f0):
    est = lyapunov_exponent(f0, volume_sampler(), horizon=120, direction="unstable",
                            n_samples=8, seed=5)
    assert est.value == pytest.approx(0.9624236501192069, abs=1e-10)


def test_stable_exponent_negative_log_lambda(f0):
    est = lyapunov_exponent(f0, volume_sampler(), horizon=120, direction="stable",
                            n_samples=8, seed=7)
    assert est.value == pytest.approx(-LOG_LAMBDA, abs=1e-10)


def test_timechange_center_exponent_attractor(f_tc05):
    # generic orbits settle at the slice t=1/4 where the multiplier is 1 - 2 pi eps
    est = lyapunov_center(f_tc05, volume_sampler(), horizon=300, n_samples=24, seed=11)
    expect = np.log(1.0 - 2.0 * np.pi * 0.05)
    assert est.value == pytest.approx(expect, abs=5e-4)


def test_stationarity_horizons_consistent(f_tc05):
    e1 = lyapunov_center(f_tc05, volume_sampler(), horizon=200, n_samples=16, seed=2)
    e2 = lyapunov_center(f_tc05, volume_sampler(), horizon=400, n_samples=16, seed=2)
    comb = np.hypot(e1.stderr, e2.stderr)
    assert abs(e1.value - e2.value) <= 3.0 * comb + 1e-9


def test_inverse_exponent_negates_along_same_orbit(f_tc05, rng):
    horizon = 80
    starts = random_points(rng, 12)
    fwd = lyapunov_center(f_tc05, lambda r, n: starts[:n], horizon=horizon,
                          n_samples=12, seed=0, burn_in=0)
    ends = apply_map(f_tc05, starts, n=horizon)
    bwd = lyapunov_center(f_tc05.inverse(), lambda r, n: ends[:n], horizon=horizon,
                          n_samples=12, seed=0, burn_in=0)
    comb = np.hypot(fwd.stderr, bwd.stderr)
    assert abs(fwd.value + bwd.value) <= 3.0 * comb + 1e-8


@pytest.mark.parametrize("fam,eps,shape", [
    ("timechange", 0.05, "cos"), ("shear", 0.05, "bump")])
def test_exponent_sum_matches_log_det(fam, eps, shape):
    f = MapDescriptor(family=fam, epsilon=eps, shape=shape)
    kw = dict(horizon=150, n_samples=12, seed=9)
    total = sum(lyapunov_exponent(f, volume_sampler(), direction=d, **kw).value
                for d in ("stable", "center", "unstable"))
    det, det_se = log_det_average(f, volume_sampler(), horizon=150, n_samples=12, seed=9)
    assert abs(total - det) <= 3.0 * det_se + 1e-8


def test_degenerate_point_sampler(f_tc05):
    # all mass on the fixed flow orbit over the origin at the attracting slice
    est = lyapunov_center(f_tc05, point_sampler(mt_point(0.0, 0.0, 0.25)),
                          horizon=100, n_samples=4, seed=1, burn_in=0)
    assert est.stderr == pytest.approx(0.0, abs=1e-14)
    assert est.value == pytest.approx(np.log(1.0 - 2.0 * np.pi * 0.05), abs=1e-12)


def test_slice_sampler_and_csv_row(f_tc05):
    est = lyapunov_center(f_tc05, slice_sampler(0.75), horizon=60, n_samples=6,
                          seed=4, burn_in=0)
    row = est.csv_row("timechange", 0.05)
    assert row.startswith("timechange,0.05,center,")
    assert len(row.split(",")) == len(CSV_HEADER.split(","))
    # repelling slice carries the positive multiplier
    assert est.value == pytest.approx(np.log(1.0 + 2.0 * np.pi * 0.05), abs=1e-10)
