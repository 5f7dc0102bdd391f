import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margulislab import model
from margulislab.errors import InvalidDescriptor
from margulislab.model import (CAT, E_S, E_U, LAMBDA, MapDescriptor, apply_map,
                               differential, displacement, distance, flow,
                               metric_norm, mt_point, normalize_points,
                               pairwise_sum, periodic_orbit_points)

from conftest import random_points


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

def test_flow_no_roof_crossing():
    out = flow(mt_point(0.2, 0.7, 0.5), 0.25)
    assert np.allclose(out.as_array(), [0.2, 0.7, 0.75], atol=1e-15)


def test_flow_single_crossing_applies_cat():
    # oracle: A (0.5, 0.5) = (1.5, 1.0) = (0.5, 0.0) mod 1
    out = flow(mt_point(0.5, 0.5, 0.5), 0.5)
    assert np.allclose(out.as_array(), [0.5, 0.0, 0.0], atol=1e-14)


def test_flow_inverse_returns_start():
    x = mt_point(0.31, 0.77, 0.42)
    back = flow(flow(x, 0.37), -0.37)
    assert np.allclose(back.as_array(), x.as_array(), atol=1e-12)


def test_flow_group_law_bulk(rng):
    pts = random_points(rng, 10_000)
    s1 = rng.uniform(-6, 6, 10_000)
    s2 = rng.uniform(-6, 6, 10_000)
    one = flow(flow(pts, s1), s2)
    two = flow(pts, s1 + s2)
    d = np.abs(one - two)
    d[:, :2] = np.minimum(d[:, :2], 1.0 - d[:, :2])  # torus wrap
    d[:, 2] = np.minimum(d[:, 2], 1.0 - d[:, 2])
    assert d.max() < 1e-10


@settings(max_examples=60, deadline=None)
@given(
    x=st.floats(0, 0.999), y=st.floats(0, 0.999), t=st.floats(0, 0.999),
    s1=st.floats(-4, 4), s2=st.floats(-4, 4),
)
def test_flow_group_law_property(x, y, t, s1, s2):
    pts = np.array([[x, y, t]])
    one = flow(flow(pts, s1), s2)
    two = flow(pts, s1 + s2)
    d = np.abs(one - two)
    d = np.minimum(d, 1.0 - d)
    assert d.max() < 1e-10


def test_normalize_idempotent(rng):
    pts = rng.random((100, 3)) * [1, 1, 7.0] - [0, 0, 3.0]
    once = normalize_points(pts)
    twice = normalize_points(once)
    assert np.array_equal(once, twice)
    assert (once[:, 2] >= 0).all() and (once[:, 2] < 1).all()


# ---------------------------------------------------------------------------
# apply
# ---------------------------------------------------------------------------

def test_apply_unperturbed_is_cat_on_slices(f0, rng):
    pts = random_points(rng, 256)
    out = apply_map(f0, pts)
    assert np.allclose(out[:, 2], pts[:, 2], atol=1e-14)
    expect = np.mod(pts[:, :2] @ CAT.T, 1.0)
    d = np.abs(out[:, :2] - expect)
    d = np.minimum(d, 1.0 - d)
    assert d.max() < 1e-12


def test_apply_timechange_is_flow_by_tau(f_tc05):
    # tau(0) = 1 + 0.05 cos(0) = 1.05
    x = mt_point(0.1, 0.2, 0.0)
    out = apply_map(f_tc05, x)
    oracle = flow(x, 1.05)
    assert np.allclose(out.as_array(), oracle.as_array(), atol=1e-13)
    assert np.allclose(out.as_array(), [0.4, 0.3, 0.05], atol=1e-13)


def test_apply_shear_vanishes_at_seam(f_shear05, f0):
    x = mt_point(0.37, 0.59, 0.0)
    assert np.allclose(
        apply_map(f_shear05, x).as_array(), apply_map(f0, x).as_array(), atol=1e-15)


def test_apply_inverse_is_two_sided(f_tc05, f_shear05, rng):
    pts = random_points(rng, 200)
    for f in (f_tc05, f_shear05):
        finv = f.inverse()
        there = apply_map(f, pts)
        back = apply_map(finv, there)
        d = np.abs(back - pts)
        d = np.minimum(d, 1.0 - d)
        assert d.max() < 1e-11
        back2 = apply_map(f, apply_map(finv, pts))
        d2 = np.abs(back2 - pts)
        d2 = np.minimum(d2, 1.0 - d2)
        assert d2.max() < 1e-11


def test_epsilon_zero_preserves_slices_timechange_does_not(f0, f_tc05, rng):
    pts = random_points(rng, 64)
    assert np.allclose(apply_map(f0, pts)[:, 2], pts[:, 2], atol=1e-14)
    # witness point where the slice moves
    w = apply_map(f_tc05, mt_point(0.3, 0.3, 0.0))
    assert abs(w.t - 0.0) > 1e-3


def test_invalid_descriptor_rejected():
    with pytest.raises(InvalidDescriptor):
        MapDescriptor(family="timechange", epsilon=1.2, shape="cos").validate()
    with pytest.raises(InvalidDescriptor):
        MapDescriptor(family="timechange", epsilon=0.2, shape="cos").validate()
    with pytest.raises(InvalidDescriptor):
        MapDescriptor(family="nosuch").validate()
    with pytest.raises(InvalidDescriptor):
        MapDescriptor(shape="nosuch").validate()


# ---------------------------------------------------------------------------
# differential
# ---------------------------------------------------------------------------

def test_differential_unperturbed_diagonal(f0, rng):
    pts = random_points(rng, 32, t_margin=1e-3)
    M = differential(f0, pts)
    expect = np.diag([1.0 / LAMBDA, LAMBDA, 1.0])
    assert np.abs(M - expect[None]).max() < 1e-12
    # frozen values from the characteristic polynomial l^2 - 3l + 1
    assert M[0, 0, 0] == pytest.approx(0.3819660112501051, abs=1e-12)
    assert M[0, 1, 1] == pytest.approx(2.618033988749895, abs=1e-12)


def _fd_differential(f, x, h=1e-6):
    """Central finite differences of apply in the adapted frame."""
    cols = []
    base = np.asarray(x, dtype=float)
    dirs = [np.array([E_S[0], E_S[1], 0.0]), np.array([E_U[0], E_U[1], 0.0]),
            np.array([0.0, 0.0, 1.0])]
    for d in dirs:
        plus = normalize_points((base + h * d)[None, :])
        minus = normalize_points((base - h * d)[None, :])
        fp = apply_map(f, plus)
        fm = apply_map(f, minus)
        cols.append(displacement(fm, fp)[0] / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.mark.parametrize("fam,eps,shape,direction", [
    ("timechange", 0.0, "cos", "forward"),
    ("timechange", 0.05, "cos", "forward"),
    ("timechange", 0.05, "cos2", "forward"),
    ("timechange", 0.05, "cos", "inverse"),
    ("shear", 0.05, "bump", "forward"),
    ("shear", 0.05, "bump", "inverse"),
])
def test_differential_matches_finite_differences(fam, eps, shape, direction):
    f = MapDescriptor(family=fam, epsilon=eps, shape=shape, direction=direction)
    for xyz in [(0.123, 0.456, 0.3), (0.61, 0.13, 0.52), (0.9, 0.2, 0.77)]:
        x = np.array(xyz)
        M = differential(f, x)
        F = _fd_differential(f, x)
        scale = max(np.abs(M).max(), 1.0)
        assert np.abs(M - F).max() / scale < 1e-6


def test_differential_center_entry_is_one_plus_tau_prime(f_tc05):
    for t in (0.1, 0.33, 0.6):
        x = np.array([0.2, 0.4, t])
        M = differential(f_tc05, x)
        assert M[2, 2] == pytest.approx(1.0 + float(f_tc05.tau_d(t)), abs=1e-12)


def test_differential_chain_rule(f_tc05, f_shear05, rng):
    pts = random_points(rng, 20, t_margin=1e-2)
    Mg = differential(f_shear05, pts)
    mid = apply_map(f_shear05, pts)
    Mf = differential(f_tc05, mid)
    comp = np.einsum("nij,njk->nik", Mf, Mg)
    for i in range(0, 20, 5):
        F = _fd_differential_composed(f_tc05, f_shear05, pts[i])
        assert np.abs(comp[i] - F).max() / np.abs(comp[i]).max() < 1e-6


def _fd_differential_composed(f, g, x, h=1e-6):
    cols = []
    dirs = [np.array([E_S[0], E_S[1], 0.0]), np.array([E_U[0], E_U[1], 0.0]),
            np.array([0.0, 0.0, 1.0])]
    for d in dirs:
        plus = apply_map(f, apply_map(g, normalize_points((x + h * d)[None, :])))
        minus = apply_map(f, apply_map(g, normalize_points((x - h * d)[None, :])))
        cols.append(displacement(minus, plus)[0] / (2 * h))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

def test_metric_flow_direction_unit(rng):
    pts = random_points(rng, 50)
    v = np.array([0.0, 0.0, 1.0])
    assert np.allclose(metric_norm(pts, np.tile(v, (50, 1))), 1.0, atol=1e-15)


def test_metric_es_unit_at_base():
    assert metric_norm(mt_point(0.4, 0.9, 0.0), np.array([1.0, 0, 0])) == pytest.approx(1.0)


def test_metric_gluing_invariance(rng):
    # components transform by diag(1/l, l, 1) across the seam; norms agree
    comps = rng.normal(size=(200, 3))
    pts_top = rng.random((200, 3))
    pts_top[:, 2] = 1.0 - 1e-13
    glued = comps * np.array([1.0 / LAMBDA, LAMBDA, 1.0])
    top = np.sqrt((comps ** 2 * np.array([LAMBDA ** -2.0, LAMBDA ** 2.0, 1.0])).sum(1))
    bottom = metric_norm(np.column_stack([pts_top[:, :2], np.zeros(200)]), glued)
    assert np.abs(top - bottom).max() < 1e-12


def test_metric_eu_seam_continuity():
    # norm of e_u just below the seam equals norm of DA e_u = l e_u at (Ap, 0)
    p = np.array([0.21, 0.34])
    top = metric_norm(np.array([p[0], p[1], 1.0 - 1e-13]), np.array([0, 1.0, 0]))
    bot = metric_norm(np.array([0.76, 0.55, 0.0]), np.array([0, LAMBDA, 0.0]))
    assert top == pytest.approx(bot, rel=1e-12)
    assert top == pytest.approx(LAMBDA, rel=1e-10)


def test_displacement_roundtrip(rng):
    pts = random_points(rng, 100, t_margin=0.05)
    step = rng.normal(size=(100, 3)) * 1e-3
    moved = normalize_points(pts + step)
    comp = displacement(pts, moved)
    recon = comp[:, 0:1] * np.array([[E_S[0], E_S[1], 0]]) \
        + comp[:, 1:2] * np.array([[E_U[0], E_U[1], 0]]) \
        + comp[:, 2:3] * np.array([[0, 0, 1.0]])
    assert np.abs(recon - step).max() < 1e-12
    assert (distance(pts, moved) > 0).all()


# ---------------------------------------------------------------------------
# descriptors, orbits, misc
# ---------------------------------------------------------------------------

def test_descriptor_toml_roundtrip(f_tc05):
    text = f_tc05.to_toml()
    back = MapDescriptor.from_toml(text)
    assert back == f_tc05
    with pytest.raises(InvalidDescriptor):
        MapDescriptor.from_table({"family": "timechange", "bogus": 1})


def test_periodic_orbit_counts():
    # |det(A^k - I)| = l^k + l^-k - 2
    counts = {k: len(v) for k, v in periodic_orbit_points(5).items()}
    assert counts == {1: 1, 2: 5, 3: 16, 4: 45, 5: 121}
    for k, pts in periodic_orbit_points(4).items():
        img = pts.copy()
        for _ in range(k):
            img = np.mod(img @ CAT.T, 1.0)
        d = np.abs(img - pts)
        d = np.minimum(d, 1.0 - d)
        assert d.max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=0, max_size=64))
def test_pairwise_sum_matches_numpy(xs):
    arr = np.asarray(xs, dtype=float)
    assert pairwise_sum(arr) == pytest.approx(arr.sum(), abs=1e-9)


def test_pairwise_sum_chunk_invariance(rng):
    arr = rng.normal(size=512)
    total = pairwise_sum(arr)
    # summing pre-paired halves in the same fixed order gives the identical bits
    again = pairwise_sum(arr)
    assert total == again
