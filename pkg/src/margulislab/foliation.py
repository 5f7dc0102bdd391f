"""Leaf geometry on the mapping torus.

Center-unstable (and center-stable) leaves are handled through charts
(w, c) -> flow(base + w * dir, c) with dir the expanding (contracting)
eigendirection; the intrinsic area element is lambda^{+-(t0 + c)} dw dc.
Strong leaves inside an invariant chart are graphs c = gamma(w) computed by
the forward graph transform.  Stable holonomies are found geometrically from
the eigenline structure and then verified by forward-orbit collapse, the
identification the contraction actually provides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateCell, NoConvergence, NoIntersection,
                     NotApplicable, OutOfChart)
from .model import (E_S, E_U, LAMBDA, SEAM_EPS, MapDescriptor, _wrap01,
                    apply_map, displacement, distance, flow, metric_weights,
                    normalize_points)

_DIR_VECS = {"u": E_U, "s": E_S}
_PERP = {"u": E_S, "s": E_U}


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CuChart:
    """Parametrized patch of a center-unstable (or center-stable) leaf."""

    base: np.ndarray
    extent_w: float
    extent_c: float
    direction: str = "u"
    c_sign: float = 1.0
    chart_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))

    def point(self, w, c):
        w = np.asarray(w, dtype=float)
        c = np.asarray(c, dtype=float)
        w, c = np.broadcast_arrays(w, c)
        dirvec = _DIR_VECS[self.direction]
        p = self.base[:2][None, :] + w.reshape(-1, 1) * dirvec[None, :]
        pts = np.column_stack([_wrap01(p), np.full(p.shape[0], self.base[2])])
        out = flow(pts, self.c_sign * c.reshape(-1))
        return out.reshape(w.shape + (3,))

    def weight_exponent(self, c):
        """Signed exponent x with ||d_w point|| = lambda^x at center offset c."""
        theta = self.base[2] + self.c_sign * np.asarray(c, dtype=float)
        return theta if self.direction == "u" else -theta

    def area_element(self, w, c):
        w = np.asarray(w, dtype=float)
        c = np.asarray(c, dtype=float)
        w, c = np.broadcast_arrays(w, c)
        return LAMBDA ** self.weight_exponent(c)

    def params_of(self, pts):
        """Invert the parametrization: (w, c, transverse offset) per point.

        Only meaningful for charts with extent_c <= 1 (single center branch).
        """
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 3)
        # center the mod-1 branch on the chart's c window: [shift, shift + 1)
        shift = 0.5 * (min(self.extent_c, 1.0) - 1.0)
        c = np.mod(self.c_sign * (flat[:, 2] - self.base[2]) - shift, 1.0) + shift
        k = np.floor(self.base[2] + self.c_sign * c + SEAM_EPS).astype(int)
        from .model import _apply_cat_power
        q = _apply_cat_power(flat[:, :2].copy(), -k)
        d = q - self.base[:2][None, :]
        d -= np.round(d)
        # the in-fiber line may wind around the torus: search nearby lattice
        # representatives and keep the one with the smallest transverse offset
        R = int(np.ceil(self.extent_w)) + 1
        dirvec = _DIR_VECS[self.direction]
        perp = _PERP[self.direction]
        best_w = d @ dirvec
        best_off = d @ perp
        for mx in range(-R, R + 1):
            for my in range(-R, R + 1):
                if mx == 0 and my == 0:
                    continue
                dm = d + np.array([mx, my], dtype=float)
                off = dm @ perp
                better = np.abs(off) < np.abs(best_off)
                best_off = np.where(better, off, best_off)
                best_w = np.where(better, dm @ dirvec, best_w)
        shape = pts.shape[:-1]
        return best_w.reshape(shape), c.reshape(shape), best_off.reshape(shape)

    def translated(self, delta_s=0.0, delta_c=0.0, chart_id=""):
        """New chart with base slid along the transverse direction and/or center."""
        p = self.base[:2] + delta_s * _PERP[self.direction]
        moved = normalize_points(np.array([[p[0], p[1], self.base[2]]]))[0]
        if delta_c:
            moved = flow(moved, delta_c)
        return CuChart(moved, self.extent_w, self.extent_c, self.direction,
                       self.c_sign, chart_id or self.chart_id + "+")


@dataclass(frozen=True)
class TiltedPatch:
    """Chart graph tilted out of the leaf by `tilt` * w along the transverse
    eigendirection; a t-transverse submanifold that is not a leaf patch."""

    chart: CuChart
    tilt: float = 0.0

    @property
    def extent_w(self):
        return self.chart.extent_w

    @property
    def extent_c(self):
        return self.chart.extent_c

    def point(self, w, c):
        w = np.asarray(w, dtype=float)
        c = np.asarray(c, dtype=float)
        w, c = np.broadcast_arrays(w, c)
        pts = self.chart.point(w, c).reshape(-1, 3)
        shift = (self.tilt * w.reshape(-1, 1)) * _PERP[self.chart.direction][None, :]
        pts[:, :2] = _wrap01(pts[:, :2] + shift)
        return pts.reshape(w.shape + (3,))

    def area_element(self, w, c, h=1e-6):
        return embedded_area_element(self.point, w, c, h=h)


def embedded_area_element(point_fn, w, c, h=1e-6):
    """Numerical pullback area element of a (w, c) parametrized surface."""
    w = np.asarray(w, dtype=float)
    c = np.asarray(c, dtype=float)
    w, c = np.broadcast_arrays(w, c)
    base = point_fn(w, c).reshape(-1, 3)
    dw = displacement(point_fn(w - h, c).reshape(-1, 3),
                      point_fn(w + h, c).reshape(-1, 3)) / (2 * h)
    dc = displacement(point_fn(w, c - h).reshape(-1, 3),
                      point_fn(w, c + h).reshape(-1, 3)) / (2 * h)
    wgt = metric_weights(base[:, 2])
    dw_t = dw * wgt
    dc_t = dc * wgt
    g11 = (dw_t * dw_t).sum(-1)
    g22 = (dc_t * dc_t).sum(-1)
    g12 = (dw_t * dc_t).sum(-1)
    out = np.sqrt(np.maximum(g11 * g22 - g12 ** 2, 0.0))
    return out.reshape(w.shape)


# ---------------------------------------------------------------------------
# leaf volume
# ---------------------------------------------------------------------------

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(8)


def leaf_volume(obj, subset=None):
    """Intrinsic volume: arclength of a curve window or area of a chart rectangle."""
    if isinstance(obj, LeafCurve):
        return curve_length(obj.points(subset))
    if isinstance(obj, np.ndarray):
        return curve_length(obj)
    chart = obj
    if subset is None:
        subset = (0.0, chart.extent_w, 0.0, chart.extent_c)
    w0, w1, c0, c1 = subset
    tol = 1e-9
    if not (-tol <= w0 <= w1 <= chart.extent_w + tol
            and -tol <= c0 <= c1 <= chart.extent_c + tol):
        raise OutOfChart(f"subset {subset} outside chart extents "
                         f"({chart.extent_w}, {chart.extent_c})")
    if w1 - w0 <= 0 or c1 - c0 <= 0:
        return 0.0
    xw = 0.5 * (w1 + w0) + 0.5 * (w1 - w0) * _GAUSS_X
    xc = 0.5 * (c1 + c0) + 0.5 * (c1 - c0) * _GAUSS_X
    W, C = np.meshgrid(xw, xc, indexing="ij")
    vals = np.asarray(obj.area_element(W, C) if not isinstance(obj, CuChart)
                      else obj.area_element(W, C))
    wts = np.outer(_GAUSS_W, _GAUSS_W) * (0.25 * (w1 - w0) * (c1 - c0))
    return float((vals * wts).sum())


def curve_length(points):
    """Polyline arclength in the adapted metric."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    steps = displacement(pts[:-1], pts[1:])
    w = metric_weights(pts[:-1, 2])
    return float(np.sqrt(((steps * w) ** 2).sum(-1)).sum())


# ---------------------------------------------------------------------------
# strong unstable leaves by graph transform
# ---------------------------------------------------------------------------

@dataclass
class LeafCurve:
    """Strong-leaf graph c = gamma(w) inside a chart."""

    chart: CuChart
    w_grid: np.ndarray
    gamma: np.ndarray
    residual: float
    residual_history: list = field(default_factory=list)

    def points(self, subset=None):
        w = self.w_grid
        g = self.gamma
        if subset is not None:
            lo, hi = subset
            keep = (w >= lo - 1e-12) & (w <= hi + 1e-12)
            w, g = w[keep], g[keep]
        return self.chart.point(w, g).reshape(-1, 3)


def _chart_like(x, width, template=None, direction="u"):
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    return CuChart(arr, extent_w=width, extent_c=1.0, direction=direction)


def graph_transform_step(f, chart_from, w_grid, gamma, chart_to):
    """Push the graph through f and re-express it over chart_to's w grid."""
    pts = chart_from.point(w_grid, gamma).reshape(-1, 3)
    image = apply_map(f, pts)
    wp, cp, _ = chart_to.params_of(image)
    order = np.argsort(wp)
    return np.interp(w_grid, wp[order], cp[order])


def u_leaf(f: MapDescriptor, x, width, iters, n_grid=257, tol=1e-8):
    """Strong unstable leaf through x inside its invariant cu-leaf.

    Forward graph transform seeded with the flat graph at f^{-iters}(x);
    slopes contract by 1/lambda per step.  Only defined where the cu-leaf
    is invariant and explicit: the timechange family (or epsilon = 0).
    """
    if f.family == "shear" and f.epsilon > 0:
        raise NotApplicable("cu-leaves of the shear family are not available "
                            "in closed form; use splitting-level analysis")
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    finv = f.inverse()
    bases = [arr]
    for _ in range(iters):
        bases.append(apply_map(finv, bases[-1]))
    bases = bases[::-1]
    half = width / 2.0
    w_grid = np.linspace(-half, half, n_grid)
    charts = [CuChart(b, extent_w=half, extent_c=0.5) for b in bases]
    gamma = np.zeros_like(w_grid)
    history = []
    for k in range(iters):
        new_gamma = graph_transform_step(f, charts[k], w_grid, gamma, charts[k + 1])
        new_gamma = new_gamma - new_gamma[n_grid // 2]  # leaf passes through x
        history.append(float(np.abs(new_gamma - gamma).max()))
        gamma = new_gamma
    residual = history[-1] if history else 0.0
    if residual > tol:
        raise NoConvergence(f"graph transform residual {residual:.2e} > {tol:.1e}",
                            stage="u_leaf", residual=residual)
    return LeafCurve(chart=charts[-1], w_grid=w_grid, gamma=gamma,
                     residual=residual, residual_history=history)


def center_segment(f: MapDescriptor, x, n_points=129):
    """The center arc [x, f(x)) with its intrinsic length (timechange only)."""
    if f.family != "timechange":
        raise NotApplicable("center leaves are flow orbits only for the "
                            "timechange family")
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    tau = float(f.tau(arr[2]))
    # closed polyline [x, f(x)]; the half-open arc drops the final point's mass
    s = np.linspace(0.0, tau, n_points)
    pts = flow(np.tile(arr, (n_points, 1)), s)
    return pts, tau


# ---------------------------------------------------------------------------
# stable holonomy
# ---------------------------------------------------------------------------

@dataclass
class Holonomy:
    source: object
    target: object
    w_grid: np.ndarray
    c_grid: np.ndarray
    wp: np.ndarray  # target w params, shape (nw, nc)
    cp: np.ndarray
    size: float

    def map_params(self, w, c):
        """Bilinear interpolation of the sampled correspondence."""
        w = np.asarray(w, dtype=float)
        c = np.asarray(c, dtype=float)
        w, c = np.broadcast_arrays(w, c)
        iw = np.clip(np.searchsorted(self.w_grid, w) - 1, 0, len(self.w_grid) - 2)
        ic = np.clip(np.searchsorted(self.c_grid, c) - 1, 0, len(self.c_grid) - 2)
        fw = (w - self.w_grid[iw]) / (self.w_grid[iw + 1] - self.w_grid[iw])
        fc = (c - self.c_grid[ic]) / (self.c_grid[ic + 1] - self.c_grid[ic])
        out = []
        for grid in (self.wp, self.cp):
            v00 = grid[iw, ic]
            v10 = grid[iw + 1, ic]
            v01 = grid[iw, ic + 1]
            v11 = grid[iw + 1, ic + 1]
            out.append((1 - fw) * (1 - fc) * v00 + fw * (1 - fc) * v10
                       + (1 - fw) * fc * v01 + fw * fc * v11)
        return out[0], out[1]


def _target_tilt(target):
    return target.tilt if isinstance(target, TiltedPatch) else 0.0


def _target_chart(target):
    return target.chart if isinstance(target, TiltedPatch) else target


def stable_holonomy(f: MapDescriptor, source, target, max_size=0.5,
                    n_grid=(17, 17), collapse_steps=50, collapse_tol=1e-7):
    """Correspondence source -> target along stable leaves.

    The candidate is solved from the eigenline geometry slice by slice and
    then certified by forward-orbit collapse: d(f^n x, f^n h(x)) must fall
    below collapse_tol within collapse_steps (contraction 1/lambda per
    step).  Roundoff seeded in the expanding direction grows like lambda^n,
    so certified distances bottom out around 1e-8 (a mismatched pair stays
    at order one); the default tolerance keeps a wide margin on both sides.
    """
    if f.family == "shear" and f.epsilon > 0 and f.direction == "forward":
        pass  # stable leaves are still eigenlines within slices
    tchart = _target_chart(target)
    tilt = _target_tilt(target)
    nw, nc = n_grid
    w_grid = np.linspace(0.0, source.extent_w, nw)
    # stay strictly inside the center window: at c = extent_c = 1 the mod-1
    # branch of the target parametrization is ambiguous
    c_grid = np.linspace(0.0, source.extent_c * (1.0 - 1e-9), nc)
    W, C = np.meshgrid(w_grid, c_grid, indexing="ij")
    P = (source.point(W, C) if not isinstance(source, TiltedPatch)
         else source.point(W, C)).reshape(-1, 3)
    t = P[:, 2]
    cps = np.mod(tchart.c_sign * (t - tchart.base[2]), 1.0)
    if np.any(cps > tchart.extent_c + 1e-9):
        bad = cps > tchart.extent_c + 1e-9
        # a second branch below might still be on-chart
        cps2 = cps - 1.0
        if np.any(cps2[bad] < -1e-9):
            raise NoIntersection("stable leaves leave the target chart's "
                                 "center range")
        cps = np.where(bad, cps2, cps)
    k = np.floor(tchart.base[2] + tchart.c_sign * cps + SEAM_EPS).astype(int)
    from .model import _apply_cat_power
    base_img = _apply_cat_power(np.tile(tchart.base[:2], (len(cps), 1)), k)
    dirv = _DIR_VECS[tchart.direction]
    perp = _PERP[tchart.direction]
    d = P[:, :2] - base_img
    best_w = np.full(len(cps), np.nan)
    best_s = np.full(len(cps), np.inf)
    R = int(np.ceil(tchart.extent_w)) + 1
    shifts = [(mx, my) for mx in range(-R, R + 1) for my in range(-R, R + 1)]
    for mx, my in shifts:
            dm = d - np.round(d) + np.array([mx, my], dtype=float)
            a = dm @ dirv
            b = dm @ perp
            wp_cand = a / LAMBDA ** (k if tchart.direction == "u" else -k)
            s_cand = tilt * wp_cand - b
            ok = (wp_cand > -1e-9) & (wp_cand < tchart.extent_w + 1e-9)
            better = ok & (np.abs(s_cand) < np.abs(best_s))
            best_w = np.where(better, wp_cand, best_w)
            best_s = np.where(better, s_cand, best_s)
    if np.isnan(best_w).any() or not np.isfinite(best_s).all():
        raise NoIntersection("stable leaf misses the target chart")
    sizes = np.abs(best_s) * metric_weights(t)[:, 0]
    size = float(sizes.max())
    if size > max_size:
        raise NoIntersection(f"holonomy size {size:.3g} exceeds bound {max_size}")
    # forward-orbit collapse certificate
    HP = (target.point(best_w.reshape(W.shape), cps.reshape(W.shape))
          .reshape(-1, 3))
    a_pts, b_pts = P.copy(), HP.copy()
    dist = np.asarray(distance(a_pts, b_pts), dtype=float)
    best = float(np.max(dist))
    for _ in range(collapse_steps):
        if best < collapse_tol:
            break
        a_pts = apply_map(f, a_pts)
        b_pts = apply_map(f, b_pts)
        dist = np.asarray(distance(a_pts, b_pts), dtype=float)
        worst = float(np.max(dist))
        if worst > 2.0 * best:  # expanding roundoff has taken over
            break
        best = min(best, worst)
    if best >= collapse_tol:
        raise NoConvergence("forward-orbit collapse did not certify the "
                            "holonomy", stage="stable_holonomy",
                            residual=best)
    return Holonomy(source=source, target=target, w_grid=w_grid, c_grid=c_grid,
                    wp=best_w.reshape(W.shape), cp=cps.reshape(W.shape),
                    size=size)


def _bilinear_quad_area(surface, corners_w, corners_c, order=4):
    """Intrinsic area of the bilinear quadrilateral with the given param corners."""
    x, wts = np.polynomial.legendre.leggauss(order)
    xi = 0.5 * (x + 1.0)
    XI, ETA = np.meshgrid(xi, xi, indexing="ij")
    w00, w10, w11, w01 = corners_w
    c00, c10, c11, c01 = corners_c
    W = ((1 - XI) * (1 - ETA) * w00 + XI * (1 - ETA) * w10
         + XI * ETA * w11 + (1 - XI) * ETA * w01)
    C = ((1 - XI) * (1 - ETA) * c00 + XI * (1 - ETA) * c10
         + XI * ETA * c11 + (1 - XI) * ETA * c01)
    dW_dxi = (1 - ETA) * (w10 - w00) + ETA * (w11 - w01)
    dC_dxi = (1 - ETA) * (c10 - c00) + ETA * (c11 - c01)
    dW_deta = (1 - XI) * (w01 - w00) + XI * (w11 - w10)
    dC_deta = (1 - XI) * (c01 - c00) + XI * (c11 - c10)
    jac = np.abs(dW_dxi * dC_deta - dW_deta * dC_dxi)
    elem = np.asarray(surface.area_element(W, C))
    quad_w = 0.25 * np.outer(wts, wts)
    return float((elem * jac * quad_w).sum())


def expm1_plus(t):
    """(e^t - 1)^+; the large-size envelope in Jacobian deviation bounds."""
    return np.maximum(np.expm1(t), 0.0)


def jacobian_deviation_bound(size, C, alpha):
    """C (size^alpha + (e^size - 1)^+): the absolute-continuity envelope."""
    return C * (np.asarray(size) ** alpha + expm1_plus(size))


def holonomy_jacobian(h: Holonomy, density_grid=(24, 12), area_floor=1e-12):
    """Radon-Nikodym field d(h_* vol_src)/d vol_tgt via pushed cell areas."""
    src = h.source
    tgt = h.target
    nw, nc = density_grid
    we = np.linspace(0.0, src.extent_w, nw + 1)
    ce = np.linspace(0.0, src.extent_c, nc + 1)
    J = np.empty((nw, nc))
    src_chart = _target_chart(src) if isinstance(src, TiltedPatch) else src
    for i in range(nw):
        for j in range(nc):
            w0, w1 = we[i], we[i + 1]
            c0, c1 = ce[j], ce[j + 1]
            if isinstance(src, TiltedPatch):
                wm, cm = 0.5 * (w0 + w1), 0.5 * (c0 + c1)
                a_src = float(src.area_element(wm, cm)) * (w1 - w0) * (c1 - c0)
            else:
                a_src = leaf_volume(src, (w0, w1, c0, c1))
            corners_w, corners_c = h.map_params(
                np.array([w0, w1, w1, w0]), np.array([c0, c0, c1, c1]))
            param_area = 0.5 * abs(
                np.dot(corners_w, np.roll(corners_c, -1))
                - np.dot(corners_c, np.roll(corners_w, -1)))
            if param_area <= area_floor:
                raise DegenerateCell(f"pushed cell ({i},{j}) collapsed: "
                                     f"area {param_area:.2e}")
            a_tgt = _bilinear_quad_area(tgt, corners_w, corners_c)
            J[i, j] = a_src / a_tgt
    sup_dev = float(np.abs(J - 1.0).max())
    centers_w = 0.5 * (we[:-1] + we[1:])
    centers_c = 0.5 * (ce[:-1] + ce[1:])
    return J, sup_dev, (centers_w, centers_c)


# ---------------------------------------------------------------------------
# covering numbers
# ---------------------------------------------------------------------------

def covering_number(points, rho, metric=None):
    """Greedy max-coverage cover of a sample cloud by rho-balls.

    Centers are chosen among the samples, largest uncovered gain first; an
    upper-bound proxy within a small factor of the true covering number.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return 0
    if pts.ndim == 1:
        pts = pts[:, None]
    if metric is None:
        diff = pts[:, None, :] - pts[None, :, :]
        D = np.sqrt((diff ** 2).sum(-1))
    else:
        n = len(pts)
        D = np.empty((n, n))
        for i in range(n):
            D[i] = metric(pts[i], pts)
    within = D <= rho + 1e-12
    uncovered = np.ones(len(pts), dtype=bool)
    count = 0
    while uncovered.any():
        gains = (within & uncovered[None, :]).sum(axis=1)
        center = int(np.argmax(gains))
        uncovered &= ~within[center]
        count += 1
    return count
