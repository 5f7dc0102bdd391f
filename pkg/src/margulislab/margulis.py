"""Margulis leaf measures by power iteration of leaf-volume pushforwards.

The n-th pushforward functional evaluates a leaf test function against the
n-fold image of intrinsic leaf volume,

    ell_n(phi) = integral of phi . f^{-n} over the leaf volume
               = integral of phi * Jac^{cu} f^n over the support,

computed by accumulating the center-unstable area cocycle along orbits of
adaptive quadrature cells.  Ratios ell_{n+1}/ell_n converge to the dilation
factor; the normalized limit functional restricted to charts yields the
leaf conditionals, their center extensions the strong-leaf conditionals.

Supported map families: timechange (either direction) and epsilon = 0.
The shear family has no closed-form invariant cu-foliation here and is
deliberately excluded (splitting-level analysis only).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (CompactLeafConflict, NoConvergence, NotApplicable,
                     RefinementBudgetExceeded)
from .foliation import CuChart, covering_number, stable_holonomy
from .model import (E_S, E_U, LAMBDA, MapDescriptor, _wrap01, apply_map,
                    differential, metric_weights, min_distance_to_short_orbits,
                    normalize_points, pairwise_sum)

EXCLUSION_RADIUS = 1e-2
EXCLUSION_MAX_PERIOD = 5

_DIRVEC = {"u": E_U, "s": E_S}
_COLUMN = {"u": 1, "s": 2, "timechange": 0}  # adapted-frame column index per direction


def _require_margulis_family(f: MapDescriptor):
    if f.family == "shear" and f.epsilon > 0:
        raise NotApplicable("Margulis pipeline needs the invariant cu-foliation; "
                            "the shear family only gets splitting-level analysis")


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CuTestFunction:
    """Nonnegative grid function with bounded support in one leaf chart."""

    chart: CuChart
    values: np.ndarray
    continuous: bool = True

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if (vals < 0).any():
            raise ValueError("test functions are nonnegative")
        object.__setattr__(self, "values", vals)

    def is_positive(self):
        return bool((self.values > 0).any())

    def sup(self):
        return float(self.values.max(initial=0.0))

    def value_at(self, w, c):
        nw, nc = self.values.shape
        iw = np.clip((np.asarray(w) / self.chart.extent_w * nw).astype(int), 0, nw - 1)
        ic = np.clip((np.asarray(c) / self.chart.extent_c * nc).astype(int), 0, nc - 1)
        return self.values[iw, ic]


def indicator(chart, grid=(32, 32)):
    return CuTestFunction(chart, np.ones(grid))


# ---------------------------------------------------------------------------
# the area cocycle
# ---------------------------------------------------------------------------

def cocycle_step(f: MapDescriptor, pts, direction="u"):
    """One step of the leafwise area cocycle: (log Jac^{cu} f, f(pts)).

    The Jacobian is the adapted-metric area expansion on the plane spanned
    by the leaf's expanding direction and the flow direction.  For inverse
    descriptors the differential is assembled at the already-computed image
    point, avoiding a second root solve.
    """
    nxt = apply_map(f, pts)
    if f.direction == "inverse":
        M = np.linalg.inv(differential(replace(f, direction="forward"), nxt))
    else:
        M = differential(f, pts)
    w0 = metric_weights(pts[:, 2])
    w1 = metric_weights(nxt[:, 2])
    Mt = M * w1[:, :, None] / w0[:, None, :]
    j = 1 if direction == "u" else 0
    v1 = Mt[:, :, j]
    v2 = Mt[:, :, 2]
    logj = np.log(np.linalg.norm(np.cross(v1, v2), axis=-1))
    return logj, nxt


def cu_jacobian(f, pts, direction="u"):
    return np.exp(cocycle_step(f, pts, direction)[0])


# ---------------------------------------------------------------------------
# adaptive pushforward of phi * leaf volume
# ---------------------------------------------------------------------------

_G2 = np.polynomial.legendre.leggauss(2)


def _cell_base_measure(chart, cells, phi=None):
    """phi-weighted intrinsic volume of each (w0,w1,c0,c1) cell (2x2 Gauss)."""
    w0, w1, c0, c1 = cells.T
    xm = 0.5 * (_G2[0] + 1.0)
    total = np.zeros(len(cells))
    for aw, qw in zip(xm, _G2[1]):
        for ac, qc in zip(xm, _G2[1]):
            W = w0 + aw * (w1 - w0)
            C = c0 + ac * (c1 - c0)
            total += 0.25 * qw * qc * np.asarray(chart.area_element(W, C))
    total *= (w1 - w0) * (c1 - c0)
    if phi is not None:
        wm = 0.5 * (w0 + w1)
        cm = 0.5 * (c0 + c1)
        total *= phi.value_at(wm, cm)
    return total


def _corner_points(chart, cells):
    """Cell probe points: corners, center, and two edge midpoints.

    The center catches curvature that the corner spread misses at interior
    maxima of the cocycle; the edge midpoints attribute that curvature to an
    axis so refinement can split the right one."""
    w0, w1, c0, c1 = cells.T
    wm = 0.5 * (w0 + w1)
    cm = 0.5 * (c0 + c1)
    ws = np.stack([w0, w1, w0, w1, wm, wm, w0], axis=1).ravel()
    cs = np.stack([c0, c0, c1, c1, cm, c0, cm], axis=1).ravel()
    return chart.point(ws, cs).reshape(-1, 3)


@dataclass
class PatchPushforward:
    """Pushforward state of one leaf patch measure phi * leaf volume."""

    f: MapDescriptor
    phi: CuTestFunction
    direction: str
    n_steps: int
    cells: np.ndarray          # (m, 4)
    masses: np.ndarray         # (m,)
    mean_logs: np.ndarray      # (n_steps + 1, m)
    corner_pos: np.ndarray     # (7m, 3) probe positions after n_steps
    corner_logs: np.ndarray    # (7m,)
    passes: int = 0

    @property
    def ells(self):
        return np.array([float(pairwise_sum(self.masses * np.exp(self.mean_logs[n])))
                         for n in range(self.n_steps + 1)])

    def cell_weights(self, n=None):
        n = self.n_steps if n is None else n
        return self.masses * np.exp(self.mean_logs[n])

    def extend(self, extra_steps):
        """Continue the iteration on the frozen cell grid."""
        logs = [self.mean_logs]
        pos = self.corner_pos
        clogs = self.corner_logs
        for _ in range(extra_steps):
            dl, pos = cocycle_step(self.f, pos, self.direction)
            clogs = clogs + dl
            probes = clogs.reshape(-1, 7)
            logs.append((0.5 * probes[:, :4].mean(axis=1)
                         + 0.5 * probes[:, 4])[None, :])
        self.mean_logs = np.concatenate(logs, axis=0)
        self.corner_pos = pos
        self.corner_logs = clogs
        self.n_steps += extra_steps
        return self


def _push_corners(f, chart, cells, n_steps, direction):
    pts = _corner_points(chart, cells)
    logs = np.zeros((n_steps + 1, len(pts)))
    cur = pts
    acc = np.zeros(len(pts))
    for n in range(n_steps):
        dl, cur = cocycle_step(f, cur, direction)
        acc = acc + dl
        logs[n + 1] = acc
    return logs, cur


def pushforward(f: MapDescriptor, phi: CuTestFunction, n_steps,
                refine_tol=0.15, budget=80_000, max_passes=40,
                initial_cells=None):
    """Adaptively integrate phi * Jac^{cu} f^n over the support, n <= n_steps.

    Cells split (in both axes) while the accumulated log-Jacobian spread
    across their corners exceeds refine_tol; raises
    RefinementBudgetExceeded when the spread cannot be resolved within the
    cell budget.
    """
    _require_margulis_family(f)
    chart = phi.chart
    direction = chart.direction
    if initial_cells is None:
        nw, nc = phi.values.shape
        we = np.linspace(0.0, chart.extent_w, nw + 1)
        ce = np.linspace(0.0, chart.extent_c, nc + 1)
        W0, C0 = np.meshgrid(we[:-1], ce[:-1], indexing="ij")
        W1, C1 = np.meshgrid(we[1:], ce[1:], indexing="ij")
        cells = np.column_stack([W0.ravel(), W1.ravel(), C0.ravel(), C1.ravel()])
    else:
        cells = np.asarray(initial_cells, dtype=float)

    all_cells = []
    all_masses = []
    all_mean_logs = []
    all_pos = []
    all_clogs = []
    passes = 0
    pending = cells
    while True:
        logs, pos = _push_corners(f, chart, pending, n_steps, direction)
        # probes: w0c0, w1c0, w0c1, w1c1, center, (wm,c0), (w0,cm)
        per_cell = logs.reshape(n_steps + 1, -1, 7)
        # Simpson-flavored log value: center weighted against the corners
        mean_logs = 0.5 * per_cell[:, :, :4].mean(axis=2) + 0.5 * per_cell[:, :, 4]
        end = per_cell[n_steps]
        curv_w = 2.0 * np.abs(end[:, 5] - 0.5 * (end[:, 0] + end[:, 1]))
        curv_c = 2.0 * np.abs(end[:, 6] - 0.5 * (end[:, 0] + end[:, 2]))
        w_spread = np.maximum(np.maximum(np.abs(end[:, 1] - end[:, 0]),
                                         np.abs(end[:, 3] - end[:, 2])), curv_w)
        c_spread = np.maximum(np.maximum(np.abs(end[:, 2] - end[:, 0]),
                                         np.abs(end[:, 3] - end[:, 1])), curv_c)
        curvature = 2.0 * np.abs(end[:, 4] - end[:, :4].mean(axis=1))
        spread = np.maximum(end[:, :4].max(axis=1) - end[:, :4].min(axis=1),
                            np.maximum(curvature, np.maximum(curv_w, curv_c)))
        masses = _cell_base_measure(chart, pending, phi)
        keep = spread <= refine_tol
        live = masses > 0
        done = keep | ~live
        all_cells.append(pending[done])
        all_masses.append(masses[done])
        all_mean_logs.append(mean_logs[:, done])
        pos7 = pos.reshape(-1, 7, 3)
        clog7 = logs[n_steps].reshape(-1, 7)
        all_pos.append(pos7[done].reshape(-1, 3))
        all_clogs.append(clog7[done].ravel())
        todo = pending[~done]
        if len(todo) == 0:
            break
        passes += 1
        n_have = sum(len(c) for c in all_cells)
        if passes > max_passes or n_have + 4 * len(todo) > budget:
            raise RefinementBudgetExceeded(
                f"pushforward refinement needs more than {budget} cells "
                f"(pass {passes}, unresolved {len(todo)})")
        # split only along axes whose own spread is unresolved
        ws = w_spread[~done]
        cs = c_spread[~done]
        w0, w1, c0, c1 = todo.T
        wm = 0.5 * (w0 + w1)
        cm = 0.5 * (c0 + c1)
        split_w = ws > 0.5 * refine_tol
        split_c = cs > 0.5 * refine_tol
        # pure-curvature cells: halve the relatively larger axis
        neither = ~split_w & ~split_c
        rel_w = (w1 - w0) / chart.extent_w
        rel_c = (c1 - c0) / chart.extent_c
        split_w |= neither & (rel_w > rel_c)
        split_c |= neither & (rel_c >= rel_w)
        children = []
        both = split_w & split_c
        if both.any():
            for sw, swm in ((w0, wm), (wm, w1)):
                for sc, scm in ((c0, cm), (cm, c1)):
                    children.append(np.column_stack([sw, swm, sc, scm])[both])
        only_w = split_w & ~split_c
        if only_w.any():
            children.append(np.column_stack([w0, wm, c0, c1])[only_w])
            children.append(np.column_stack([wm, w1, c0, c1])[only_w])
        only_c = split_c & ~split_w
        if only_c.any():
            children.append(np.column_stack([w0, w1, c0, cm])[only_c])
            children.append(np.column_stack([w0, w1, cm, c1])[only_c])
        pending = np.concatenate(children)
    return PatchPushforward(
        f=f, phi=phi, direction=direction, n_steps=n_steps,
        cells=np.concatenate(all_cells),
        masses=np.concatenate(all_masses),
        mean_logs=np.concatenate(all_mean_logs, axis=1),
        corner_pos=np.concatenate(all_pos),
        corner_logs=np.concatenate(all_clogs),
        passes=passes,
    )


def ell(f: MapDescriptor, phi: CuTestFunction, n, **kw):
    """The n-th leaf-volume pushforward evaluated on phi."""
    return float(pushforward(f, phi, n, **kw).ells[n])


# ---------------------------------------------------------------------------
# the limit functional and dilation factor
# ---------------------------------------------------------------------------

@dataclass
class LeafFunctional:
    """Normalized limit of the pushforward functionals."""

    f: MapDescriptor
    phi1: CuTestFunction
    n_eval: int
    norm: float
    dilation: float
    ratios: np.ndarray
    cesaro_window: int
    converged_at: int
    pushforward_kw: dict = field(default_factory=dict)
    state: PatchPushforward = None

    def ell(self, phi, n):
        return ell(self.f, phi, n, **self.pushforward_kw)

    def __call__(self, phi: CuTestFunction):
        return self.ell(phi, self.n_eval) / self.norm

    def chart_pushforward(self, phi):
        pf = pushforward(self.f, phi, self.n_eval, **self.pushforward_kw)
        return pf


def margulis_iterate(f: MapDescriptor, phi1: CuTestFunction, n_max=40,
                     cesaro_window=8, tol=0.02, **pushforward_kw):
    """Power iteration of the pushforward functionals started at phi1.

    Returns the normalized limit functional and the dilation estimate (the
    Cesaro mean of the trailing ratios).  Raises NoConvergence if the
    trailing ratios still oscillate beyond tol relative to their mean.
    """
    _require_margulis_family(f)
    if not phi1.is_positive():
        raise ValueError("phi1 must be positive on a set with interior")
    pf = pushforward(f, phi1, n_max, **pushforward_kw)
    ells = pf.ells
    ratios = ells[1:] / ells[:-1]
    window = ratios[-cesaro_window:]
    dilation = float(window.mean())
    spread = float(np.abs(window - dilation).max())
    if spread > tol * dilation:
        raise NoConvergence(
            f"dilation ratios oscillate by {spread:.3g} over the Cesaro window",
            stage="margulis_iterate", residual=spread)
    if dilation <= 1.0:
        raise NoConvergence(f"dilation {dilation} not > 1", stage="margulis_iterate")
    within = np.abs(ratios - dilation) <= tol * dilation
    converged_at = n_max
    for n in range(len(ratios)):
        if within[n:].all():
            converged_at = n + 1
            break
    func = LeafFunctional(
        f=f, phi1=phi1, n_eval=n_max, norm=float(ells[-1]), dilation=dilation,
        ratios=ratios, cesaro_window=cesaro_window, converged_at=converged_at,
        pushforward_kw=pushforward_kw, state=pf)
    return func, dilation


def _functional_from_state(f, phi1, pf, cesaro_window, tol, pushforward_kw):
    ells = pf.ells
    ratios = ells[1:] / ells[:-1]
    window = ratios[-cesaro_window:]
    dilation = float(window.mean())
    spread = float(np.abs(window - dilation).max())
    if spread > tol * dilation:
        raise NoConvergence("dilation ratios oscillate beyond tol after resume",
                            stage="margulis_iterate", residual=spread)
    within = np.abs(ratios - dilation) <= tol * dilation
    converged_at = pf.n_steps
    for n in range(len(ratios)):
        if within[n:].all():
            converged_at = n + 1
            break
    return LeafFunctional(
        f=f, phi1=phi1, n_eval=pf.n_steps, norm=float(ells[-1]),
        dilation=dilation, ratios=ratios, cesaro_window=cesaro_window,
        converged_at=converged_at, pushforward_kw=pushforward_kw, state=pf)


def extend_functional(func: LeafFunctional, extra_steps, tol=0.02):
    """Resume the power iteration at a deeper horizon.

    The checkpointed cell partition seeds the new run, so refinement picks
    up where it left off; the cocycle is re-accumulated from the start (a
    frozen grid cannot resolve the deeper pushforwards honestly)."""
    pf = pushforward(func.f, func.phi1, func.n_eval + extra_steps,
                     initial_cells=func.state.cells, **func.pushforward_kw)
    return _functional_from_state(func.f, func.phi1, pf, func.cesaro_window,
                                  tol, func.pushforward_kw)


def save_functional(func: LeafFunctional, directory):
    """Checkpoint the iteration state: JSON manifest plus CSV tables."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    chart = func.phi1.chart
    manifest = {
        "map": func.f.to_table(),
        "n_eval": func.n_eval,
        "cesaro_window": func.cesaro_window,
        "pushforward_kw": func.pushforward_kw,
        "phi1_chart": {
            "base": list(map(float, chart.base)),
            "extent_w": chart.extent_w, "extent_c": chart.extent_c,
            "direction": chart.direction, "c_sign": chart.c_sign,
        },
        "phi1_shape": list(func.phi1.values.shape),
    }
    (directory / "functional.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True))
    np.savetxt(directory / "phi1_values.csv", func.phi1.values, delimiter=",")
    pf = func.state
    np.savetxt(directory / "cells.csv",
               np.column_stack([pf.cells, pf.masses]), delimiter=",",
               header="w0,w1,c0,c1,mass")
    np.savetxt(directory / "mean_logs.csv", pf.mean_logs, delimiter=",")
    np.savetxt(directory / "corners.csv",
               np.column_stack([pf.corner_pos, pf.corner_logs]), delimiter=",",
               header="x,y,t,log")


def load_functional(directory, tol=0.02):
    directory = Path(directory)
    manifest = json.loads((directory / "functional.json").read_text())
    f = MapDescriptor.from_table(manifest["map"])
    cs = manifest["phi1_chart"]
    chart = CuChart(np.array(cs["base"]), cs["extent_w"], cs["extent_c"],
                    cs["direction"], cs["c_sign"], chart_id="phi1")
    values = np.loadtxt(directory / "phi1_values.csv", delimiter=",", ndmin=2)
    phi1 = CuTestFunction(chart, values.reshape(manifest["phi1_shape"]))
    cells_mass = np.loadtxt(directory / "cells.csv", delimiter=",", ndmin=2)
    mean_logs = np.loadtxt(directory / "mean_logs.csv", delimiter=",", ndmin=2)
    corners = np.loadtxt(directory / "corners.csv", delimiter=",", ndmin=2)
    pf = PatchPushforward(
        f=f, phi=phi1, direction=chart.direction,
        n_steps=manifest["n_eval"], cells=cells_mass[:, :4],
        masses=cells_mass[:, 4], mean_logs=mean_logs,
        corner_pos=corners[:, :3], corner_logs=corners[:, 3])
    return _functional_from_state(f, phi1, pf, manifest["cesaro_window"],
                                  tol, manifest["pushforward_kw"])


# ---------------------------------------------------------------------------
# chart batteries
# ---------------------------------------------------------------------------

_BASES = np.array([
    [0.20, 0.30, 0.00],
    [0.61, 0.13, 0.37],
    [0.43, 0.77, 0.52],
    [0.09, 0.51, 0.18],
    [0.71, 0.44, 0.80],
    [0.33, 0.08, 0.64],
])


def default_phi1(direction="u", base=None, extent_w=0.4, grid=(8, 64)):
    base = _BASES[0] if base is None else np.asarray(base, dtype=float)
    chart = CuChart(base, extent_w=extent_w, extent_c=1.0, direction=direction,
                    chart_id="phi1")
    return indicator(chart, grid)


def default_charts(direction="u", n=4, extent_w=0.5, extent_c=1.0):
    charts = []
    for i in range(min(n, len(_BASES))):
        charts.append(CuChart(_BASES[i], extent_w, extent_c, direction=direction,
                              chart_id=f"{direction}{i}"))
    return charts


def excluded_chart(base, radius=EXCLUSION_RADIUS, max_period=EXCLUSION_MAX_PERIOD):
    """True if the base point sits inside a flagged compact-center-leaf tube."""
    return bool(min_distance_to_short_orbits(np.asarray(base, float)[None, :],
                                             max_period) < radius)


# ---------------------------------------------------------------------------
# Margulis systems (normalized chart histograms)
# ---------------------------------------------------------------------------

@dataclass
class MargulisSystem:
    sigma: str
    dilation: float
    charts: dict
    histograms: dict
    totals: dict
    meta: dict = field(default_factory=dict)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "sigma": self.sigma,
            "dilation": self.dilation,
            "meta": _jsonable(self.meta),
            "charts": {},
            "totals": {k: float(v) for k, v in self.totals.items()},
        }
        for cid, chart in self.charts.items():
            manifest["charts"][cid] = {
                "base": list(map(float, chart.base)),
                "extent_w": chart.extent_w,
                "extent_c": chart.extent_c,
                "direction": chart.direction,
                "c_sign": chart.c_sign,
                "hist_shape": list(np.shape(self.histograms[cid])),
            }
            hb = np.atleast_2d(self.histograms[cid])
            lines = ["i,j,mass"]
            for i in range(hb.shape[0]):
                for j in range(hb.shape[1]):
                    lines.append(f"{i},{j},{float(hb[i, j])!r}")
            (directory / f"hist_{cid}.csv").write_text("\n".join(lines) + "\n")
        (directory / "system.json").write_text(json.dumps(manifest, indent=1,
                                                          sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "system.json").read_text())
        charts = {}
        hists = {}
        for cid, spec in manifest["charts"].items():
            charts[cid] = CuChart(np.array(spec["base"]), spec["extent_w"],
                                  spec["extent_c"], spec["direction"],
                                  spec["c_sign"], chart_id=cid)
            rows = (directory / f"hist_{cid}.csv").read_text().strip().splitlines()[1:]
            data = np.array([[float(v) for v in r.split(",")] for r in rows])
            ni = int(data[:, 0].max()) + 1
            nj = int(data[:, 1].max()) + 1
            h = np.zeros((ni, nj))
            h[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
            hists[cid] = h.reshape(spec["hist_shape"])
        return cls(sigma=manifest["sigma"], dilation=manifest["dilation"],
                   charts=charts, histograms=hists,
                   totals=manifest["totals"], meta=manifest["meta"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _bin_histogram(pf: PatchPushforward, grid):
    """Aggregate refined cell weights into a fixed bin grid.

    Cells may span several bins along an axis (the refinement keeps the
    within-cell density variation below the refinement tolerance, so the
    weight is spread proportionally to parameter overlap).
    """
    nw, nc = grid
    chart = pf.phi.chart
    bw = chart.extent_w / nw
    bc = chart.extent_c / nc
    w0, w1, c0, c1 = pf.cells.T
    weights = pf.cell_weights()
    hist = np.zeros((nw, nc))
    iw0 = np.floor(w0 / bw + 1e-12).astype(int)
    ic0 = np.floor(c0 / bc + 1e-12).astype(int)
    span_w = int(np.ceil((w1 - w0).max() / bw)) + 1
    span_c = int(np.ceil((c1 - c0).max() / bc)) + 1
    for kw in range(span_w):
        idx_w = np.clip(iw0 + kw, 0, nw - 1)
        ow = np.clip(np.minimum(w1, (iw0 + kw + 1) * bw)
                     - np.maximum(w0, (iw0 + kw) * bw), 0.0, None)
        if not (ow > 0).any():
            continue
        for kc in range(span_c):
            idx_c = np.clip(ic0 + kc, 0, nc - 1)
            oc = np.clip(np.minimum(c1, (ic0 + kc + 1) * bc)
                         - np.maximum(c0, (ic0 + kc) * bc), 0.0, None)
            frac = ow * oc / ((w1 - w0) * (c1 - c0))
            sel = frac > 0
            if sel.any():
                np.add.at(hist, (idx_w[sel], idx_c[sel]), weights[sel] * frac[sel])
    return hist


def hist_rect_mass(hist, extents, rect):
    """Mass of a parameter rectangle from a bin histogram (linear partial bins)."""
    nw, nc = hist.shape
    ew, ec = extents
    cum = np.zeros((nw + 1, nc + 1))
    cum[1:, 1:] = hist.cumsum(0).cumsum(1)

    def at(w, c):
        x = np.clip(w / ew * nw, 0.0, nw)
        y = np.clip(c / ec * nc, 0.0, nc)
        i, j = int(x), int(y)
        fi, fj = x - i, y - j
        i2, j2 = min(i + 1, nw), min(j + 1, nc)
        return ((1 - fi) * (1 - fj) * cum[i, j] + fi * (1 - fj) * cum[i2, j]
                + (1 - fi) * fj * cum[i, j2] + fi * fj * cum[i2, j2])

    w0, w1, c0, c1 = rect
    return at(w1, c1) - at(w0, c1) - at(w1, c0) + at(w0, c0)


def cu_conditionals(functional: LeafFunctional, charts=None, grid=(256, 64),
                    holonomy_deltas=(0.05, 0.1), invariance_blocks=(4, 4)):
    """Leaf conditionals of the limit functional as per-chart histograms,
    plus the stable-holonomy invariance residual over a holonomy battery."""
    f = functional.f
    direction = "u" if f.direction == "forward" else "s"
    if charts is None:
        charts = default_charts(direction=direction)
    hists = {}
    totals = {}
    pfs = {}
    int_grid = (min(grid[0], 32), grid[1])
    for chart in charts:
        pf = functional.chart_pushforward(indicator(chart, int_grid))
        h = _bin_histogram(pf, grid) / functional.norm
        hists[chart.chart_id] = h
        totals[chart.chart_id] = float(h.sum())
        pfs[chart.chart_id] = pf
    # invariance along the transverse contracting foliation
    residual = 0.0
    battery = []
    for chart in charts[:2]:
        for delta in holonomy_deltas:
            target = chart.translated(delta_s=delta, chart_id=chart.chart_id + "h")
            hol = stable_holonomy(f, chart, target)
            pf_t = functional.chart_pushforward(indicator(target, int_grid))
            h_t = _bin_histogram(pf_t, grid) / functional.norm
            h_s = hists[chart.chart_id]
            nbw, nbc = invariance_blocks
            for bi in range(nbw):
                for bj in range(nbc):
                    w0 = (0.1 + 0.8 * bi / nbw) * chart.extent_w
                    w1 = (0.1 + 0.8 * (bi + 1) / nbw) * chart.extent_w
                    c0 = (0.1 + 0.8 * bj / nbc) * chart.extent_c
                    c1 = (0.1 + 0.8 * (bj + 1) / nbc) * chart.extent_c
                    m_src = hist_rect_mass(h_s, (chart.extent_w, chart.extent_c),
                                           (w0, w1, c0, c1))
                    cw, cc = hol.map_params(np.array([w0, w1]), np.array([c0, c1]))
                    m_tgt = hist_rect_mass(h_t, (target.extent_w, target.extent_c),
                                           (cw[0], cw[1], cc[0], cc[1]))
                    if m_src > 1e-12:
                        residual = max(residual, abs(m_tgt - m_src) / m_src)
                        battery.append((chart.chart_id, delta, float(m_src),
                                        float(m_tgt)))
    return MargulisSystem(
        sigma="cu" if direction == "u" else "cs",
        dilation=functional.dilation,
        charts={c.chart_id: c for c in charts},
        histograms=hists, totals=totals,
        meta={"s_invariance_residual": residual,
              "battery_size": len(battery),
              "n_eval": functional.n_eval})


# ---------------------------------------------------------------------------
# strong-leaf conditionals via center extension (hat sets)
# ---------------------------------------------------------------------------

def hat_chart(f: MapDescriptor, x, w_offset, extent_w):
    """Chart whose rectangle [0, extent_w] x [0, arc] is the center extension
    (hat) of the strong-leaf segment starting w_offset along the leaf at x."""
    arr = np.asarray(x, dtype=float)
    direction = "u" if f.direction == "forward" else "s"
    dirvec = _DIRVEC[direction]
    p = _wrap01(arr[None, :2] + w_offset * dirvec[None, :])[0]
    base = np.array([p[0], p[1], arr[2]])
    if f.direction == "forward":
        arc = float(f.tau(arr[2]))
        c_sign = 1.0
    else:
        fwd = replace(f, direction="forward")
        prev = apply_map(f, base)  # f is the inverse map here
        arc = float(fwd.tau(prev[2]))
        c_sign = -1.0
    return CuChart(base, extent_w=extent_w, extent_c=arc, direction=direction,
                   c_sign=c_sign)


def hat_mass(functional: LeafFunctional, x, w0, w1, grid=(16, 48)):
    """Unnormalized strong-leaf conditional mass of the segment [w0, w1] at x."""
    chart = hat_chart(functional.f, x, w0, extent_w=w1 - w0)
    return functional(indicator(chart, grid))


def u_conditionals(system_cu: MargulisSystem, functional: LeafFunctional,
                   bases=None, extent_w=0.5, n_bins=256,
                   exclusion_radius=EXCLUSION_RADIUS):
    """Strong-leaf conditionals m(segment) = m^{leaf}(hat segment).

    Histograms are 1-D in the leaf parameter; base charts through flagged
    compact-center-leaf tubes raise CompactLeafConflict.
    """
    f = functional.f
    direction = "u" if f.direction == "forward" else "s"
    if bases is None:
        bases = [c.base for c in default_charts(direction=direction)]
    charts = {}
    hists = {}
    totals = {}
    for i, base in enumerate(bases):
        base = np.asarray(base, dtype=float)
        if min_distance_to_short_orbits(base[None, :],
                                        EXCLUSION_MAX_PERIOD) < exclusion_radius:
            raise CompactLeafConflict(
                f"base {base} lies in a flagged compact-center-leaf tube")
        chart = hat_chart(f, base, 0.0, extent_w)
        chart = replace(chart, chart_id=f"{direction}seg{i}")
        pf = functional.chart_pushforward(indicator(chart, (min(n_bins, 64), 48)))
        h2 = _bin_histogram(pf, (n_bins, 48)) / functional.norm
        h = h2.sum(axis=1)
        charts[chart.chart_id] = chart
        hists[chart.chart_id] = h
        totals[chart.chart_id] = float(h.sum())
    return MargulisSystem(
        sigma=direction, dilation=functional.dilation,
        charts=charts, histograms=hists, totals=totals,
        meta={"extent_w": extent_w, "n_bins": n_bins,
              "exclusion_radius": exclusion_radius,
              "exclusion_max_period": EXCLUSION_MAX_PERIOD})


def segment_dilation_residual(functional: LeafFunctional, bases=None,
                              segments=((0.0, 0.2), (0.1, 0.35), (0.05, 0.4))):
    """Worst relative defect of m(f A) = D * m(A) over a battery of segments."""
    f = functional.f
    direction = "u" if f.direction == "forward" else "s"
    if bases is None:
        bases = [c.base for c in default_charts(direction=direction)][:3]
    worst = 0.0
    for base in bases:
        base = np.asarray(base, dtype=float)
        for (w0, w1) in segments:
            m = hat_mass(functional, base, w0, w1)
            fx = apply_map(f, base)
            # image endpoints of the segment on the image leaf
            seg_chart = hat_chart(f, base, 0.0, max(w1, 1e-9))
            ends = apply_map(f, seg_chart.point(np.array([w0, w1]),
                                                np.zeros(2)).reshape(-1, 3))
            img_chart = hat_chart(f, fx, 0.0, 1.0)
            wps, _, _ = img_chart.params_of(ends)
            lo, hi = float(min(wps)), float(max(wps))
            m_img = hat_mass(functional, fx, lo, hi)
            ratio = m_img / m
            worst = max(worst, abs(ratio - functional.dilation) / functional.dilation)
    return worst


def cs_quasi_invariance_check(functional: LeafFunctional, bases=None,
                              shifts=((0.0, 0.02), (0.1, 0.0), (0.3, 0.05),
                                      (-0.2, 0.03), (0.45, 0.08)),
                              segments=((0.0, 0.25), (0.1, 0.4))):
    """Mass ratios of strong-leaf segments under center-stable holonomies.

    Each holonomy slides the base by a center time and a stable offset; the
    induced leaf correspondence preserves the leaf parameter.  Returns the
    worst ratio and the theoretical bound D^-1 + 1 + D.
    """
    from .model import flow
    f = functional.f
    direction = "u" if f.direction == "forward" else "s"
    if bases is None:
        bases = [c.base for c in default_charts(direction=direction)][:2]
    perp = _DIRVEC["s" if direction == "u" else "u"]
    D = functional.dilation
    bound = 1.0 / D + 1.0 + D
    ratios = []
    for base in bases:
        base = np.asarray(base, dtype=float)
        for (c_shift, s_shift) in shifts:
            p = _wrap01(base[None, :2] + s_shift * perp[None, :])[0]
            y = flow(np.array([p[0], p[1], base[2]]), c_shift)
            for (w0, w1) in segments:
                m_x = hat_mass(functional, base, w0, w1)
                m_y = hat_mass(functional, y, w0, w1)
                ratios.append(m_x / m_y)
    ratios = np.asarray(ratios)
    return {
        "ratios": ratios,
        "worst": float(np.max(np.abs(np.log(ratios)))),
        "max_ratio": float(ratios.max()),
        "min_ratio": float(ratios.min()),
        "bound": bound,
        "within_bound": bool((ratios < bound).all()
                             and (ratios > 1.0 / bound).all()),
    }


def stable_system(f: MapDescriptor, n_max=40, phi1=None, **kw):
    """Run the whole pipeline for the inverse map: the stable Margulis system.

    Returns (system on the contracting leaves, D_s = 1 / inverse dilation,
    inverse-pipeline functional).
    """
    _require_margulis_family(f)
    finv = f.inverse()
    direction = "s" if f.direction == "forward" else "u"
    if phi1 is None:
        phi1 = default_phi1(direction=direction)
    func_inv, dil_inv = margulis_iterate(finv, phi1, n_max=n_max, **kw)
    # the holonomy-invariance criterion is checked on the forward system;
    # keep the inverse battery lean (it feeds quasi-product sampling)
    sys_cs = cu_conditionals(func_inv, charts=default_charts(direction)[:2],
                             holonomy_deltas=())
    sys_s = u_conditionals(sys_cs, func_inv,
                           bases=[c.base for c in default_charts(direction)[:2]])
    sys_s.meta["dilation_of_inverse_pipeline"] = dil_inv
    sys_s.meta["D_s"] = 1.0 / dil_inv
    return sys_s, 1.0 / dil_inv, func_inv


# ---------------------------------------------------------------------------
# diagnostics used by the acceptance battery
# ---------------------------------------------------------------------------

def eigen_equation_residual(functional: LeafFunctional, charts=None, grid=(24, 32)):
    """max |ell_{N+1}(phi) - D ell_N(phi)| / (D ell_N(phi)) over a battery."""
    f = functional.f
    direction = "u" if f.direction == "forward" else "s"
    if charts is None:
        charts = default_charts(direction=direction)
    worst = 0.0
    for chart in charts:
        phi = indicator(chart, grid)
        pf = pushforward(f, phi, functional.n_eval + 1,
                         **functional.pushforward_kw)
        ells = pf.ells
        lhs = ells[functional.n_eval + 1]
        rhs = functional.dilation * ells[functional.n_eval]
        worst = max(worst, abs(lhs - rhs) / rhs)
    return worst


def atom_refinement_ratio(functional: LeafFunctional, base=None, extent_w=0.5,
                          n_bins=128):
    """Max strong-leaf cell mass at n_bins vs 2*n_bins (atomless: ratio ~ 2)."""
    f = functional.f
    if base is None:
        base = _BASES[1]
    chart = hat_chart(f, np.asarray(base, float), 0.0, extent_w)
    pf = functional.chart_pushforward(indicator(chart, (64, 48)))
    coarse = _bin_histogram(pf, (n_bins, 48)).sum(axis=1)
    fine = _bin_histogram(pf, (2 * n_bins, 48)).sum(axis=1)
    return float(coarse.max() / fine.max())


def center_tube_masses(functional: LeafFunctional, chart=None, widths=(0.2, 0.1, 0.05),
                       grid=(256, 64)):
    """Mass of w-tubes around a center line; linear decay witnesses no center atoms."""
    if chart is None:
        direction = "u" if functional.f.direction == "forward" else "s"
        chart = default_charts(direction=direction)[0]
    pf = functional.chart_pushforward(indicator(chart, (min(grid[0], 32), grid[1])))
    hist = _bin_histogram(pf, grid) / functional.norm
    out = []
    mid = 0.5 * chart.extent_w
    for wdt in widths:
        rect = (mid - wdt / 2, mid + wdt / 2, 0.0, chart.extent_c)
        out.append(hist_rect_mass(hist, (chart.extent_w, chart.extent_c), rect))
    return np.asarray(out)


def support_cloud(phi: CuTestFunction, max_points=4000):
    """Support samples in approximate leafwise arclength coordinates."""
    nw, nc = phi.values.shape
    chart = phi.chart
    wc = (np.arange(nw) + 0.5) / nw * chart.extent_w
    cc = (np.arange(nc) + 0.5) / nc * chart.extent_c
    W, C = np.meshgrid(wc, cc, indexing="ij")
    mask = phi.values > 0
    pts = np.column_stack([
        (W[mask] * np.asarray(chart.area_element(W[mask], C[mask]))),
        C[mask]])
    if len(pts) > max_points:
        pts = pts[:: len(pts) // max_points + 1]
    return pts


def functional_upper_bound_constant(functional: LeafFunctional, radius=0.1,
                                    calibration=None):
    """Calibrate C with Lambda(phi) <= C * r^{cu}(supp phi, R) * sup phi."""
    if calibration is None:
        calibration = [functional.phi1]
        direction = "u" if functional.f.direction == "forward" else "s"
        calibration.append(indicator(default_charts(direction=direction)[1], (16, 16)))
    C = 0.0
    for phi in calibration:
        r = covering_number(support_cloud(phi), radius)
        C = max(C, functional(phi) / (r * phi.sup()))
    return C


def pushed_volume(f: MapDescriptor, chart, n, grid=(16, 24), **kw):
    """Intrinsic leaf volume of f^n(chart rectangle)."""
    return ell(f, indicator(chart, grid), n, **kw)
