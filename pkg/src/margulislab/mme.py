"""Measures of maximal entropy: estimators, quasi-products, twins, dichotomy.

Three independent entropy estimators are cross-checked: strong-leaf volume
growth, the log spectral radius of a topological box-transition matrix, and
the log dilation factor of the Margulis iteration.  Quasi-product measures
are sampled from a leaf-conditional quotient plus transverse conditionals
over a finite cover; their center exponents, box histograms, and unstable
entropies feed a dichotomy verdict with explicit diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import (CoverGap, NotIrreducible, UnboundedWc, ZeroMassCell)
from .foliation import CuChart, LeafCurve
from .margulis import (cocycle_step, cu_conditionals, default_charts,
                       default_phi1, hat_mass, margulis_iterate,
                       stable_system, u_conditionals)
from .model import (E_S, E_U, LAMBDA, LOG_LAMBDA, MapDescriptor, _wrap01,
                    apply_map, displacement, flow, metric_weights,
                    normalize_points, pairwise_sum, periodic_orbit_points)
from .splitting import lyapunov_exponent

VERDICTS = ("NonhyperbolicCase", "TwoHyperbolicMMEs", "Inconclusive")


# ---------------------------------------------------------------------------
# box transition model
# ---------------------------------------------------------------------------

@dataclass
class BoxModel:
    resolution: tuple
    matrix: sp.csr_matrix
    core: np.ndarray          # box indices of the dominant recurrent class
    rho: float
    right: np.ndarray         # Perron right vector on the core
    left: np.ndarray          # Perron left vector on the core

    @property
    def n_boxes(self):
        nx, ny, nt = self.resolution
        return nx * ny * nt

    def box_index(self, pts):
        nx, ny, nt = self.resolution
        pts = np.asarray(pts, dtype=float)
        ix = np.minimum((pts[..., 0] * nx).astype(int), nx - 1)
        iy = np.minimum((pts[..., 1] * ny).astype(int), ny - 1)
        it = np.minimum((pts[..., 2] * nt).astype(int), nt - 1)
        return (ix * ny + iy) * nt + it

    def box_corner(self, idx):
        nx, ny, nt = self.resolution
        it = idx % nt
        iy = (idx // nt) % ny
        ix = idx // (nt * ny)
        return np.stack([ix / nx, iy / ny, it / nt], axis=-1)


def _power_iteration(M, tol=1e-13, max_iter=20000):
    n = M.shape[0]
    v = np.full(n, 1.0 / n)
    rho = 0.0
    for _ in range(max_iter):
        w = M @ v
        new = float(w.sum())
        if new <= 0:
            return 0.0, v
        w = w / new
        if abs(new - rho) <= tol * max(new, 1.0):
            return new, w
        rho, v = new, w
    return rho, v


def _box_offsets(subdiv, iterate, nx, ny):
    """Per-box sample offsets: a cubic grid for the first iterate, lines
    aligned with the expanding eigendirection (wrapped inside the box) for
    higher iterates, whose images need dense sampling along the stretch."""
    if iterate <= 1:
        off = (np.arange(subdiv) + 0.5) / subdiv
        ox, oy, ot = np.meshgrid(off, off, off, indexing="ij")
        return np.column_stack([ox.ravel(), oy.ravel(), ot.ravel()])
    # the m-fold image stretches by lambda^m: the in-plane sampling density
    # must resolve it or transitions are lost
    s_xy = max(subdiv, int(np.ceil(4.0 * LAMBDA ** (iterate / 2.0))))
    offp = (np.arange(s_xy) + 0.5) / s_xy
    offt = (np.arange(3) + 0.5) / 3.0
    ox, oy, ot = np.meshgrid(offp, offp, offt, indexing="ij")
    return np.column_stack([ox.ravel(), oy.ravel(), ot.ravel()])


def build_box_model(apply_fn, resolution, subdiv=3, iterate=1):
    """0/1 box transition matrix with Perron data of its dominant recurrent class.

    apply_fn maps (m, 3) arrays of points and is applied `iterate` times;
    transitions are detected from sample points per box (an
    under-approximation of the true topological transitions).
    """
    nx, ny, nt = resolution
    n = nx * ny * nt
    offsets = _box_offsets(subdiv, iterate, nx, ny)

    ix = np.arange(nx)
    iy = np.arange(ny)
    it = np.arange(nt)
    IX, IY, IT = np.meshgrid(ix, iy, it, indexing="ij")
    corners = np.column_stack([(IX / nx).ravel(), (IY / ny).ravel(),
                               (IT / nt).ravel()])
    scale = np.array([1.0 / nx, 1.0 / ny, 1.0 / nt])

    rows = []
    cols = []
    m = BoxModel(resolution=resolution, matrix=None, core=None, rho=0.0,
                 right=None, left=None)
    chunk = max(1, 2_000_000 // len(offsets))
    for start in range(0, n, chunk):
        corner_block = corners[start:start + chunk]
        pts = (corner_block[:, None, :] + offsets[None, :, :] * scale[None, None, :])
        pts = pts.reshape(-1, 3)
        img = pts
        for _ in range(iterate):
            img = apply_fn(img)
        tgt = m.box_index(img).reshape(len(corner_block), -1)
        src = np.repeat(np.arange(start, start + len(corner_block)), tgt.shape[1])
        rows.append(src)
        cols.append(tgt.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.ones(len(rows), dtype=np.int8)
    M = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    M.data[:] = 1

    n_comp, labels = connected_components(M, directed=True, connection="strong")
    best = (0.0, None, None)
    sizes = np.bincount(labels, minlength=n_comp)
    diag = M.diagonal()
    candidates = np.unique(np.concatenate([
        np.where(sizes[labels] > 1)[0], np.where(diag > 0)[0]]))
    cand_labels = np.unique(labels[candidates]) if len(candidates) else []
    for lab in cand_labels:
        idx = np.where(labels == lab)[0]
        sub = M[idx][:, idx].astype(float)
        rho, v = _power_iteration(sub)
        if rho > best[0]:
            best = (rho, idx, v)
    rho, core, v = best
    if core is None or rho < 1.0 - 1e-9:
        raise NotIrreducible("no recurrent class with spectral radius >= 1")
    sub = M[core][:, core].astype(float)
    _, left = _power_iteration(sub.T.tocsr())
    return BoxModel(resolution=resolution, matrix=M, core=core, rho=rho,
                    right=v, left=left)


def entropy_box(f, resolution, subdiv=3, iterate=1):
    """(1/m) log spectral radius of the m-th iterate's box transition matrix."""
    apply_fn = f if callable(f) else (lambda pts: apply_map(f, pts))
    model = build_box_model(apply_fn, resolution, subdiv=subdiv, iterate=iterate)
    return float(np.log(model.rho)) / iterate, model


def box_ladder(f, rungs=((1, (32, 32, 16)), (2, (32, 32, 16)),
                         (4, (32, 32, 16)))):
    """Iterate ladder of box entropies with an increment extrapolation.

    Box chains over-count by a resolution-independent pseudo-orbit
    fattening factor C, so (1/m) log rho_m = h + (log C_m)/m decreases along
    the iterate ladder; the two-step increment (log rho_4 - log rho_2)/2
    cancels both the constant and its parity oscillation.
    """
    values = []
    models = []
    logs = {}
    for iterate, res in rungs:
        val, model = entropy_box(f, res, iterate=iterate)
        values.append(val)
        models.append(model)
        logs[iterate] = val * iterate
    values = np.asarray(values)
    ms = sorted(logs)
    m_hi, m_lo = ms[-1], ms[-2]
    extrapolated = (logs[m_hi] - logs[m_lo]) / (m_hi - m_lo)
    return values, float(extrapolated), models


@dataclass
class ParrySampler:
    """Start-point sampler of the entropy-maximizing Markov chain on boxes."""

    model: BoxModel
    stationary: np.ndarray
    transition: sp.csr_matrix

    def __call__(self, rng, n):
        nx, ny, nt = self.model.resolution
        scale = np.array([1.0 / nx, 1.0 / ny, 1.0 / nt])
        pick = rng.choice(len(self.stationary), size=n, p=self.stationary)
        corners = self.model.box_corner(self.model.core[pick])
        return corners + rng.random((n, 3)) * scale[None, :]

    def chain_entropy(self):
        P = self.transition
        logs = P.copy()
        logs.data = np.log(logs.data)
        ent = -np.asarray((P.multiply(logs)).sum(axis=1)).ravel()
        return float(np.dot(self.stationary, ent))


def parry_sampler(model: BoxModel):
    sub = model.matrix[model.core][:, model.core].astype(float)
    v = model.right
    P = sub.multiply(v[None, :]) / (model.rho * v[:, None])
    P = sp.csr_matrix(P)
    # renormalize rows exactly (kills power-iteration roundoff)
    rs = np.asarray(P.sum(axis=1)).ravel()
    P = sp.diags(1.0 / rs) @ P
    p = model.left * model.right
    p = p / p.sum()
    return ParrySampler(model=model, stationary=p, transition=sp.csr_matrix(P))


# ---------------------------------------------------------------------------
# curve-growth entropy
# ---------------------------------------------------------------------------

def entropy_curve_growth(f: MapDescriptor, u_segment=None, n=24, n_nodes=65,
                         fit_lo=None):
    """Least-squares slope of log leaf length of f^k(segment), k in [n/2, n].

    The length is computed from the expanding-direction cocycle accumulated
    along node orbits, so no point explosion occurs at large k.
    """
    if u_segment is None:
        u_segment = (np.array([0.37, 0.61, 0.42]), 0.5)
    if isinstance(u_segment, LeafCurve):
        pts = u_segment.points()
        idx = np.linspace(0, len(pts) - 1, min(n_nodes, len(pts))).astype(int)
        nodes = pts[idx]
        seg_w = u_segment.w_grid[idx]
    else:
        base, length = u_segment
        seg_w = np.linspace(0.0, length, n_nodes)
        chart = CuChart(np.asarray(base, float), length, 1.0)
        nodes = chart.point(seg_w, np.zeros_like(seg_w)).reshape(-1, 3)
    weights = metric_weights(nodes[:, 2])[:, 1]
    dw = np.gradient(seg_w)
    mass = np.abs(dw) * weights
    direction = "u" if f.direction == "forward" else "s"
    j = 1 if direction == "u" else 0
    cur = nodes
    acc = np.zeros(len(nodes))
    logL = [np.log(pairwise_sum(mass))]
    from .model import differential
    for _ in range(n):
        nxt = apply_map(f, cur)
        M = differential(f, cur)
        w0 = metric_weights(cur[:, 2])
        w1 = metric_weights(nxt[:, 2])
        Mt = M * w1[:, :, None] / w0[:, None, :]
        acc = acc + np.log(np.linalg.norm(Mt[:, :, j], axis=-1))
        cur = nxt
        logL.append(np.log(pairwise_sum(mass * np.exp(acc))))
    logL = np.asarray(logL)
    lo = int(np.ceil(n / 2)) if fit_lo is None else fit_lo
    ks = np.arange(lo, n + 1)
    A = np.column_stack([np.ones_like(ks, dtype=float), ks])
    coef, *_ = np.linalg.lstsq(A, logL[lo:], rcond=None)
    return float(coef[1]), logL


# ---------------------------------------------------------------------------
# quasi-product measures
# ---------------------------------------------------------------------------

def _perp_of(direction):
    return E_S if direction == "u" else E_U


def _product_membership(chart, s_half, pts):
    """Sampling multiplicity of each point in the product box
    chart x transverse window.

    The box is {A^k(base + w u) + z s: w in [0, W], c in [0, extent_c),
    |z| <= s_half} with k the winding count of the center offset.  A long
    strip wraps over itself on the torus, so each distinct (w, z) preimage
    counts: the sampler's density is proportional to the multiplicity, not
    to bare membership.  The test works in pulled-back coordinates where
    the transverse window dilates by lambda^k.
    """
    from .model import SEAM_EPS, _apply_cat_power
    pts = np.asarray(pts, dtype=float)
    dirv = E_U if chart.direction == "u" else E_S
    perp = _perp_of(chart.direction)
    lam_rate = LAMBDA if chart.direction == "u" else 1.0 / LAMBDA
    c = np.mod(chart.c_sign * (pts[:, 2] - chart.base[2]), 1.0)
    on_c = c <= chart.extent_c + 1e-12
    k = np.floor(chart.base[2] + chart.c_sign * c + SEAM_EPS).astype(int)
    q = _apply_cat_power(pts[:, :2].copy(), -k)
    d = q - chart.base[None, :2]
    d -= np.round(d)
    z_bound = s_half * lam_rate ** k.astype(float)
    R = int(np.ceil(chart.extent_w)) + 3
    count = np.zeros(len(pts), dtype=np.int64)
    for mx in range(-R, R + 1):
        for my in range(-R, R + 1):
            dm = d + np.array([mx, my], dtype=float)
            w = dm @ dirv
            off = dm @ perp
            count += ((w >= -1e-9) & (w <= chart.extent_w + 1e-9)
                      & (np.abs(off) <= z_bound))
    return count * on_c


def _membership_count(charts, s_extent, pts):
    """Total sampling multiplicity over the cover."""
    count = np.zeros(len(np.atleast_2d(pts)), dtype=np.int64)
    for chart in charts:
        count += _product_membership(chart, s_extent / 2, pts)
    return np.maximum(count, 1)


@dataclass
class QuasiProductMeasure:
    """Sampler assembling a quotient on one foliation with transverse
    conditionals, over a finite cover with mass-proportional weights."""

    tag: str
    f: MapDescriptor
    charts: list
    weights: np.ndarray
    hists: list
    s_extent: float
    cond_hist: np.ndarray
    seed_meta: dict = field(default_factory=dict)

    def _raw_sample(self, rng, n):
        pick = rng.choice(len(self.charts), size=n, p=self.weights)
        out = np.empty((n, 3))
        direction = self.charts[0].direction
        perp = _perp_of(direction)
        for i, chart in enumerate(self.charts):
            sel = pick == i
            m = int(sel.sum())
            if m == 0:
                continue
            hist = self.hists[i]
            flat = hist.ravel()
            cells = rng.choice(len(flat), size=m, p=flat / flat.sum())
            nw, nc = hist.shape
            iw, ic = np.divmod(cells, nc)
            w = (iw + rng.random(m)) / nw * chart.extent_w
            c = (ic + rng.random(m)) / nc * chart.extent_c
            y = chart.point(w, c).reshape(-1, 3)
            q = self.cond_hist
            zc = rng.choice(len(q), size=m, p=q / q.sum())
            z = (zc + rng.random(m)) / len(q) * self.s_extent - self.s_extent / 2
            y[:, :2] = _wrap01(y[:, :2] + z[:, None] * perp[None, :])
            out[sel] = y
        return out

    def sample(self, rng, n):
        """Partition-of-unity draw: rejection by 1/(cover multiplicity)."""
        out = []
        have = 0
        while have < n:
            cand = self._raw_sample(rng, max(n - have, 64) * 2)
            mult = _membership_count(self.charts, self.s_extent, cand)
            keep = rng.random(len(cand)) * mult <= 1.0
            kept = cand[keep]
            out.append(kept)
            have += len(kept)
        return np.concatenate(out)[:n]


def quasi_product(f: MapDescriptor, quotient_system, conditional_system,
                  cover=None, s_extent=0.5, tag="cu*s", coverage_floor=0.98,
                  rng_probe=None):
    """Quasi-product sampler: quotient leaf conditionals x transverse ones.

    Cover charts are weighted by their local quotient masses; a probe cloud
    checks the product neighborhoods actually cover the manifold (CoverGap
    otherwise).  The transverse draw uses the conditional system's histogram
    (leaf conditionals are continuous across nearby leaves).
    """
    charts = list(quotient_system.charts.values()) if cover is None else cover
    hists = []
    weights = []
    cond_sigma = conditional_system.sigma
    for chart in charts:
        h = np.maximum(np.asarray(quotient_system.histograms[chart.chart_id]),
                       0.0).copy()
        # the quotient draw carries the unnormalized transverse window mass,
        # metrically an arclength factor lambda^{-t} (s-windows) or
        # lambda^{+t} (u-windows) at the drawn leaf point
        nc = h.shape[1]
        cb = (np.arange(nc) + 0.5) / nc * chart.extent_c
        tb = np.mod(chart.base[2] + chart.c_sign * cb, 1.0)
        factor = LAMBDA ** (-tb) if cond_sigma == "s" else LAMBDA ** tb
        h *= factor[None, :]
        hists.append(h)
        # the paper's partition-of-unity weight: the box's own local mass
        weights.append(float(h.sum()))
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    cond = list(conditional_system.histograms.values())[0]
    cond = np.maximum(np.asarray(cond, dtype=float), 1e-300)
    qp = QuasiProductMeasure(tag=tag, f=f, charts=charts, weights=weights,
                             hists=hists, s_extent=s_extent, cond_hist=cond)
    # coverage probe: every volume sample must be reachable by some product box
    rng = np.random.default_rng(0) if rng_probe is None else rng_probe
    probe = rng.random((4000, 3))
    covered = np.zeros(len(probe), dtype=bool)
    for chart in charts:
        covered |= _product_membership(chart, s_extent / 2, probe) > 0
    frac = float(covered.mean())
    if frac < coverage_floor:
        raise CoverGap(f"product cover reaches only {frac:.3f} of the manifold")
    qp.seed_meta["cover_fraction"] = frac
    return qp


# ---------------------------------------------------------------------------
# unstable entropy
# ---------------------------------------------------------------------------

@dataclass
class UPartition:
    """Strong-leaf cells: t-bands x transverse strips x leaf intervals."""

    n_bands: int = 8
    strip_width: float = 0.1
    cell_len: float = 0.4
    direction: str = "u"

    def coords(self, pts):
        dirv = E_U if self.direction == "u" else E_S
        perp = _perp_of(self.direction)
        eta = pts[:, :2] @ dirv
        zeta = pts[:, :2] @ perp
        band = np.minimum((pts[:, 2] * self.n_bands).astype(int), self.n_bands - 1)
        strip = np.floor(zeta / self.strip_width).astype(int)
        return eta, band, strip

    def tube_key(self, band, strip):
        return band.astype(np.int64) * 10_000 + strip


def unstable_entropy(f: MapDescriptor, sampler, system_u, partition=None,
                     depths=(2, 4), n_samples=300_000, seed=0, k_min=3,
                     max_dropped=0.5):
    """Conditional-measure entropy along the strong foliation.

    Estimates -(1/n) log mu_leaf(n-cylinder) from tube-mate counts around
    each sample, with geometric cylinders obtained by transporting cell
    boundaries through the leafwise affine cocycle, Richardson-extrapolated
    in the depth to cancel the O(1/n) partition-boundary bias.
    """
    part = partition or UPartition(direction="u" if f.direction == "forward"
                                   else "s")
    rng = np.random.default_rng(seed)
    pts = np.asarray(sampler(rng, n_samples), dtype=float)
    eta0, band0, strip0 = part.coords(pts)
    keys = part.tube_key(band0, strip0)
    cell0 = np.floor(eta0 / part.cell_len)
    lo = cell0 * part.cell_len
    hi = lo + part.cell_len

    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    sorted_eta = eta0[order]
    uniq, starts = np.unique(sorted_keys, return_index=True)
    bounds = np.append(starts, len(sorted_keys))

    h = 1e-7
    dirv = E_U if part.direction == "u" else E_S
    n_max = max(depths)
    cur = pts
    probe = pts.copy()
    probe[:, :2] = _wrap01(probe[:, :2] + h * dirv[None, :])
    intervals = {0: (lo.copy(), hi.copy())}
    cur_lo, cur_hi = lo.copy(), hi.copy()
    pb_scale = np.ones(len(pts))
    back_lo, back_hi = {}, {}
    eta_cur = eta0.copy()
    for step in range(1, n_max + 1):
        nxt = apply_map(f, cur)
        nxt_probe = apply_map(f, probe)
        eta_n = nxt[:, :2] @ dirv
        d = displacement(nxt, nxt_probe)
        deta = d[:, 0] * (E_S @ dirv) + d[:, 1] * (E_U @ dirv)
        scale = deta / h
        # transport the constraint interval and intersect with the new cell
        new_lo = eta_n + (cur_lo - eta_cur) * scale
        new_hi = eta_n + (cur_hi - eta_cur) * scale
        swap = new_lo > new_hi
        new_lo2 = np.where(swap, new_hi, new_lo)
        new_hi2 = np.where(swap, new_lo, new_hi)
        cell_lo = np.floor(eta_n / part.cell_len) * part.cell_len
        cur_lo = np.maximum(new_lo2, cell_lo)
        cur_hi = np.minimum(new_hi2, cell_lo + part.cell_len)
        pb_scale = pb_scale * scale
        if step in depths:
            back = (np.stack([cur_lo, cur_hi], axis=1) - eta_n[:, None])
            back = eta0[:, None] + back / pb_scale[:, None]
            back_lo[step] = np.minimum(back[:, 0], back[:, 1])
            back_hi[step] = np.maximum(back[:, 0], back[:, 1])
        cur = nxt
        probe = nxt.copy()
        probe[:, :2] = _wrap01(cur[:, :2] + h * dirv[None, :])
        eta_cur = eta_n

    # per-sample tube-mate counts via sorted eta within each tube
    inv_pos = np.empty(len(pts), dtype=np.int64)
    inv_pos[order] = np.arange(len(pts))
    key_to_slot = {k: i for i, k in enumerate(uniq)}
    slots = np.array([key_to_slot[k] for k in keys])
    t_lo = starts[slots]
    t_hi = bounds[slots + 1]
    tube_sizes = t_hi - t_lo

    tube_sorted = np.empty(len(pts))
    for i in range(len(uniq)):
        seg = sorted_eta[bounds[i]:bounds[i + 1]]
        seg.sort()
        tube_sorted[bounds[i]:bounds[i + 1]] = seg

    def counts_in(lo_arr, hi_arr):
        out = np.empty(len(pts), dtype=np.int64)
        for i in range(len(uniq)):
            seg = tube_sorted[bounds[i]:bounds[i + 1]]
            sel = slots == i
            out[sel] = (np.searchsorted(seg, hi_arr[sel], side="right")
                        - np.searchsorted(seg, lo_arr[sel], side="left"))
        return out

    n_cell = counts_in(lo, hi)
    hs = {}
    ses = {}
    usable_frac = {}
    for depth in depths:
        n_cyl = counts_in(back_lo[depth], back_hi[depth])
        good = n_cyl >= k_min  # ratio 1 is valid: atomic conditionals give 0
        usable_frac[depth] = float(good.mean())
        if usable_frac[depth] < 1.0 - max_dropped:
            raise ZeroMassCell(
                f"{1 - usable_frac[depth]:.2f} of depth-{depth} cylinders "
                "underflow the mate counts")
        vals = -np.log(n_cyl[good] / n_cell[good]) / depth
        # cluster-aware error: tubes are the independent units
        tube_of = slots[good]
        means = np.zeros(len(uniq))
        counts = np.bincount(tube_of, minlength=len(uniq)).astype(float)
        sums = np.bincount(tube_of, weights=vals, minlength=len(uniq))
        nz = counts > 0
        means[nz] = sums[nz] / counts[nz]
        hs[depth] = float(vals.mean())
        ses[depth] = float(means[nz].std(ddof=1) / np.sqrt(nz.sum()))
    d1, d2 = sorted(depths)[:2]
    value = (d2 * hs[d2] - d1 * hs[d1]) / (d2 - d1)
    stderr = float(np.hypot(
        np.hypot(d2 * ses[d2], d1 * ses[d1]) / (d2 - d1),
        0.25 * abs(hs[d2] - hs[d1])))
    return value, stderr, {"raw": hs, "stderr_raw": ses,
                           "usable": usable_frac, "n_samples": n_samples}


def atomic_unstable_entropy_ok(details, tol=1e-3):
    return all(abs(v) < tol for v in details["raw"].values())


# ---------------------------------------------------------------------------
# the twin map
# ---------------------------------------------------------------------------

def _separation_rate(f, x, s, horizon=160, fit_lo=30):
    ys = flow(np.asarray(x, float)[None, :], np.asarray([s]))
    a = np.asarray(x, float)[None, :]
    b = ys
    logs = []
    from .model import distance
    for k in range(horizon):
        a = apply_map(f, a)
        b = apply_map(f, b)
        d = float(np.asarray(distance(a, b)).ravel()[0])
        logs.append(np.log(max(d, 1e-300)))
    ks = np.arange(fit_lo, horizon)
    A = np.column_stack([np.ones_like(ks, dtype=float), ks])
    coef, *_ = np.linalg.lstsq(A, np.asarray(logs)[fit_lo:], rcond=None)
    return float(coef[1])


def twin_map(f: MapDescriptor, x, search_len=1.2, rate_threshold=-0.02,
             horizon=160, bisect_iters=44):
    """sup of the forward-contracting center neighbors of x.

    Bisects the decay-rate sign of d(f^n x, f^n flow(x, s)) over
    s in (0, search_len]; raises UnboundedWc when no sign change exists
    (zero center exponents, or the window is too short)."""
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    s_lo = 1e-4
    if _separation_rate(f, arr, s_lo, horizon) > rate_threshold:
        raise UnboundedWc("center neighbors do not contract forward "
                          "(nonhyperbolic center or search window too small)")
    if _separation_rate(f, arr, search_len, horizon) <= rate_threshold:
        raise UnboundedWc(f"no decay-rate sign change within search_len="
                          f"{search_len}")
    lo, hi = s_lo, search_len
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if _separation_rate(f, arr, mid, horizon) <= rate_threshold:
            lo = mid
        else:
            hi = mid
    return flow(arr, 0.5 * (lo + hi))


# ---------------------------------------------------------------------------
# minimality diagnostic
# ---------------------------------------------------------------------------

def minimality_diagnostic(f: MapDescriptor, u_segment, n, resolution=(32, 32, 16),
                          budget=200_000):
    """Fraction of boxes visited by iterates of a strong-leaf segment.

    The segment is tracked as a polyline with midpoint insertion (exact for
    straight in-slice images, a lower bound otherwise) capped at budget
    points; visited boxes accumulate over all iterates, so the fraction is
    monotone in n.
    """
    if isinstance(u_segment, LeafCurve):
        pts = u_segment.points()
    else:
        base, length = u_segment
        w = np.linspace(0.0, length, 257)
        chart = CuChart(np.asarray(base, float), length, 1.0)
        pts = chart.point(w, np.zeros_like(w)).reshape(-1, 3)
    nx, ny, nt = resolution
    n_boxes = nx * ny * nt

    def boxes_of(p):
        ix = np.minimum((p[:, 0] * nx).astype(int), nx - 1)
        iy = np.minimum((p[:, 1] * ny).astype(int), ny - 1)
        it = np.minimum((p[:, 2] * nt).astype(int), nt - 1)
        return (ix * ny + iy) * nt + it

    visited = np.zeros(n_boxes, dtype=bool)
    visited[boxes_of(pts)] = True
    gap_cap = 0.4 * min(1.0 / nx, 1.0 / ny)
    history = []
    for _ in range(n):
        pts = apply_map(f, pts)
        # refine: insert geometric midpoints where image points separated
        while len(pts) < budget:
            d = pts[1:] - pts[:-1]
            d[:, :2] -= np.round(d[:, :2])
            gaps = np.sqrt((d[:, :2] ** 2).sum(-1))
            wide = gaps > gap_cap
            if not wide.any():
                break
            mids = pts[:-1][wide] + 0.5 * d[wide]
            mids = normalize_points(np.column_stack([_wrap01(mids[:, :2]),
                                                     mids[:, 2]]))
            merged = np.empty((len(pts) + len(mids), 3))
            idx = np.where(wide)[0]
            insert_at = idx + 1 + np.arange(len(idx))
            mask = np.zeros(len(merged), dtype=bool)
            mask[insert_at] = True
            merged[mask] = mids
            merged[~mask] = pts
            pts = merged
            if len(pts) >= budget:
                break
        visited[boxes_of(pts)] = True
        history.append(float(visited.mean()))
    return history[-1] if history else float(visited.mean()), history


# ---------------------------------------------------------------------------
# dichotomy
# ---------------------------------------------------------------------------

@dataclass
class DichotomyConfig:
    n_max: int = 32
    exponent_horizon: int = 4
    exponent_samples: int = 2000
    entropy_n: int = 24
    box_rungs: tuple = ((1, (32, 32, 16)), (2, (32, 32, 16)),
                        (4, (32, 32, 16)))
    hist_resolution: tuple = (16, 16, 8)
    hist_samples: int = 200_000
    ue_samples: int = 200_000
    tv_min: float = 0.1
    support_full: float = 0.98
    coverage_n: int = 48
    seed: int = 0


@dataclass
class DichotomyReport:
    epsilon: float
    family: str
    shape: str
    seed: int
    schema_version: int
    dilation: float
    entropies: dict
    lambda_plus: float
    stderr_plus: float
    lambda_minus: float
    stderr_minus: float
    verdict: str
    diagnostics: dict

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def decide_verdict(lam_plus, se_plus, lam_minus, se_minus, tv, support_plus,
                   support_minus, tv_min=0.1, support_full=0.98):
    """Pure function of the numeric evidence.

    The hyperbolic alternative additionally requires its structural
    consequences (distinct measures, full box support); exponent splits
    without them are reported Inconclusive with reasons.
    """
    fl = 1e-12
    reasons = []
    plus_zero = abs(lam_plus) <= 3 * se_plus + fl
    minus_zero = abs(lam_minus) <= 3 * se_minus + fl
    if plus_zero and minus_zero:
        return "NonhyperbolicCase", ["both center exponents vanish at 3 sigma"]
    split = (lam_minus < -(3 * se_minus + fl)) and (lam_plus > 3 * se_plus + fl)
    if split:
        if tv < tv_min:
            reasons.append(f"box histograms too close (TV={tv:.3f})")
        if support_plus < support_full or support_minus < support_full:
            reasons.append(
                f"support not full (plus={support_plus:.3f}, "
                f"minus={support_minus:.3f}); minimality hypothesis suspect")
        if not reasons:
            return "TwoHyperbolicMMEs", ["exponents split with full-support "
                                         "distinct measures"]
        return "Inconclusive", ["exponents split"] + reasons
    reasons.append("exponent signs inconsistent with either alternative")
    return "Inconclusive", reasons


def _box_histogram_and_support(pts, resolution):
    nx, ny, nt = resolution
    ix = np.minimum((pts[:, 0] * nx).astype(int), nx - 1)
    iy = np.minimum((pts[:, 1] * ny).astype(int), ny - 1)
    it = np.minimum((pts[:, 2] * nt).astype(int), nt - 1)
    idx = (ix * ny + iy) * nt + it
    hist = np.bincount(idx, minlength=nx * ny * nt).astype(float)
    hist /= hist.sum()
    return hist, float((hist > 0).mean())


def dichotomy_report(f: MapDescriptor, config: DichotomyConfig = None,
                     _prebuilt=None):
    """Full pipeline: Margulis systems both ways, quasi-products, exponents,
    entropy cross-checks, and an evidence-based verdict."""
    cfg = config or DichotomyConfig()
    if _prebuilt is None:
        _prebuilt = build_dichotomy_artifacts(f, cfg)
    art = _prebuilt
    rng = np.random.default_rng(cfg.seed)

    mu_plus = art["mu_plus"]
    mu_minus = art["mu_minus"]
    est_p = lyapunov_exponent(f, mu_plus.sample, cfg.exponent_horizon,
                              direction="center",
                              n_samples=cfg.exponent_samples,
                              seed=cfg.seed, burn_in=0)
    est_m = lyapunov_exponent(f, mu_minus.sample, cfg.exponent_horizon,
                              direction="center",
                              n_samples=cfg.exponent_samples,
                              seed=cfg.seed + 1, burn_in=0)

    pts_p = mu_plus.sample(np.random.default_rng(cfg.seed + 2), cfg.hist_samples)
    pts_m = mu_minus.sample(np.random.default_rng(cfg.seed + 3), cfg.hist_samples)
    hist_p, support_p = _box_histogram_and_support(pts_p, cfg.hist_resolution)
    hist_m, support_m = _box_histogram_and_support(pts_m, cfg.hist_resolution)
    tv = 0.5 * float(np.abs(hist_p - hist_m).sum())

    verdict, reasons = decide_verdict(
        est_p.value, est_p.stderr, est_m.value, est_m.stderr, tv,
        support_p, support_m, tv_min=cfg.tv_min, support_full=cfg.support_full)

    report = DichotomyReport(
        epsilon=f.epsilon, family=f.family, shape=f.shape, seed=cfg.seed,
        schema_version=1,
        dilation=art["dilation"],
        entropies=art["entropies"],
        lambda_plus=est_p.value, stderr_plus=est_p.stderr,
        lambda_minus=est_m.value, stderr_minus=est_m.stderr,
        verdict=verdict,
        diagnostics={
            "reasons": reasons,
            "tv_boxes": tv,
            "support_plus": support_p,
            "support_minus": support_m,
            "coverage_fraction": art["coverage"],
            "s_invariance_residual": art["s_invariance_residual"],
            "cover_fraction_plus": mu_plus.seed_meta.get("cover_fraction"),
            "cover_fraction_minus": mu_minus.seed_meta.get("cover_fraction"),
            "sign_ordering_ok": bool(
                est_m.value <= est_p.value + 3 * np.hypot(est_m.stderr,
                                                          est_p.stderr) + 1e-12),
        })
    return report


def build_dichotomy_artifacts(f: MapDescriptor, cfg: DichotomyConfig):
    """The seed-independent heavy artifacts shared by seeded dichotomy runs."""
    func, dilation = margulis_iterate(f, default_phi1(), n_max=cfg.n_max)
    # quotient charts span two full unstable windows: a length-2 strip
    # thickened by the transverse draw covers the whole torus
    cover_u = default_charts("u", n=2, extent_w=2.0)
    cover_s = default_charts("s", n=2, extent_w=2.5)
    sys_cu = cu_conditionals(func, charts=cover_u)
    sys_s, D_s, func_inv = stable_system(f, n_max=cfg.n_max)
    sys_cs = cu_conditionals(func_inv, charts=cover_s, holonomy_deltas=())
    sys_u = u_conditionals(sys_cu, func,
                           bases=[c.base for c in default_charts("u")[:2]])
    mu_plus = quasi_product(f, sys_cu, sys_s, tag="cu*s")
    mu_minus = quasi_product(f, sys_cs, sys_u, tag="cs*u")
    slope, series = entropy_curve_growth(f, n=cfg.entropy_n)
    ladder, extrapolated, _ = box_ladder(f, cfg.box_rungs)
    coverage, _ = minimality_diagnostic(
        f, (np.array([0.37, 0.61, 0.76]), 0.5), cfg.coverage_n)
    return {
        "func": func, "func_inv": func_inv, "dilation": dilation,
        "systems": {"cu": sys_cu, "s": sys_s, "cs": sys_cs, "u": sys_u},
        "mu_plus": mu_plus, "mu_minus": mu_minus,
        "entropies": {
            "curve_growth": slope,
            "box_ladder": [float(v) for v in ladder],
            "box_extrapolated": extrapolated,
            "log_dilation": float(np.log(dilation)),
        },
        "coverage": coverage,
        "s_invariance_residual": sys_cu.meta["s_invariance_residual"],
    }
