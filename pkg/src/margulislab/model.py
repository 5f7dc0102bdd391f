"""Phase space and map families.

The manifold is the mapping torus of the hyperbolic toral automorphism
A = [[2, 1], [1, 1]]: the block T^2 x [0, 1] with (p, 1) glued to (A p, 0).
Points are stored as (x, y, t) with all three coordinates reduced to [0, 1).
The suspension flow moves with unit speed in t and applies A at each seam
crossing.

Two one-parameter families of diffeomorphisms are provided on top of the
time-one map (p, t) -> (A p, t):

* ``timechange`` -- f(x) = flow(x, tau(t)) for a positive roof increment
  tau depending on t alone, so the map permutes flow orbits.
* ``shear`` -- the time-one map followed by a translation by
  eps * b(t) along the expanding eigendirection, with a bump b vanishing
  to all orders at the seam.

The adapted metric gives the eigendirections the weights
(lambda^-t, lambda^t, 1), which makes the unperturbed expansion rates
constant in space and the metric smooth across the gluing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidDescriptor

# Cat map and its eigendata.  lambda_ = (3 + sqrt 5)/2 solves l^2 - 3l + 1 = 0.
CAT = np.array([[2, 1], [1, 1]], dtype=float)
CAT_INV = np.array([[1, -1], [-1, 2]], dtype=float)
LAMBDA = (3.0 + math.sqrt(5.0)) / 2.0
LOG_LAMBDA = math.log(LAMBDA)

_PHI = (1.0 + math.sqrt(5.0)) / 2.0
# Euclidean-unit eigenvectors; A is symmetric so they are orthogonal.
E_U = np.array([1.0, _PHI - 1.0]) / math.hypot(1.0, _PHI - 1.0)
E_S = np.array([1.0, -_PHI]) / math.hypot(1.0, _PHI)

# Tolerance band at the seam; avoids double application of A when t lands
# within rounding distance of an integer.
SEAM_EPS = 1e-14

FAMILIES = ("timechange", "shear")
DIRECTIONS = ("forward", "inverse")


# ---------------------------------------------------------------------------
# roof and bump shapes
# ---------------------------------------------------------------------------

def _shape_cos(t):
    return np.cos(2.0 * np.pi * t)


def _shape_cos_d(t):
    return -2.0 * np.pi * np.sin(2.0 * np.pi * t)


def _shape_cos2(t):
    return np.cos(4.0 * np.pi * t)


def _shape_cos2_d(t):
    return -4.0 * np.pi * np.sin(4.0 * np.pi * t)


def _shape_const(t):
    return np.ones_like(np.asarray(t, dtype=float))


def _shape_const_d(t):
    return np.zeros_like(np.asarray(t, dtype=float))


TAU_SHAPES = {
    "cos": (_shape_cos, _shape_cos_d),
    "cos2": (_shape_cos2, _shape_cos2_d),
    "const": (_shape_const, _shape_const_d),
}

_BUMP_FLOOR = 1.5e-3  # below this t(1-t), exp(4 - 1/(t(1-t))) underflows anyway


def bump(t):
    """Smooth bump exp(4 - 1/(t(1-t))) on (0,1), extended by zero; max 1."""
    t = np.asarray(t, dtype=float)
    q = t * (1.0 - t)
    safe = q > _BUMP_FLOOR
    out = np.zeros_like(t)
    qs = np.where(safe, q, 1.0)
    out = np.where(safe, np.exp(4.0 - 1.0 / qs), 0.0)
    return out


def bump_d(t):
    t = np.asarray(t, dtype=float)
    q = t * (1.0 - t)
    safe = q > _BUMP_FLOOR
    qs = np.where(safe, q, 1.0)
    val = np.where(safe, np.exp(4.0 - 1.0 / qs) * (1.0 - 2.0 * t) / (qs * qs), 0.0)
    return val


BUMP_SHAPES = {"bump": (bump, bump_d)}


# ---------------------------------------------------------------------------
# points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TorusPoint:
    x: float
    y: float


@dataclass(frozen=True)
class MTPoint:
    """A point (p, t) on the mapping torus, coordinates reduced to [0,1)."""

    p: TorusPoint
    t: float

    def as_array(self):
        return np.array([self.p.x, self.p.y, self.t], dtype=float)


def mt_point(x, y, t):
    """Build an MTPoint, applying the seam gluing and mod-1 reduction."""
    arr = normalize_points(np.array([[x, y, t]], dtype=float))[0]
    return MTPoint(TorusPoint(arr[0], arr[1]), arr[2])


def _wrap01(a):
    a = np.mod(a, 1.0)
    # np.mod can return exactly 1.0 for tiny negatives
    a[a >= 1.0] -= 1.0
    return a


def _apply_cat_power(p, k):
    """Apply A^k row-wise with per-row integer k, reducing mod 1 each step.

    Stepwise reduction keeps all intermediates O(1), so the result is
    accurate to a few ulps per step instead of lambda^k * eps.
    """
    p = p.copy()
    k = k.astype(int).copy()
    while True:
        up = k > 0
        dn = k < 0
        if not (up.any() or dn.any()):
            break
        if up.any():
            p[up] = _wrap01(p[up] @ CAT.T)
            k[up] -= 1
        if dn.any():
            p[dn] = _wrap01(p[dn] @ CAT_INV.T)
            k[dn] += 1
    return p


def normalize_points(pts):
    """Reduce (..., 3) arrays of (x, y, t_unreduced) into the fundamental domain."""
    pts = np.array(pts, dtype=float)
    flat = pts.reshape(-1, 3)
    t = flat[:, 2]
    k = np.floor(t + SEAM_EPS).astype(int)
    tf = t - k
    tf[np.abs(tf) < SEAM_EPS] = 0.0
    p = _apply_cat_power(_wrap01(flat[:, :2].copy()), k)
    out = np.column_stack([p, tf])
    return out.reshape(pts.shape)


def _as_points(x):
    """Accept an MTPoint or (..., 3) array; return ((n,3) array, unwrap fn)."""
    if isinstance(x, MTPoint):
        return x.as_array()[None, :], lambda a: MTPoint(TorusPoint(a[0, 0], a[0, 1]), a[0, 2])
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], lambda a: a[0]
    return arr, lambda a: a


# ---------------------------------------------------------------------------
# suspension flow
# ---------------------------------------------------------------------------

def flow(x, s):
    """Unit-speed suspension flow for time s (s may be an array matching x)."""
    pts, unwrap = _as_points(x)
    s = np.broadcast_to(np.asarray(s, dtype=float), pts.shape[:-1])
    raised = pts.copy()
    raised[..., 2] = raised[..., 2] + s
    return unwrap(normalize_points(raised))


# ---------------------------------------------------------------------------
# map descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MapDescriptor:
    """A flow-type diffeomorphism: base time-one map plus a perturbation.

    family    -- "timechange" or "shear"
    epsilon   -- perturbation size, >= 0
    shape     -- roof-shape id ("cos", "cos2", "const") or bump id ("bump")
    direction -- "forward" or "inverse"
    """

    family: str = "timechange"
    epsilon: float = 0.0
    shape: str = "cos"
    direction: str = "forward"

    _VALIDATION_GRID = 4096

    def validate(self):
        if self.family not in FAMILIES:
            raise InvalidDescriptor(f"unknown family {self.family!r}")
        if self.direction not in DIRECTIONS:
            raise InvalidDescriptor(f"unknown direction {self.direction!r}")
        if not (self.epsilon >= 0.0 and np.isfinite(self.epsilon)):
            raise InvalidDescriptor("epsilon must be finite and >= 0")
        if self.family == "timechange":
            if self.shape not in TAU_SHAPES:
                raise InvalidDescriptor(f"unknown roof shape {self.shape!r}")
            tg = np.linspace(0.0, 1.0, self._VALIDATION_GRID, endpoint=False)
            tau = self.tau(tg)
            if tau.min() <= 0.0:
                raise InvalidDescriptor(
                    f"roof tau must be positive; min {tau.min():.6g} for shape "
                    f"{self.shape!r}, epsilon={self.epsilon}")
            if (1.0 + self.tau_d(tg)).min() <= 0.0:
                raise InvalidDescriptor(
                    "1 + tau' must stay positive (map must stay invertible); "
                    f"epsilon={self.epsilon} too large for shape {self.shape!r}")
        else:
            if self.shape not in BUMP_SHAPES:
                raise InvalidDescriptor(f"unknown bump shape {self.shape!r}")
        return self

    # roof functions (timechange family)
    def tau(self, t):
        g, _ = TAU_SHAPES[self.shape]
        return 1.0 + self.epsilon * g(np.asarray(t, dtype=float))

    def tau_d(self, t):
        _, gd = TAU_SHAPES[self.shape]
        return self.epsilon * gd(np.asarray(t, dtype=float))

    def bump(self, t):
        g, _ = BUMP_SHAPES[self.shape]
        return self.epsilon * g(t)

    def bump_d(self, t):
        _, gd = BUMP_SHAPES[self.shape]
        return self.epsilon * gd(t)

    def inverse(self):
        flipped = "inverse" if self.direction == "forward" else "forward"
        return replace(self, direction=flipped)

    # TOML table round trip ------------------------------------------------
    def to_table(self):
        return {
            "family": self.family,
            "epsilon": float(self.epsilon),
            "shape": self.shape,
            "direction": self.direction,
        }

    @classmethod
    def from_table(cls, table):
        known = {"family", "epsilon", "shape", "direction"}
        extra = set(table) - known
        if extra:
            raise InvalidDescriptor(f"unknown map keys: {sorted(extra)}")
        return cls(
            family=table.get("family", "timechange"),
            epsilon=float(table.get("epsilon", 0.0)),
            shape=table.get("shape", "cos"),
            direction=table.get("direction", "forward"),
        ).validate()

    def to_toml(self):
        return (
            f'family = "{self.family}"\n'
            f"epsilon = {self.epsilon!r}\n"
            f'shape = "{self.shape}"\n'
            f'direction = "{self.direction}"\n'
        )

    @classmethod
    def from_toml(cls, text):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return cls.from_table(tomllib.loads(text))


# ---------------------------------------------------------------------------
# applying descriptors
# ---------------------------------------------------------------------------

def _apply_forward(f, pts):
    t = pts[:, 2]
    if f.family == "timechange":
        return flow(pts, f.tau(t))
    # shear: time-one map, then translate by eps*b(t) along E_U within the slice
    p = _wrap01(pts[:, :2] @ CAT.T + f.bump(t)[:, None] * E_U[None, :])
    return np.column_stack([p, t])


def _solve_roof_inverse(f, s_target):
    """Solve t + tau(t) = s_target + m with t in [0,1); return (t, m).

    Bisection brackets the monotone lift, Newton polishes (the derivative
    1 + tau' is validated positive, so convergence is monotone and safe).
    """
    tau0 = float(f.tau(0.0))
    m = np.ceil(tau0 - s_target - 1e-15).astype(int)
    target = s_target + m
    lo = np.zeros_like(s_target)
    hi = np.ones_like(s_target)
    for _ in range(14):
        mid = 0.5 * (lo + hi)
        below = mid + f.tau(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    t = 0.5 * (lo + hi)
    for _ in range(4):
        t = t - (t + f.tau(t) - target) / (1.0 + f.tau_d(t))
        t = np.clip(t, lo, hi)
    t = t.copy()
    t[t >= 1.0] = 0.0
    return t, m


def _apply_inverse(f, pts):
    t = pts[:, 2]
    if f.family == "timechange":
        tprev, m = _solve_roof_inverse(f, t)
        p = _apply_cat_power(pts[:, :2].copy(), -m)
        return np.column_stack([p, tprev])
    p = _wrap01((pts[:, :2] - f.bump(t)[:, None] * E_U[None, :]) @ CAT_INV.T)
    return np.column_stack([p, t])


def apply_map(f: MapDescriptor, x, n=1):
    """Apply the diffeomorphism described by f to x, n times (n >= 0)."""
    f.validate()
    pts, unwrap = _as_points(x)
    step = _apply_forward if f.direction == "forward" else _apply_inverse
    out = pts
    for _ in range(n):
        out = step(f, out)
    return unwrap(out)


# spec name
apply = apply_map


# ---------------------------------------------------------------------------
# differentials in the adapted frame (e_s, e_u, flow) -- fixed eigenbasis
# ---------------------------------------------------------------------------

def _crossing_count(f, t):
    return np.floor(t + f.tau(t) + SEAM_EPS).astype(int)


def differential(f: MapDescriptor, x):
    """3x3 matrix (or stack) mapping adapted components at x to those at f(x)."""
    f.validate()
    pts, _ = _as_points(x)
    n = pts.shape[0]
    t = pts[:, 2]
    M = np.zeros((n, 3, 3))
    if f.direction == "forward":
        if f.family == "timechange":
            k = _crossing_count(f, t)
            M[:, 0, 0] = LAMBDA ** (-k)
            M[:, 1, 1] = LAMBDA ** k
            M[:, 2, 2] = 1.0 + f.tau_d(t)
        else:
            M[:, 0, 0] = 1.0 / LAMBDA
            M[:, 1, 1] = LAMBDA
            M[:, 1, 2] = f.bump_d(t)
            M[:, 2, 2] = 1.0
    else:
        pre = apply_map(f, pts)  # f is the inverse map; pre = f^{-1}(x) points
        Mf = differential(replace(f, direction="forward"), pre)
        M = np.linalg.inv(Mf)
    if isinstance(x, MTPoint) or np.asarray(x).ndim == 1:
        return M[0]
    return M


# ---------------------------------------------------------------------------
# adapted metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptedVector:
    """Tangent components along (e_s, e_u, flow direction)."""

    a: float
    b: float
    c: float

    def as_array(self):
        return np.array([self.a, self.b, self.c], dtype=float)


def metric_weights(t):
    """Per-component norms of the basis vectors at height t."""
    t = np.asarray(t, dtype=float)
    return np.stack([LAMBDA ** (-t), LAMBDA ** t, np.ones_like(t)], axis=-1)


def metric_norm(x, v):
    """Adapted norm of v at x: sqrt(a^2 l^-2t + b^2 l^2t + c^2)."""
    pts, _ = _as_points(x)
    if isinstance(v, AdaptedVector):
        varr = v.as_array()[None, :]
    else:
        varr = np.asarray(v, dtype=float)
        if varr.ndim == 1:
            varr = varr[None, :]
    w = metric_weights(pts[:, 2])
    out = np.sqrt(((varr * w) ** 2).sum(axis=-1))
    return float(out[0]) if out.shape == (1,) else out


def displacement(x, y):
    """Adapted components of the short vector from x to y (nearby points).

    Chooses the seam representative of y closest to x in t, then wraps the
    torus difference to [-1/2, 1/2)^2.
    """
    xp, _ = _as_points(x)
    yp, _ = _as_points(y)
    dt = yp[:, 2] - xp[:, 2]
    q = yp[:, :2].copy()
    up = dt > 0.5
    dn = dt < -0.5
    if up.any():
        q[up] = _wrap01(q[up] @ CAT.T)
        dt = np.where(up, dt - 1.0, dt)
    if dn.any():
        q[dn] = _wrap01(q[dn] @ CAT_INV.T)
        dt = np.where(dn, dt + 1.0, dt)
    d = q - xp[:, :2]
    d -= np.round(d)
    comp = np.stack([d @ E_S, d @ E_U, dt], axis=-1)
    if isinstance(x, MTPoint) or np.asarray(x).ndim == 1:
        return comp[0]
    return comp


def distance(x, y):
    """Adapted distance between nearby points (first-order, chart-local)."""
    xp, _ = _as_points(x)
    comp = np.atleast_2d(displacement(x, y))
    w = metric_weights(xp[:, 2])
    out = np.sqrt(((comp * w) ** 2).sum(axis=-1))
    return float(out[0]) if out.shape == (1,) else out


# ---------------------------------------------------------------------------
# periodic orbits of the base automorphism (compact center leaves)
# ---------------------------------------------------------------------------

def periodic_orbit_points(max_period=5):
    """Torus points with A^k p = p (mod 1) for k <= max_period.

    Solutions of (A^k - I) p = 0 mod Z^2 are enumerated from the adjugate
    lattice and polished by one Newton step; there are |det(A^k - I)| of
    them for each k.
    """
    found = {}
    for k in range(1, max_period + 1):
        B = np.linalg.matrix_power(np.array([[2, 1], [1, 1]], dtype=object), k) \
            - np.eye(2, dtype=object).astype(object)
        B = np.array(B, dtype=np.int64)
        det = int(round(B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]))
        d = abs(det)
        adj = np.array([[B[1, 1], -B[0, 1]], [-B[1, 0], B[0, 0]]], dtype=np.int64)
        ij = np.stack(np.meshgrid(np.arange(d), np.arange(d), indexing="ij"),
                      axis=-1).reshape(-1, 2)
        cand = np.mod((ij @ adj.T) * (np.sign(det) / d), 1.0)
        # Newton polish (already rational; removes rounding)
        Binv = adj.T.astype(float).T * (np.sign(det) / d)
        res = cand @ B.T
        res = res - np.round(res)
        cand = np.mod(cand - res @ Binv.T, 1.0)
        uniq = np.unique(np.round(cand * d) / d % 1.0, axis=0)
        found[k] = uniq
    return found


def min_distance_to_short_orbits(points, max_period=5):
    """Euclidean torus distance from each point's fiber to any short periodic point."""
    pts, _ = _as_points(points)
    orbit_pts = np.concatenate([v for v in periodic_orbit_points(max_period).values()])
    d = pts[:, None, :2] - orbit_pts[None, :, :]
    d -= np.round(d)
    dist = np.sqrt((d ** 2).sum(axis=-1)).min(axis=1)
    return dist if pts.shape[0] > 1 else float(dist[0])


# ---------------------------------------------------------------------------
# deterministic merging helper (fixed-order pairwise summation)
# ---------------------------------------------------------------------------

def pairwise_sum(values, axis=0):
    """Sum with a fixed pairwise reduction order, independent of chunking."""
    arr = np.asarray(values, dtype=float)
    arr = np.moveaxis(arr, axis, 0)
    n = arr.shape[0]
    if n == 0:
        return np.zeros(arr.shape[1:])
    while arr.shape[0] > 1:
        m = arr.shape[0]
        half = m // 2
        paired = arr[: 2 * half : 2] + arr[1 : 2 * half : 2]
        if m % 2:
            paired = np.concatenate([paired, arr[-1:]], axis=0)
        arr = paired
    return arr[0]
