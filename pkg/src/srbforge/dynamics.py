"""Map systems and the derivative / critical-set oracles.

Builtin systems:

    doubling          x -> 2x mod 1 on the circle, no critical set
    tent              full-branch tent map on [0, 1], kink at 1/2
    logistic          x -> 4x(1-x) on [0, 1], critical point 1/2
    perturbed_circle  x -> 2x + (eps/2pi) sin(2pi x) mod 1, degree 2
    torus2d           mildly perturbed linear expanding map of the 2-torus
    rotation          x -> x + 1/4 mod 1, an isometry used as a null case

One-dimensional systems expose their monotone branch structure (cell
bounds, per-cell closed-form or Newton inverses, and for circle maps a
strictly increasing lift with a global inverse).  That structure is what
the pre-ball and partition machinery consume.  All evaluators preserve
the floating dtype of their input, so the geometric pipeline can run in
extended precision end to end.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, OrbitHitsCriticalError

CRITICAL_TOLERANCE = 1e-14

__all__ = [
    "MapSystem", "OrbitCache", "get_map", "builtin_map_names",
    "iterate_map", "evaluate_orbit", "truncated_distance",
    "verify_nondegeneracy", "CRITICAL_TOLERANCE",
]


@dataclass
class MapSystem:
    """A dynamical system oracle.

    `eval_map`, `deriv_norm`, `deriv_inv_norm`, `det_abs` are vectorized
    over points.  In d=1 a point is a float (or float array); on the
    2-torus a point is an array whose last axis has length 2.
    """
    name: str
    dimension: int
    domain: str                    # "interval" | "circle" | "torus2"
    eval_map: Callable
    deriv_norm: Callable
    deriv_inv_norm: Callable
    det_abs: Callable
    critical_points: np.ndarray
    nondeg_B: float
    nondeg_beta: float
    smoothness_note: str = ""
    params: dict = field(default_factory=dict)
    # d=1 branch structure
    cell_bounds: Optional[np.ndarray] = None
    cell_invert: Optional[Callable] = None     # (y, cell_index) -> x
    cell_orient: Optional[np.ndarray] = None   # +1 increasing, -1 decreasing
    eval_lift: Optional[Callable] = None       # circle maps only
    invert_lift: Optional[Callable] = None     # circle maps only
    lift_degree: int = 0
    # expansion bookkeeping
    known_lyapunov: Optional[float] = None
    pliss_margin_default: float = 0.85
    base_map: Optional["MapSystem"] = None
    iterate_power: int = 1

    def __post_init__(self):
        if self.base_map is None:
            self.base_map = self

    @property
    def is_circle(self) -> bool:
        return self.domain == "circle"

    def n_cells(self) -> int:
        return 0 if self.cell_bounds is None else len(self.cell_bounds) - 1

    def cell_of(self, x):
        """Index of the monotone branch containing each point."""
        x = np.asarray(x)
        return np.clip(np.searchsorted(self.cell_bounds, x, side="right") - 1,
                       0, self.n_cells() - 1)

    def crit_dist(self, x):
        """Distance from each point to the critical set (1.0 if empty)."""
        x = np.asarray(x)
        c = self.critical_points
        if c is None or len(c) == 0:
            return np.ones_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
        if self.dimension != 1:
            raise NotImplementedError("no critical sets for builtin 2-d maps")
        i = np.searchsorted(c, x)
        left = np.where(i > 0, x - c[np.maximum(i - 1, 0)], np.inf)
        right = np.where(i < len(c), c[np.minimum(i, len(c) - 1)] - x, np.inf)
        d = np.minimum(left, right)
        if self.is_circle:
            # arc distance: account for the gap across 0
            d_wrap = np.minimum((x - c[-1]) % 1.0, (c[0] - x) % 1.0)
            d = np.minimum(d, d_wrap)
        return np.abs(d)

    def eval_steps(self, x, m):
        """m-fold application of the map."""
        y = np.asarray(x)
        for _ in range(m):
            y = self.eval_map(y)
        return y

    def __repr__(self):
        return "MapSystem(%s, d=%d, %s)" % (self.name, self.dimension, self.domain)


@dataclass
class OrbitCache:
    """Orbit data for one base point: f^0(x) .. f^n(x) plus per-step logs."""
    map_sys: MapSystem
    base_point: object
    length: int
    points: np.ndarray          # (n+1, ...) orbit points
    log_inv_norms: np.ndarray   # (n,)  log ||(Df(f^j x))^{-1}||
    log_dets: np.ndarray        # (n,)  log |det Df(f^j x)|
    crit_dists: np.ndarray      # (n,)  dist(f^j x, critical set)
    singular: np.ndarray        # (n,)  bool, orbit point within tolerance of C

    def require_regular(self, n):
        if self.singular[:n].any():
            from .errors import SingularOrbitError
            j = int(np.flatnonzero(self.singular[:n])[0])
            raise SingularOrbitError(
                "orbit step %d lies on the critical set (base %r)" % (j, self.base_point))


# ---------------------------------------------------------------------------
# builtin maps
# ---------------------------------------------------------------------------

def _doubling():
    def ev(x):
        return (2.0 * x) % 1.0

    def dn(x):
        x = np.asarray(x)
        return np.full(x.shape, 2.0, dtype=x.dtype)

    def dinv(x):
        x = np.asarray(x)
        return np.full(x.shape, 0.5, dtype=x.dtype)

    return MapSystem(
        name="doubling", dimension=1, domain="circle",
        eval_map=ev, deriv_norm=dn, deriv_inv_norm=dinv, det_abs=dn,
        critical_points=np.empty(0), nondeg_B=2.0, nondeg_beta=1.0,
        smoothness_note="analytic, uniformly expanding",
        cell_bounds=np.asarray([0.0, 0.5, 1.0]),
        cell_invert=lambda y, k: (np.asarray(y) + np.asarray(k)) / 2.0,
        cell_orient=np.asarray([1, 1]),
        eval_lift=lambda x: 2.0 * np.asarray(x),
        invert_lift=lambda y: np.asarray(y) / 2.0,
        lift_degree=2,
        known_lyapunov=float(np.log(2.0)),
        pliss_margin_default=1.0,
    )


def _rotation(shift=0.25):
    def ev(x):
        return (np.asarray(x) + shift) % 1.0

    def one(x):
        x = np.asarray(x)
        return np.ones(x.shape, dtype=x.dtype)

    return MapSystem(
        name="rotation", dimension=1, domain="circle",
        eval_map=ev, deriv_norm=one, deriv_inv_norm=one, det_abs=one,
        critical_points=np.empty(0), nondeg_B=1.5, nondeg_beta=1.0,
        smoothness_note="isometry (null case, not expanding)",
        params={"shift": shift},
        cell_bounds=np.asarray([0.0, 1.0]),
        cell_invert=lambda y, k: (np.asarray(y) - shift) % 1.0,
        cell_orient=np.asarray([1]),
        eval_lift=lambda x: np.asarray(x) + shift,
        invert_lift=lambda y: np.asarray(y) - shift,
        lift_degree=1,
        known_lyapunov=0.0,
        pliss_margin_default=1.0,
    )


def _tent():
    def ev(x):
        x = np.asarray(x)
        return np.where(x < 0.5, 2.0 * x, 2.0 - 2.0 * x)

    def dn(x):
        x = np.asarray(x)
        return np.full(x.shape, 2.0, dtype=x.dtype)

    def dinv(x):
        x = np.asarray(x)
        return np.full(x.shape, 0.5, dtype=x.dtype)

    def inv(y, k):
        y = np.asarray(y)
        k = np.asarray(k)
        return np.where(k == 0, y / 2.0, 1.0 - y / 2.0)

    return MapSystem(
        name="tent", dimension=1, domain="interval",
        eval_map=ev, deriv_norm=dn, deriv_inv_norm=dinv, det_abs=dn,
        critical_points=np.asarray([0.5]), nondeg_B=2.0, nondeg_beta=1.0,
        smoothness_note="piecewise affine, kink at 1/2",
        cell_bounds=np.asarray([0.0, 0.5, 1.0]),
        cell_invert=inv,
        cell_orient=np.asarray([1, -1]),
        known_lyapunov=float(np.log(2.0)),
        pliss_margin_default=1.0,
    )


def _logistic():
    def ev(x):
        x = np.asarray(x)
        return 4.0 * x * (1.0 - x)

    def dn(x):
        x = np.asarray(x)
        return np.abs(4.0 - 8.0 * x)

    def dinv(x):
        d = _protected(dn(x))
        return 1.0 / d

    def inv(y, k):
        y = np.asarray(y)
        k = np.asarray(k)
        r = np.sqrt(np.maximum(1.0 - y, 0.0))
        return np.where(k == 0, (1.0 - r) / 2.0, (1.0 + r) / 2.0)

    return MapSystem(
        name="logistic", dimension=1, domain="interval",
        eval_map=ev, deriv_norm=dn, deriv_inv_norm=dinv, det_abs=dn,
        critical_points=np.asarray([0.5]), nondeg_B=16.0, nondeg_beta=1.0,
        smoothness_note="analytic, quadratic critical point",
        cell_bounds=np.asarray([0.0, 0.5, 1.0]),
        cell_invert=inv,
        cell_orient=np.asarray([1, -1]),
        known_lyapunov=float(np.log(2.0)),
        pliss_margin_default=0.85,
    )


def _perturbed_circle(eps=0.5):
    if not 0 <= eps < 1.0:
        raise ConfigError("perturbed_circle needs 0 <= eps < 1")
    two_pi = 2.0 * np.pi

    def lift(x):
        x = np.asarray(x)
        return 2.0 * x + (eps / two_pi) * np.sin(two_pi * x)

    def ev(x):
        return lift(x) % 1.0

    def dn(x):
        x = np.asarray(x)
        return 2.0 + eps * np.cos(two_pi * x)

    def dinv(x):
        return 1.0 / dn(x)

    def inv_lift(y):
        # Newton on the strictly increasing lift; slope in [2-eps, 2+eps]
        y = np.asarray(y)
        x = y / 2.0
        for _ in range(60):
            step = (lift(x) - y) / dn(x)
            x = x - step
            if np.max(np.abs(step)) < np.finfo(x.dtype).eps * 4:
                break
        return x

    def inv(y, k):
        y = np.asarray(y)
        k = np.asarray(k)
        return inv_lift(y + k)

    return MapSystem(
        name="perturbed_circle", dimension=1, domain="circle",
        eval_map=ev, deriv_norm=dn, deriv_inv_norm=dinv, det_abs=dn,
        critical_points=np.empty(0), nondeg_B=4.0, nondeg_beta=1.0,
        smoothness_note="analytic, uniformly expanding, non-constant slope",
        params={"eps": eps},
        cell_bounds=np.asarray([0.0, 0.5, 1.0]),
        cell_invert=inv,
        cell_orient=np.asarray([1, 1]),
        eval_lift=lift,
        invert_lift=inv_lift,
        lift_degree=2,
        known_lyapunov=None,
        pliss_margin_default=0.85,
    )


def _torus2d(eps=0.25):
    M = np.asarray([[2.0, 1.0], [1.0, 3.0]])
    two_pi = 2.0 * np.pi

    def ev(p):
        p = np.asarray(p)
        x, y = p[..., 0], p[..., 1]
        fx = 2.0 * x + y + (eps / two_pi) * np.sin(two_pi * x)
        fy = x + 3.0 * y + (eps / two_pi) * np.sin(two_pi * y)
        return np.stack([fx % 1.0, fy % 1.0], axis=-1)

    def _jac(p):
        p = np.asarray(p)
        x, y = p[..., 0], p[..., 1]
        a = 2.0 + eps * np.cos(two_pi * x)
        d = 3.0 + eps * np.cos(two_pi * y)
        return a, d

    def _sing(p):
        # singular values of [[a, 1], [1, d]] via its symmetric eigenvalues
        a, d = _jac(p)
        mid = (a + d) / 2.0
        rad = np.sqrt(((a - d) / 2.0) ** 2 + 1.0)
        return np.abs(mid + rad), np.abs(mid - rad)

    def dn(p):
        return _sing(p)[0]

    def dinv(p):
        return 1.0 / _sing(p)[1]

    def det(p):
        a, d = _jac(p)
        return np.abs(a * d - 1.0)

    def adj_norm(p):
        # ||adj Df|| for the adjugate identity check
        a, d = _jac(p)
        mid = (a + d) / 2.0
        rad = np.sqrt(((a - d) / 2.0) ** 2 + 1.0)
        return np.abs(mid + rad)

    sys2 = MapSystem(
        name="torus2d", dimension=2, domain="torus2",
        eval_map=ev, deriv_norm=dn, deriv_inv_norm=dinv, det_abs=det,
        critical_points=np.empty(0), nondeg_B=4.5, nondeg_beta=1.0,
        smoothness_note="analytic expanding torus endomorphism",
        params={"eps": eps, "matrix": M},
        known_lyapunov=None,
        pliss_margin_default=0.85,
    )
    sys2.adj_norm = adj_norm
    return sys2


_BUILDERS = {
    "doubling": _doubling,
    "tent": _tent,
    "logistic": _logistic,
    "perturbed_circle": _perturbed_circle,
    "torus2d": _torus2d,
    "rotation": _rotation,
}


def builtin_map_names():
    return sorted(_BUILDERS)


def get_map(name, **params) -> MapSystem:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ConfigError("unknown map %r (builtins: %s)"
                          % (name, ", ".join(builtin_map_names())))
    return builder(**params)


def _protected(d):
    d = np.asarray(d)
    tiny = np.finfo(d.dtype if d.dtype.kind == "f" else np.float64).tiny
    return np.maximum(d, tiny)


# ---------------------------------------------------------------------------
# iterated systems
# ---------------------------------------------------------------------------

def _preimages_of(base: MapSystem, pts: np.ndarray) -> np.ndarray:
    out = [np.asarray(pts)]
    for k in range(base.n_cells()):
        out.append(np.asarray(base.cell_invert(pts, np.full(len(pts), k))))
    return np.unique(np.concatenate(out))


def iterate_map(base: MapSystem, power: int) -> MapSystem:
    """The system f^power with chain-rule derivatives and pulled-back
    critical set.  Only d=1 systems support iteration here."""
    if power == 1:
        return base
    if base.dimension != 1:
        raise ConfigError("iterate_map supports one-dimensional systems only")
    if base.iterate_power != 1:
        raise ConfigError("iterate an un-iterated base system")

    def ev(x):
        return base.eval_steps(x, power)

    def chain_logs(x):
        x = np.asarray(x)
        total = np.zeros(x.shape, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
        y = x
        for _ in range(power):
            total = total + np.log(_protected(base.deriv_norm(y)))
            y = base.eval_map(y)
        return total

    def dn(x):
        return np.exp(chain_logs(x))

    def dinv(x):
        return np.exp(-chain_logs(x))

    crit = base.critical_points
    if crit is not None and len(crit):
        pts = np.asarray(crit, dtype=np.float64)
        for _ in range(power - 1):
            pts = _preimages_of(base, pts)
        crit_g = np.sort(pts)
    else:
        crit_g = np.empty(0)

    # B for the iterate: the chain rule multiplies at most `power` bounded
    # factors against one vanishing factor, so scale the declared constant.
    B_g = float(base.nondeg_B) * float(
        np.exp((power - 1) * np.log(max(float(base.nondeg_B), 2.0))))

    sys_g = MapSystem(
        name="%s^%d" % (base.name, power), dimension=1, domain=base.domain,
        eval_map=ev, deriv_norm=dn, deriv_inv_norm=dinv, det_abs=dn,
        critical_points=crit_g, nondeg_B=B_g, nondeg_beta=base.nondeg_beta,
        smoothness_note="iterate of " + base.name,
        params=dict(base.params),
        known_lyapunov=(None if base.known_lyapunov is None
                        else base.known_lyapunov * power),
        pliss_margin_default=base.pliss_margin_default,
        base_map=base,
        iterate_power=power,
    )
    if base.eval_lift is not None:
        deg = base.lift_degree

        def lift_g(x, _m=power):
            y = np.asarray(x)
            for _ in range(_m):
                y = base.eval_lift(y)
            return y

        def inv_lift_g(y, _m=power):
            x = np.asarray(y)
            for _ in range(_m):
                x = base.invert_lift(x)
            return x

        sys_g.eval_lift = lift_g
        sys_g.invert_lift = inv_lift_g
        sys_g.lift_degree = deg ** power
    return sys_g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def evaluate_orbit(map_sys: MapSystem, x, n: int,
                   crit_tolerance: float = CRITICAL_TOLERANCE) -> OrbitCache:
    """Populate an orbit cache of length n from base point x.

    Orbit points within `crit_tolerance` of the critical set are flagged
    singular; their log entries are +/- inf and downstream consumers raise
    on use rather than silently propagating them.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    d = map_sys.dimension
    x0 = np.asarray(x, dtype=np.float64)
    if d == 1:
        pts = np.empty(n + 1, dtype=np.float64)
    else:
        pts = np.empty((n + 1, 2), dtype=np.float64)
    pts[0] = x0
    for j in range(n):
        pts[j + 1] = map_sys.eval_map(pts[j])
    head = pts[:n]
    if map_sys.critical_points is not None and len(map_sys.critical_points) and d == 1:
        cdist = map_sys.crit_dist(head)
    else:
        cdist = np.ones(n, dtype=np.float64)
    singular = cdist < crit_tolerance
    with np.errstate(divide="ignore"):
        log_inv = np.where(singular, np.inf,
                           np.log(_protected(map_sys.deriv_inv_norm(head))))
        log_det = np.where(singular, -np.inf,
                           np.log(_protected(map_sys.det_abs(head))))
    return OrbitCache(map_sys=map_sys, base_point=x, length=n, points=pts,
                      log_inv_norms=log_inv, log_dets=log_det,
                      crit_dists=cdist, singular=singular)


def orbit_or_raise(map_sys, x, n):
    """evaluate_orbit that raises as soon as the orbit hits the critical set."""
    orb = evaluate_orbit(map_sys, x, n)
    if orb.singular.any():
        j = int(np.flatnonzero(orb.singular)[0])
        raise OrbitHitsCriticalError(
            "f^%d(%r) is within tolerance of the critical set" % (j, x))
    return orb


def truncated_distance(map_sys: MapSystem, x, delta: float):
    """delta-truncated distance to the critical set: dist if <= delta, else 1."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    d = map_sys.crit_dist(np.asarray(x))
    return np.where(d <= delta, d, np.ones_like(d))


def verify_nondegeneracy(map_sys: MapSystem, sample_count: int,
                         rng_seed: int = 0) -> dict:
    """Empirical check of the three power-law derivative conditions with the
    map's declared (B, beta).  Close pairs satisfy dist(x,y) < dist(x,C)/2.

    Returns a report with the worst margin per condition (margin >= 0 means
    the condition holds at every sample) and witness points for failures.
    """
    if sample_count < 1:
        raise ValueError("sample_count >= 1")
    rng = np.random.default_rng(rng_seed)
    B = float(map_sys.nondeg_B)
    beta = float(map_sys.nondeg_beta)
    d = map_sys.dimension

    if d == 1:
        x = rng.uniform(0.0, 1.0, size=sample_count)
    else:
        x = rng.uniform(0.0, 1.0, size=(sample_count, 2))
    dist_x = map_sys.crit_dist(x) if d == 1 else np.ones(sample_count)
    keep = dist_x > 1e-12
    x, dist_x = x[keep], dist_x[keep]

    # condition (1): (1/B) d^beta <= |Df v|/|v| <= B d^-beta
    lo_bound = (dist_x ** beta) / B
    hi_bound = B * dist_x ** (-beta)
    lo_rate = map_sys.deriv_inv_norm(x)
    lo_rate = 1.0 / _protected(lo_rate)        # weakest expansion rate
    hi_rate = map_sys.deriv_norm(x)
    m1 = np.minimum(lo_rate - lo_bound, hi_bound - hi_rate)

    # close pairs for conditions (2) and (3)
    offs = (rng.uniform(-0.5, 0.5, size=x.shape)) * (dist_x * 0.9)[..., None] \
        if d == 2 else rng.uniform(-0.5, 0.5, size=x.shape) * dist_x * 0.9
    y = x + offs
    if d == 1:
        y = y % 1.0 if map_sys.is_circle else np.clip(y, 0.0, 1.0)
        pair_dist = np.abs(x - y)
    else:
        y = y % 1.0
        pair_dist = np.sqrt(((x - y) ** 2).sum(axis=-1))
    dist_y = map_sys.crit_dist(y) if d == 1 else np.ones(len(x))
    ok = (pair_dist < dist_x / 2.0) & (dist_y > 1e-12) & (pair_dist > 0)
    xp, yp, pd, dx = x[ok], y[ok], pair_dist[ok], dist_x[ok]

    holder = B * pd / (dx ** beta)
    lhs2 = np.abs(np.log(_protected(map_sys.deriv_inv_norm(xp)))
                  - np.log(_protected(map_sys.deriv_inv_norm(yp))))
    lhs3 = np.abs(np.log(_protected(map_sys.det_abs(xp)))
                  - np.log(_protected(map_sys.det_abs(yp))))
    m2 = holder - lhs2
    m3 = holder - lhs3

    def _summary(margins, pts):
        if len(margins) == 0:
            return {"worst_margin": float("inf"), "holds": True, "witness": None}
        i = int(np.argmin(margins))
        w = pts[i].tolist() if d == 2 else float(np.asarray(pts)[i])
        return {"worst_margin": float(margins[i]),
                "holds": bool(margins[i] >= -1e-12),
                "witness": None if margins[i] >= -1e-12 else w}

    report = {
        "map": map_sys.name,
        "declared_B": B,
        "declared_beta": beta,
        "samples": int(len(x)),
        "pairs": int(len(xp)),
        "condition1": _summary(m1, x),
        "condition2": _summary(m2, xp),
        "condition3": _summary(m3, xp),
    }
    report["all_hold"] = all(report[k]["holds"]
                             for k in ("condition1", "condition2", "condition3"))
    return report
