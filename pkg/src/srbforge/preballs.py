"""Hyperbolic pre-balls by inverse-branch tracking, and their guarantees.

A pre-ball V_n(x) is the connected component containing x of the n-step
preimage of the radius-delta1 ball around f^n(x), computed by walking the
orbit backwards one monotone branch at a time.  Circle maps are inverted
through their strictly increasing lift; interval maps choose, at each
step, the branch containing the orbit point.  Geometry is computed in
extended precision so round trips through many steps stay far below the
1e-9 verification tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import MapSystem, evaluate_orbit
from .errors import BranchAmbiguityError, NotHyperbolicTimeError, SingularOrbitError
from .hyperbolic import HyperbolicConfig, is_hyperbolic_time
from .regions import RegionSet

LD = np.longdouble

__all__ = [
    "PreBall", "compute_preball", "verify_backward_contraction",
    "jacobian_distortion", "distortion_bound_rho", "point_distance",
]


def point_distance(map_sys: MapSystem, a, b):
    """Metric distance between points (arc distance on the circle)."""
    a = np.asarray(a)
    b = np.asarray(b)
    d = np.abs(a - b)
    if map_sys.is_circle:
        d = np.minimum(d, 1.0 - d)
    return d


def distortion_bound_rho(B: float, beta: float, delta1: float,
                         sigma: float, b_exp: float) -> float:
    """The constant rho = B / ((1-delta1)^beta (1 - sigma^(1/2 - b beta)))."""
    expo = 0.5 - b_exp * beta
    if expo <= 0:
        raise ValueError("need b * beta < 1/2 for the distortion constant")
    return B / ((1.0 - delta1) ** beta * (1.0 - sigma ** expo))


def _invert_chain(map_sys: MapSystem, orbit_points, values, n):
    """Pull image values back through the branch of f^n along the orbit.

    values are coordinates at time n (lift coordinates for circle maps,
    plain [0,1] coordinates for interval maps).  Returns time-0 values.
    """
    base = map_sys
    y = np.asarray(values, dtype=LD)
    if base.is_circle:
        for _ in range(n):
            y = base.invert_lift(y)
        return y
    bounds = np.asarray(base.cell_bounds, dtype=LD)
    for j in range(n - 1, -1, -1):
        cell = int(base.cell_of(orbit_points[j]))
        img = np.sort(np.asarray(
            [base.eval_map(bounds[cell]), base.eval_map(bounds[cell + 1])],
            dtype=LD))
        pad = 4 * np.finfo(LD).eps
        if np.any(y < img[0] - pad) or np.any(y > img[1] + pad):
            raise BranchAmbiguityError(
                "interval leaves the image of branch %d at step %d "
                "(radius too large for this (x, n))" % (cell, j))
        y = np.clip(base.cell_invert(np.clip(y, img[0], img[1]), cell),
                    bounds[cell], bounds[cell + 1])
    return y


@dataclass
class PreBall:
    """Neighborhood mapped onto the radius-delta1 ball at f^n(center)."""
    map_sys: MapSystem
    center: float
    time: int
    region: RegionSet
    image_radius: float
    image_center: float          # f^n(center), wrapped
    orbit_points: np.ndarray     # float64 orbit, length n+1
    _lift_points: np.ndarray     # extended-precision orbit or lift anchors

    def branch_inverse(self, y):
        """Inverse branch of f^n from the image ball onto the region."""
        y = np.asarray(y, dtype=LD)
        if self.map_sys.is_circle:
            anchor = self._lift_points[self.time]
            # move each target into the lift window centered at the anchor
            rel = (y - anchor + 0.5) % 1.0 - 0.5
            out = _invert_chain(self.map_sys, self._lift_points, anchor + rel,
                                self.time)
            return np.asarray(out % 1.0)
        return np.asarray(_invert_chain(self.map_sys, self._lift_points, y,
                                        self.time))


def compute_preball(map_sys: MapSystem, x: float, n: int, delta1: float,
                    cfg: HyperbolicConfig) -> PreBall:
    """Backward-track B_delta1(f^n x) through the orbit branch of x.

    Requires n to qualify as a hyperbolic time under cfg; the returned
    region never contains a branch fold in the interior of any of its
    forward images.
    """
    if not (0 < delta1 < 0.5):
        raise ValueError("delta1 must lie in (0, 1/2)")
    orbit = evaluate_orbit(map_sys, x, n)
    if orbit.singular.any():
        raise SingularOrbitError("orbit of %r hits the critical set" % (x,))
    if not is_hyperbolic_time(orbit, n, cfg):
        raise NotHyperbolicTimeError(
            "n = %d is not a (sigma=%g, delta=%g) hyperbolic time for x = %r"
            % (n, cfg.sigma, cfg.delta, x))

    if map_sys.is_circle:
        # recompute the orbit in extended precision as lift values
        lifts = np.empty(n + 1, dtype=LD)
        lifts[0] = LD(x)
        for j in range(n):
            lifts[j + 1] = map_sys.eval_lift(lifts[j])
        y_n = lifts[n]
        lo, hi = _invert_chain(map_sys, lifts, np.asarray([y_n - delta1, y_n + delta1]), n)
        region = RegionSet.interval(lo % 1.0, (lo % 1.0) + (hi - lo), dtype=LD)
        anchors = lifts
        image_center = float(y_n % 1.0)
    else:
        pts = np.empty(n + 1, dtype=LD)
        pts[0] = LD(x)
        for j in range(n):
            pts[j + 1] = map_sys.eval_map(pts[j])
        y_n = pts[n]
        ball_lo = max(LD(0.0), y_n - delta1)
        ball_hi = min(LD(1.0), y_n + delta1)
        ends = _invert_chain(map_sys, pts, np.asarray([ball_lo, ball_hi]), n)
        lo, hi = np.sort(ends)
        region = RegionSet.interval(lo, hi, dtype=LD)
        anchors = pts
        image_center = float(y_n)

    return PreBall(map_sys=map_sys, center=float(x), time=n, region=region,
                   image_radius=float(delta1), image_center=image_center,
                   orbit_points=orbit.points, _lift_points=anchors)


def _sample_pairs(pb: PreBall, pair_count: int, rng_seed: int):
    lo, hi = pb.region.bounds()
    lo = float(lo)
    width = float(hi - lo)
    rng = np.random.default_rng(rng_seed)
    p = lo + rng.uniform(0.0, 1.0, size=pair_count) * width
    q = lo + rng.uniform(0.0, 1.0, size=pair_count) * width
    # always include the endpoint pair
    p = np.concatenate([[lo], p])
    q = np.concatenate([[lo + width], q])
    if pb.map_sys.is_circle:
        p, q = p % 1.0, q % 1.0
    return p, q


def verify_backward_contraction(map_sys: MapSystem, pb: PreBall,
                                cfg: HyperbolicConfig, pair_count: int,
                                rng_seed: int = 0) -> dict:
    """Sample pairs p, q in the pre-ball and check, for 1 <= j < n,

        dist(f^{n-j} p, f^{n-j} q) <= sigma^{j/2} dist(f^n p, f^n q).

    Reports the worst ratio actual/bound (<= 1 means the guarantee holds).
    """
    n = pb.time
    p, q = _sample_pairs(pb, pair_count, rng_seed)
    P = np.empty((n + 1, p.size))
    Q = np.empty((n + 1, q.size))
    P[0], Q[0] = p, q
    for j in range(n):
        P[j + 1] = map_sys.eval_map(P[j])
        Q[j + 1] = map_sys.eval_map(Q[j])
    dist_n = point_distance(map_sys, P[n], Q[n])
    live = dist_n > 0
    worst = 0.0
    worst_j = None
    for j in range(1, n):
        d = point_distance(map_sys, P[n - j], Q[n - j])
        bound = cfg.sigma ** (0.5 * j) * dist_n
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(live & (bound > 0), d / np.where(bound > 0, bound, 1.0), 0.0)
        r = float(ratio.max()) if ratio.size else 0.0
        if r > worst:
            worst, worst_j = r, j
    return {
        "time": n,
        "pairs": int(p.size),
        "worst_ratio": worst,
        "worst_window": worst_j,
        "holds": bool(worst <= 1.0 + 1e-9),
    }


def jacobian_distortion(map_sys: MapSystem, pb: PreBall, p: float, q: float,
                        cfg: HyperbolicConfig = None) -> dict:
    """log |det Df^n(p)| - log |det Df^n(q)| for p, q in the pre-ball,
    compared against rho * dist(f^n p, f^n q) with rho assembled from
    (B, beta, delta1, sigma, b)."""
    n = pb.time
    op = evaluate_orbit(map_sys, p, n)
    oq = evaluate_orbit(map_sys, q, n)
    if op.singular.any() or oq.singular.any():
        raise SingularOrbitError("pair evaluates on the critical set")
    value = float(op.log_dets[:n].sum() - oq.log_dets[:n].sum())
    out = {"value": value, "time": n}
    if cfg is not None:
        rho = distortion_bound_rho(map_sys.nondeg_B, map_sys.nondeg_beta,
                                   pb.image_radius, cfg.sigma, cfg.b_exp)
        img_dist = float(point_distance(map_sys, map_sys.eval_steps(np.asarray(p), n),
                                        map_sys.eval_steps(np.asarray(q), n)))
        out["rho"] = rho
        out["image_distance"] = img_dist
        out["bound"] = rho * img_dist
        out["holds"] = bool(abs(value) <= rho * img_dist + 1e-9)
    return out
