"""Lyapunov-type Birkhoff sums and detection of expansion times.

Conventions used throughout (note the sign: never negate twice):

    expansion_sum(x, n)  =  sum_{i<n} -log ||(Df(f^i x))^{-1}||

which is positive where the map expands.  A time n qualifies at level
(sigma, delta) when, for every window 1 <= k <= n,

    sum_{j=n-k}^{n-1} log ||(Df(f^j x))^{-1}||  <=  k log sigma      and
    log dist_delta(f^{n-k} x, C)               >=  b k log sigma.

All products are evaluated as sums of logarithms; comparisons carry an
absolute tolerance and ties count as satisfying the inequality, matching
the non-strict inequalities of the definitions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import MapSystem, OrbitCache, evaluate_orbit
from .errors import ConfigError

COMPARISON_TOL = 1e-10

__all__ = [
    "HyperbolicConfig", "expansion_sum", "is_hyperbolic_time",
    "hyperbolic_times_up_to", "hyperbolic_flags", "hyperbolic_density",
    "slow_recurrence_average", "lyapunov_statistics", "COMPARISON_TOL",
]


@dataclass(frozen=True)
class HyperbolicConfig:
    sigma: float              # contraction level, in (0, 1)
    delta: float              # truncation radius for the distance condition
    b_exp: float              # exponent b in the distance condition
    lam: float                # expansion rate lambda; sigma = exp(-lam) when induced
    iterate_power: int = 1    # fixed iterate the partition machinery works with
    tol: float = COMPARISON_TOL

    def __post_init__(self):
        if not (0.0 < self.sigma < 1.0):
            raise ConfigError("sigma must lie in (0, 1)")
        if self.delta <= 0.0:
            raise ConfigError("delta must be positive")
        if self.b_exp <= 0.0:
            raise ConfigError("b must be positive")
        if self.lam <= 0.0:
            raise ConfigError("lambda must be positive")

    def validate_b_against(self, beta: float):
        hi = 0.5 * min(1.0, 1.0 / beta)
        if not (0.0 < self.b_exp < hi):
            raise ConfigError(
                "b = %g violates 0 < b < %.6g (beta = %g)" % (self.b_exp, hi, beta))

    def require_partition_grade(self):
        """Constraints the partition builder insists on."""
        if abs(self.sigma - np.exp(-self.lam)) > 1e-12 * max(1.0, self.sigma):
            raise ConfigError("partitioning needs sigma = exp(-lambda)")
        if not self.sigma < 1.0 / 16.0:
            raise ConfigError("partitioning needs sigma < 1/16, got %g" % self.sigma)


def _log_dist_delta(crit_dists, delta):
    """log of the truncated distance; 0 where dist > delta."""
    d = np.asarray(crit_dists)
    with np.errstate(divide="ignore"):
        return np.where(d <= delta, np.log(d), 0.0)


def expansion_sum(orbit: OrbitCache, n: int) -> float:
    """sum_{i<n} -log ||(Df(f^i x))^{-1}||  (positive where expanding)."""
    if n < 1 or n > orbit.length:
        raise ValueError("need 1 <= n <= orbit length")
    orbit.require_regular(n)
    return float(-orbit.log_inv_norms[:n].sum())


def is_hyperbolic_time(orbit: OrbitCache, n: int, cfg: HyperbolicConfig) -> bool:
    """Check both window inequalities for every k in 1..n, in log space."""
    if n < 1 or n > orbit.length:
        raise ValueError("need 1 <= n <= orbit length")
    orbit.require_regular(n)
    logs = orbit.log_inv_norms[:n]
    log_sigma = np.log(cfg.sigma)
    k = np.arange(1, n + 1)
    # suffix sums: sum over j = n-k .. n-1
    suffix = np.cumsum(logs[::-1])
    if not np.all(suffix <= k * log_sigma + cfg.tol):
        return False
    ld = _log_dist_delta(orbit.crit_dists[:n], cfg.delta)
    # window k looks at the point f^{n-k}(x)
    need = cfg.b_exp * k * log_sigma
    return bool(np.all(ld[n - k] >= need - cfg.tol))


def hyperbolic_flags(log_inv_norms, crit_dists, cfg: HyperbolicConfig,
                     N: int) -> np.ndarray:
    """Vector of booleans flags[n-1] for n = 1..N, computed with running
    prefix minima (equivalent to the per-(n, k) scan up to tolerance)."""
    logs = np.asarray(log_inv_norms[:N], dtype=np.float64)
    ld = _log_dist_delta(crit_dists[:N], cfg.delta)
    log_sigma = np.log(cfg.sigma)
    S = np.concatenate([[0.0], np.cumsum(logs)])      # S[j] = sum of first j
    T = S - np.arange(N + 1) * log_sigma
    prefix_min_T = np.minimum.accumulate(T)[:-1]      # min over 0..n-1
    cond1 = T[1:] <= prefix_min_T + cfg.tol
    G = ld + cfg.b_exp * np.arange(N) * log_sigma
    prefix_min_G = np.minimum.accumulate(G)
    n = np.arange(1, N + 1)
    cond2 = prefix_min_G >= cfg.b_exp * n * log_sigma - cfg.tol
    return cond1 & cond2


def hyperbolic_times_up_to(orbit: OrbitCache, N: int,
                           cfg: HyperbolicConfig) -> list:
    """Sorted list of qualifying times n <= N along one orbit."""
    if N < 1 or N > orbit.length:
        raise ValueError("need 1 <= N <= orbit length")
    orbit.require_regular(N)
    flags = hyperbolic_flags(orbit.log_inv_norms, orbit.crit_dists, cfg, N)
    return [int(n) for n in np.flatnonzero(flags) + 1]


def hyperbolic_density(orbit: OrbitCache, N: int, cfg: HyperbolicConfig) -> float:
    """Fraction of times n <= N that qualify; empirical theta estimate."""
    return len(hyperbolic_times_up_to(orbit, N, cfg)) / float(N)


def slow_recurrence_average(orbit: OrbitCache, n: int, delta: float) -> float:
    """(1/n) sum_{j<n} -log dist_delta(f^j x, C); 0 when C is empty; +inf
    if some orbit point lies exactly on C."""
    if n < 1 or n > orbit.length:
        raise ValueError("need 1 <= n <= orbit length")
    if delta <= 0:
        raise ValueError("delta must be positive")
    d = orbit.crit_dists[:n]
    if np.any(d == 0.0):
        return float("inf")
    return float(-_log_dist_delta(d, delta).sum() / n)


def lyapunov_statistics(map_sys: MapSystem, samples, N: int,
                        window: int = 100) -> dict:
    """Windowed running extrema of the averaged expansion sums.

    For each sample point the running average a_n = expansion_sum(x, n)/n
    is tracked over n in [window, N]; its minimum and maximum stand in for
    liminf and limsup.  Both values are always reported, never a single
    "limit".  The two agree when |max - min| <= 2 * noise, where noise is
    the extreme-value scale  sd * sqrt(2 log(N/window)) / sqrt(window)  of
    the windowed averages.
    """
    if not (1 <= window <= N):
        raise ValueError("need N >= window >= 1")
    rows = []
    for x in samples:
        orb = evaluate_orbit(map_sys, x, N)
        if orb.singular.any():
            rows.append({"point": x, "skipped": True,
                         "reason": "orbit hits critical set"})
            continue
        contrib = -orb.log_inv_norms
        avg = np.cumsum(contrib) / np.arange(1, N + 1)
        tail = avg[window - 1:]
        sd = float(np.std(contrib))
        noise = sd * np.sqrt(2.0 * np.log(max(N / window, 3.0))) / np.sqrt(window)
        lo, hi = float(tail.min()), float(tail.max())
        rows.append({
            "point": x, "skipped": False,
            "liminf_proxy": lo, "limsup_proxy": hi,
            "final_average": float(avg[-1]),
            "window_noise": noise,
            "agree": bool(hi - lo <= 2.0 * noise + 1e-12),
        })
    kept = [r for r in rows if not r["skipped"]]
    return {
        "map": map_sys.name,
        "N": N,
        "window": window,
        "samples": rows,
        "n_skipped": len(rows) - len(kept),
        "agree_fraction": (np.mean([r["agree"] for r in kept]) if kept else float("nan")),
        "mean_final_average": (float(np.mean([r["final_average"] for r in kept]))
                               if kept else float("nan")),
    }
