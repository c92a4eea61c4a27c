"""The inductive partitioning algorithm in one dimension.

State per base element P0 = [l, r):

  * Delta(P0): the not-yet-removed region (a RegionSet, shrinking),
  * an integer field t on P0 (allowed where t = 0, forbidden where t > 0),
  * the inventory of constructed elements with their return times.

Each step n looks for allowed points whose time-n window qualifies as a
hyperbolic time, around which the full branch preimages (tiles) of base
elements become new partition elements with return time n.  New elements
install protection annuli (the preimages of the shrinking rings around
their target) in the t field; the former collar machinery near each base
element boundary is carried by the analytic t0 profile.

Exactness discipline: every geometric quantity that enters a set-equality
check is computed once, in extended precision, through a single code path
(the ring radius table, the boundary offset tables, the backward branch
chains) and reused bit-for-bit by every consumer.  Set operations never
do arithmetic on endpoints, so the disjointness, collar-identity and
deep-overlap audits are meaningful at zero tolerance.

Witnessing: with an explicit sample grid the builder uses exactly those
points as centers (one element per witnessed tile).  In adaptive mode it
enumerates every tile meeting the allowed region and probes each tile for
a qualifying center, which removes the grid as a resolution limit; the
probe density per tile still scales with grid_size as a convergence knob.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .dynamics import MapSystem, iterate_map
from .errors import ConfigError, OverlapError
from .hyperbolic import HyperbolicConfig
from .regions import IntStepField, RegionSet

LD = np.longdouble

__all__ = [
    "BasePartition", "PartitionState", "ConstructedElement", "CollarRecord",
    "make_base_partition", "ring_index", "algorithm_step", "run_partitioning",
    "forbidden_mass_series", "audit_no_deep_overlap",
]


# ---------------------------------------------------------------------------
# base partition and rings
# ---------------------------------------------------------------------------

@dataclass
class BasePartition:
    lefts: np.ndarray            # (m,) LD
    rights: np.ndarray           # (m,) LD
    delta0: float
    delta1: float

    @property
    def m(self):
        return len(self.lefts)

    def widths(self):
        return self.rights - self.lefts

    def universe(self):
        return RegionSet(self.lefts, self.rights)

    def element(self, i):
        return RegionSet.interval(self.lefts[i], self.rights[i], dtype=LD)

    def index_of(self, x):
        x = np.asarray(x)
        return np.clip(np.searchsorted(self.rights, x, side="right"),
                       0, self.m - 1)


def make_base_partition(domain_span, delta0: float, delta1: float) -> BasePartition:
    """Uniform partition into the smallest count of equal pieces with
    diameter strictly below delta0; requires 0 < delta0 < delta1 / 4."""
    if not (0.0 < delta0 < delta1 / 4.0):
        raise ConfigError("need 0 < delta0 < delta1/4 (got delta0=%g, delta1=%g)"
                          % (delta0, delta1))
    m = int(np.floor(1.0 / delta0)) + 1
    while 1.0 / m >= delta0:
        m += 1
    bounds = np.arange(m + 1, dtype=LD) / LD(m)
    return BasePartition(lefts=bounds[:-1], rights=bounds[1:],
                         delta0=float(delta0), delta1=float(delta1))


def ring_radii(delta0: float, sigma: float, count: int) -> np.ndarray:
    """rho[k] = delta0 * sigma^(k/2) for k = 0..count, extended precision.
    Single source for every ring/collar/t0 breakpoint in a run."""
    k = np.arange(count + 1, dtype=LD)
    return LD(delta0) * LD(sigma) ** (k / LD(2.0))


def ring_index(P, x, delta0: float, sigma: float, mode: str = "t0") -> int:
    """Ring bookkeeping around one interval P = (left, right).

    mode "t0":   min k with delta0 sigma^(k/2) <= dist(x, boundary of P)
                 for x inside P.
    mode "ring": the k with x in the k-th ring of the delta0-enlargement,
                 i.e. delta0 sigma^(k/2) <= dist(x, boundary) <
                 delta0 sigma^((k-1)/2), for x in the enlargement minus P.
    """
    left, right = float(P[0]), float(P[1])
    x = float(x)
    if mode == "t0":
        dist = min(x - left, right - x)
        if dist < 0:
            raise ValueError("x outside P in t0 mode")
        k = 0
        while delta0 * sigma ** (0.5 * k) > dist:
            k += 1
            if k > 10_000:
                raise ValueError("x is on the boundary of P")
        return k
    if mode == "ring":
        if left <= x < right:
            raise ValueError("x inside P in ring mode")
        dist = left - x if x < left else x - right
        if not (0 <= dist < delta0):
            raise ValueError("x outside the delta0-enlargement of P")
        k = 1
        while not (delta0 * sigma ** (0.5 * k) <= dist):
            k += 1
            if k > 10_000:
                raise ValueError("x is on the boundary of P")
        return k
    raise ValueError("mode must be 't0' or 'ring'")


# ---------------------------------------------------------------------------
# element store (columnar)
# ---------------------------------------------------------------------------

class _ElementStore:
    COLS = ("left", "right", "u1_left", "u1_right")

    def __init__(self, interval_mode: bool):
        self.left = np.empty(0, dtype=LD)
        self.right = np.empty(0, dtype=LD)
        self.u1_left = np.empty(0, dtype=LD)
        self.u1_right = np.empty(0, dtype=LD)
        self.center = np.empty(0, dtype=np.float64)
        self.step = np.empty(0, dtype=np.int32)
        self.source = np.empty(0, dtype=np.int32)
        self.target = np.empty(0, dtype=np.int32)
        self.log_slope = np.empty(0, dtype=np.float64)   # log |Dg^n| at left end
        self.interval_mode = interval_mode
        # inversion context: lift anchors (circle) or itineraries (interval)
        self.lift_anchor = np.empty(0, dtype=LD)
        self._itin_batches: List[np.ndarray] = []
        self.itin_batch = np.empty(0, dtype=np.int32)
        self.itin_row = np.empty(0, dtype=np.int64)
        # cached ring-point preimages for flanking elements: {index: (lo, hi)}
        self.ring_cache = {}

    def __len__(self):
        return self.left.size

    def append(self, cols: dict, itin: Optional[np.ndarray]):
        k = cols["left"].size
        for name in ("left", "right", "u1_left", "u1_right", "lift_anchor"):
            arr = cols.get(name)
            if arr is None:
                arr = np.full(k, np.nan, dtype=LD)
            setattr(self, name, np.concatenate([getattr(self, name), arr]))
        self.center = np.concatenate([self.center, cols["center"]])
        self.step = np.concatenate([self.step, cols["step"].astype(np.int32)])
        self.source = np.concatenate([self.source, cols["source"].astype(np.int32)])
        self.target = np.concatenate([self.target, cols["target"].astype(np.int32)])
        self.log_slope = np.concatenate([self.log_slope, cols["log_slope"]])
        if self.interval_mode:
            b = len(self._itin_batches)
            self._itin_batches.append(itin)
            self.itin_batch = np.concatenate(
                [self.itin_batch, np.full(k, b, dtype=np.int32)])
            self.itin_row = np.concatenate(
                [self.itin_row, np.arange(k, dtype=np.int64)])

    def itineraries(self, idx):
        """(len(idx), depth_max) cell matrix for the selected elements."""
        out = None
        for j, i in enumerate(idx):
            row = self._itin_batches[self.itin_batch[i]][self.itin_row[i]]
            if out is None:
                out = np.zeros((len(idx), row.size), dtype=np.uint8)
            out[j, :row.size] = row
        return out


@dataclass
class ConstructedElement:
    """View of one partition element (a full branch preimage of a base
    element, removed at its return time)."""
    index: int
    region: RegionSet
    return_time: int
    center: float
    source_base: int
    target_base: int
    enlarged: RegionSet


@dataclass
class CollarRecord:
    kind: str                 # "former" | "element"
    source_step: int
    owner: object             # base-element index, or element index
    region: RegionSet
    external_ring: RegionSet


# ---------------------------------------------------------------------------
# backward chains
# ---------------------------------------------------------------------------

def _lift_chain(base: MapSystem, values, depth: int, want_slopes=False):
    """Global backward chain through the increasing lift, with optional
    accumulated log |Df| along the pulled-back points."""
    y = np.asarray(values, dtype=LD)
    logs = np.zeros(y.shape, dtype=np.float64) if want_slopes else None
    for _ in range(depth):
        y = base.invert_lift(y)
        if want_slopes:
            logs += np.log(np.asarray(base.deriv_norm(
                np.asarray(y % 1.0, dtype=np.float64))))
    return (y, logs) if want_slopes else y


def _itinerary_chain(base: MapSystem, values, itin, depth: int,
                     want_slopes=False):
    """Backward chain through recorded branch cells (interval maps).
    itin has shape (npts, depth); step j of the forward orbit used cell
    itin[:, j]."""
    y = np.asarray(values, dtype=LD)
    logs = np.zeros(y.shape, dtype=np.float64) if want_slopes else None
    lo = np.asarray(base.cell_bounds[0], dtype=LD)
    hi = np.asarray(base.cell_bounds[-1], dtype=LD)
    for j in range(depth - 1, -1, -1):
        cells = itin[:, j]
        y = np.clip(base.cell_invert(np.clip(y, lo, hi), cells), lo, hi)
        if want_slopes:
            logs += np.log(np.asarray(base.deriv_norm(
                np.asarray(y, dtype=np.float64))))
    return (y, logs) if want_slopes else y


# ---------------------------------------------------------------------------
# partition state
# ---------------------------------------------------------------------------

class PartitionState:
    def __init__(self, map_sys: MapSystem, cfg: HyperbolicConfig,
                 base: BasePartition, N_max: int, grid_size: int = 100_000,
                 coverage_target: float = 0.999, retain_fields: bool = False):
        if map_sys.dimension != 1:
            raise ConfigError("the partition builder is one-dimensional")
        cfg.require_partition_grade()
        cfg.validate_b_against(map_sys.nondeg_beta)
        self.map_sys = map_sys                     # the (possibly iterated) system
        self.base_sys = map_sys.base_map
        self.n0 = map_sys.iterate_power
        self.cfg = cfg
        self.base = base
        self.N_max = int(N_max)
        self.grid_size = int(grid_size)
        self.coverage_target = float(coverage_target)
        self.retain_fields = bool(retain_fields)

        self.T_cap = self.N_max + 2
        self.rho = ring_radii(base.delta0, cfg.sigma, self.T_cap + 1)
        # per base element boundary offset tables (the single source of all
        # former-collar breakpoints)
        self.Loff = base.lefts[:, None] + self.rho[None, :]    # (m, T+2)
        self.Roff = base.rights[:, None] - self.rho[None, :]

        self.step = 0
        self.delta = [base.element(i) for i in range(base.m)]
        self.t_field = [self._t0_field(i) for i in range(base.m)]
        self.store = _ElementStore(interval_mode=not map_sys.is_circle)
        self.series = []           # rows: dict(n, leb_forbidden, leb_collars, coverage)
        self.comp2 = []            # per-(element, step) collar bound checks
        self.checks = {"collar_identity": {}, "collar_ring_identity": {},
                       "lclaim_violations": [], "rem2_rejects": 0,
                       "skipped_probes": 0, "degenerate_tiles": 0}
        self.retained_gt1 = {}     # n -> list of RegionSet per base element
        self.retained_fields = {}  # n -> list of IntStepField (small runs)
        self.tprime_log = {}       # n -> per-element t' pieces (small runs)
        self.element_rings = {}    # element index -> dict j -> (lo_pt, hi_pt)
        self._record_step_zero()

    # -- t0 machinery ----------------------------------------------------
    def _t0_value(self, i, x):
        dist = np.minimum(np.asarray(x, dtype=LD) - self.base.lefts[i],
                          self.base.rights[i] - np.asarray(x, dtype=LD))
        neg = -self.rho
        idx = np.searchsorted(neg, -dist, side="left")
        return np.minimum(idx, self.T_cap).astype(np.int64)

    def _t0_field(self, i):
        l, r = self.base.lefts[i], self.base.rights[i]
        L = self.Loff[i]
        R = self.Roff[i]
        pts = np.concatenate([[l, r], L[(L > l) & (L < r)], R[(R > l) & (R < r)]])
        bp = np.unique(np.asarray(pts, dtype=LD))
        mids = bp[:-1] + (bp[1:] - bp[:-1]) / LD(2.0)
        return IntStepField(bp, self._t0_value(i, mids))

    def former_collar(self, i, n):
        """{x in P0_i : dist(x, boundary) < rho[n]}, from the offset tables."""
        l, r = self.base.lefts[i], self.base.rights[i]
        if n > self.T_cap:
            n = self.T_cap
        a = min(self.Loff[i][n], r)
        b = max(self.Roff[i][n], l)
        if a >= b:
            return RegionSet.interval(l, r, dtype=LD)
        return RegionSet(np.asarray([l, b]), np.asarray([a, r]))

    # -- bookkeeping -----------------------------------------------------
    def coverage(self) -> float:
        rem = sum(float(d.measure()) for d in self.delta)
        return float(min(max(1.0 - rem, 0.0), 1.0))

    def allowed_region(self, i) -> RegionSet:
        return self.t_field[i].level_region("eq", 0).intersect(self.delta[i])

    def forbidden_region(self, i) -> RegionSet:
        return self.t_field[i].level_region("ge", 1).intersect(self.delta[i])

    def _record_step_zero(self):
        lebB = sum(float(self.forbidden_region(i).measure())
                   for i in range(self.base.m))
        lebC = sum(float(self.former_collar(i, 0).measure())
                   for i in range(self.base.m))
        self.series.append({"n": 0, "leb_forbidden": lebB,
                            "leb_collars": lebC, "coverage": 0.0})
        if self.retain_fields:
            self.retained_fields[0] = [f for f in self.t_field]
        self.retained_gt1[0] = [
            self.t_field[i].level_region("gt", 1).intersect(self.delta[i])
            for i in range(self.base.m)]
        self.retained_B = {0: [
            self.t_field[i].level_region("ge", 1).intersect(self.delta[i])
            for i in range(self.base.m)]}

    # -- public views ------------------------------------------------------
    @property
    def constructed(self):
        return [self.element_view(i) for i in range(len(self.store))]

    def element_view(self, i) -> ConstructedElement:
        st = self.store
        return ConstructedElement(
            index=i,
            region=RegionSet.interval(st.left[i], st.right[i], dtype=LD),
            return_time=int(st.step[i]),
            center=float(st.center[i]),
            source_base=int(st.source[i]),
            target_base=int(st.target[i]),
            enlarged=RegionSet.interval(st.u1_left[i], st.u1_right[i], dtype=LD),
        )

    def element_collar_bounds(self, idx, n, dtype=np.float64):
        """Backward images of the target ring radius rho[n - k] for the
        selected elements: returns (outer_lo, outer_hi) per element, the
        collar being [outer_lo, left) union (right, outer_hi] clipped."""
        idx = np.asarray(idx, dtype=np.int64)
        st = self.store
        k = st.step[idx]
        j = np.minimum(n - k, self.T_cap)
        rad = self.rho[j]
        tb = np.concatenate([self.base.lefts, self.base.rights[-1:]])
        tl = np.asarray(tb[st.target[idx]], dtype=LD)
        tr = np.asarray(tb[st.target[idx] + 1], dtype=LD)
        depth = (k.astype(np.int64) * self.n0)
        if self.map_sys.is_circle:
            lo_t = st.lift_anchor[idx] - rad
            hi_t = st.lift_anchor[idx] + (tr - tl) + rad
            out = np.empty((2, idx.size), dtype=LD)
            for dgrp in np.unique(depth):
                sel = depth == dgrp
                vals = np.concatenate([lo_t[sel], hi_t[sel]])
                inv = _lift_chain(self.base_sys, vals, int(dgrp))
                m = sel.sum()
                out[0, sel] = inv[:m]
                out[1, sel] = inv[m:]
            lo, hi = out
        else:
            dom_lo = np.asarray(self.base_sys.cell_bounds[0], dtype=LD)
            dom_hi = np.asarray(self.base_sys.cell_bounds[-1], dtype=LD)
            lo_t = np.maximum(tl - rad, dom_lo)
            hi_t = np.minimum(tr + rad, dom_hi)
            lo = np.empty(idx.size, dtype=LD)
            hi = np.empty(idx.size, dtype=LD)
            for dgrp in np.unique(depth):
                sel = np.flatnonzero(depth == dgrp)
                itin = self.store.itineraries(idx[sel])
                a = _itinerary_chain(self.base_sys, lo_t[sel], itin, int(dgrp))
                b = _itinerary_chain(self.base_sys, hi_t[sel], itin, int(dgrp))
                lo[sel] = np.minimum(a, b)
                hi[sel] = np.maximum(a, b)
        return lo, hi

    def collar_inventory(self, n: Optional[int] = None):
        """CollarRecord list for step n (default: current step).  Element
        collars are reconstructed from cached ring preimages where
        available, else from fresh backward chains."""
        if n is None:
            n = self.step
        records = []
        for i in range(self.base.m):
            region = self.former_collar(i, n)
            nxt = self.former_collar(i, n + 1)
            records.append(CollarRecord(kind="former", source_step=0, owner=i,
                                        region=region,
                                        external_ring=region.difference(nxt)))
        if len(self.store):
            st = self.store
            idx = np.flatnonzero(st.step <= n)
            lo, hi = self._ring_points(idx, n)
            lo2, hi2 = self._ring_points(idx, n + 1)
            for j, e in enumerate(idx):
                region = RegionSet(np.asarray([lo[j], st.right[e]]),
                                   np.asarray([st.left[e], hi[j]]))
                nxt = RegionSet(np.asarray([lo2[j], st.right[e]]),
                                np.asarray([st.left[e], hi2[j]]))
                records.append(CollarRecord(
                    kind="element", source_step=int(st.step[e]), owner=int(e),
                    region=region, external_ring=region.difference(nxt)))
        return records

    def _ring_points(self, idx, n):
        """Collar outer bounds at step n for elements idx, using the cache
        (bit-stable) when present."""
        lo = np.empty(len(idx), dtype=LD)
        hi = np.empty(len(idx), dtype=LD)
        missing = []
        st = self.store
        for j, e in enumerate(idx):
            cache = st.ring_cache.get(int(e))
            jj = min(n - int(st.step[e]), self.T_cap)
            if cache is not None and jj < cache.shape[1]:
                lo[j], hi[j] = cache[0, jj], cache[1, jj]
            else:
                missing.append(j)
        if missing:
            sub = np.asarray([idx[j] for j in missing], dtype=np.int64)
            mlo, mhi = self.element_collar_bounds(sub, n)
            for t, j in enumerate(missing):
                lo[j], hi[j] = mlo[t], mhi[t]
        return lo, hi


# ---------------------------------------------------------------------------
# tile enumeration
# ---------------------------------------------------------------------------

def _lift_forward(base: MapSystem, x, depth: int):
    y = np.asarray(x, dtype=LD)
    for _ in range(depth):
        y = base.eval_lift(y)
    return y


def _target_bounds(state) -> np.ndarray:
    return np.concatenate([state.base.lefts, state.base.rights[-1:]])


def _tiles_circle(state, band_lo, band_hi, band_p0, n):
    """All depth-n tiles meeting the bands, via the global lift mosaic."""
    base = state.base_sys
    depth = n * state.n0
    m = state.base.m
    tb = _target_bounds(state)
    La = _lift_forward(base, band_lo, depth)
    Lb = _lift_forward(base, band_hi, depth)

    def _flat(values, side):
        W = np.floor(values)
        frac = values - W
        if side == "left":
            i = np.clip(np.searchsorted(tb, frac, side="right") - 1, 0, m - 1)
        else:
            i = np.clip(np.searchsorted(tb, frac, side="left") - 1, 0, m - 1)
        return W.astype(np.int64) * m + i

    f0 = _flat(La, "left")
    f1 = _flat(Lb, "right")
    counts = np.maximum(f1 - f0 + 1, 0)
    if counts.sum() == 0:
        return None
    tile_flat = np.concatenate([np.arange(a, a + c)
                                for a, c in zip(f0, counts) if c > 0])
    tile_band = np.repeat(np.arange(len(band_lo)), counts)
    tile_flat, first = np.unique(tile_flat, return_index=True)
    tile_band = tile_band[first]
    W = tile_flat // m
    i = tile_flat % m
    lv = W.astype(LD) + tb[i]
    rv = W.astype(LD) + tb[i + 1]
    left, logs = _lift_chain(base, lv, depth, want_slopes=True)
    right = _lift_chain(base, rv, depth)
    u1l = _lift_chain(base, lv - state.rho[0], depth)
    u1r = _lift_chain(base, rv + state.rho[0], depth)
    return {
        "left": left, "right": right, "u1_left": u1l, "u1_right": u1r,
        "target": i.astype(np.int32), "band": tile_band,
        "log_slope": logs, "lift_anchor": lv, "itin": None,
    }


def _tiles_interval(state, band_lo, band_hi, band_p0, n):
    """Depth-n tiles meeting the bands, via forward splitting at branch
    folds plus backward chains along the recorded itineraries."""
    base = state.base_sys
    depth = n * state.n0
    cb = np.asarray(base.cell_bounds, dtype=LD)
    nc = len(cb) - 1
    tb = _target_bounds(state)
    m = state.base.m

    img_l = np.asarray(band_lo, dtype=LD).copy()
    img_r = np.asarray(band_hi, dtype=LD).copy()
    band = np.arange(len(band_lo), dtype=np.int64)
    parents = []
    for _step in range(depth):
        lo_i = np.searchsorted(cb, img_l, side="right")
        hi_i = np.searchsorted(cb, img_r, side="left")
        cuts = np.maximum(hi_i - lo_i, 0)
        pieces = cuts + 1
        total = int(pieces.sum())
        seg_of = np.repeat(np.arange(img_l.size), pieces)
        offs = np.concatenate([[0], np.cumsum(pieces)[:-1]])
        pos = np.arange(total) - offs[seg_of]
        first = pos == 0
        last = pos == pieces[seg_of] - 1
        bidx = np.clip(lo_i[seg_of] + pos - 1, 0, len(cb) - 1)
        new_l = np.where(first, img_l[seg_of], cb[np.clip(bidx, 0, len(cb) - 1)])
        new_r = np.where(last, img_r[seg_of], cb[np.clip(lo_i[seg_of] + pos, 0,
                                                         len(cb) - 1)])
        cell = np.clip(lo_i[seg_of] + pos - 1, 0, nc - 1).astype(np.uint8)
        keep = new_r > new_l
        seg_of, new_l, new_r, cell = seg_of[keep], new_l[keep], new_r[keep], cell[keep]
        parents.append((seg_of, cell))
        fa = np.asarray(base.eval_map(new_l), dtype=LD)
        fb = np.asarray(base.eval_map(new_r), dtype=LD)
        img_l = np.minimum(fa, fb)
        img_r = np.maximum(fa, fb)
        alive = img_r > img_l
        if not alive.all():
            state.checks["degenerate_tiles"] += int((~alive).sum())
            img_l, img_r = img_l[alive], img_r[alive]
            parents[-1] = (seg_of[alive], cell[alive])

    nseg = img_l.size
    if nseg == 0:
        return None
    # resolve itineraries and band ids
    cells_mat = np.empty((nseg, depth), dtype=np.uint8)
    cur = np.arange(nseg)
    for stp in range(depth - 1, -1, -1):
        seg_of, cell = parents[stp]
        cells_mat[:, stp] = cell[cur]
        cur = seg_of[cur]
    band_of = band[cur]

    i_lo = np.clip(np.searchsorted(tb, img_l, side="right") - 1, 0, m - 1)
    i_hi = np.clip(np.searchsorted(tb, img_r, side="left") - 1, 0, m - 1)
    counts = np.maximum(i_hi - i_lo + 1, 0)
    if counts.sum() == 0:
        return None
    tile_seg = np.repeat(np.arange(nseg), counts)
    offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
    tile_i = (np.arange(int(counts.sum())) - offs[tile_seg]
              + i_lo[tile_seg]).astype(np.int64)
    itin = cells_mat[tile_seg]
    lv = tb[tile_i]
    rv = tb[tile_i + 1]
    a, logs_a = _itinerary_chain(base, lv, itin, depth, want_slopes=True)
    b, logs_b = _itinerary_chain(base, rv, itin, depth, want_slopes=True)
    left = np.minimum(a, b)
    right = np.maximum(a, b)
    logs = np.where(a <= b, logs_a, logs_b)
    dom_lo, dom_hi = cb[0], cb[-1]
    u1a = _itinerary_chain(base, np.maximum(lv - state.rho[0], dom_lo), itin, depth)
    u1b = _itinerary_chain(base, np.minimum(rv + state.rho[0], dom_hi), itin, depth)
    u1l = np.minimum(u1a, u1b)
    u1r = np.maximum(u1a, u1b)
    # dedupe identical tiles reached from two bands
    left, first = np.unique(left, return_index=True)
    return {
        "left": left, "right": right[first], "u1_left": u1l[first],
        "u1_right": u1r[first], "target": tile_i[first].astype(np.int32),
        "band": band_of[tile_seg[first]], "log_slope": logs[first],
        "lift_anchor": None, "itin": itin[first],
    }


def _tiles_from_witnesses(state, witnesses, n):
    """Tiles around explicit witness points (sample-grid mode)."""
    base = state.base_sys
    depth = n * state.n0
    m = state.base.m
    tb = _target_bounds(state)
    w = np.asarray(witnesses, dtype=LD)
    if state.map_sys.is_circle:
        Lw = _lift_forward(base, w, depth)
        W = np.floor(Lw)
        frac = Lw - W
        i = np.clip(np.searchsorted(tb, frac, side="right") - 1, 0, m - 1)
        flat = W.astype(np.int64) * m + i
        flat, first = np.unique(flat, return_index=True)
        W, i, w = flat // m, (flat % m).astype(np.int64), w[first]
        lv = W.astype(LD) + tb[i]
        rv = W.astype(LD) + tb[i + 1]
        left, logs = _lift_chain(base, lv, depth, want_slopes=True)
        right = _lift_chain(base, rv, depth)
        u1l = _lift_chain(base, lv - state.rho[0], depth)
        u1r = _lift_chain(base, rv + state.rho[0], depth)
        return {"left": left, "right": right, "u1_left": u1l, "u1_right": u1r,
                "target": i.astype(np.int32), "band": None, "probe": w,
                "log_slope": logs, "lift_anchor": lv, "itin": None}
    # interval maps: record each witness's branch itinerary
    cb = np.asarray(base.cell_bounds, dtype=LD)
    itin = np.empty((w.size, depth), dtype=np.uint8)
    x = w.copy()
    for j in range(depth):
        itin[:, j] = base.cell_of(np.asarray(x, dtype=np.float64))
        x = np.asarray(base.eval_map(x), dtype=LD)
    i = np.clip(np.searchsorted(tb, np.asarray(x, dtype=LD), side="right") - 1,
                0, m - 1)
    lv, rv = tb[i], tb[i + 1]
    a, logs_a = _itinerary_chain(base, lv, itin, depth, want_slopes=True)
    b, logs_b = _itinerary_chain(base, rv, itin, depth, want_slopes=True)
    left = np.minimum(a, b)
    right = np.maximum(a, b)
    logs = np.where(a <= b, logs_a, logs_b)
    dom_lo, dom_hi = cb[0], cb[-1]
    u1a = _itinerary_chain(base, np.maximum(lv - state.rho[0], dom_lo), itin, depth)
    u1b = _itinerary_chain(base, np.minimum(rv + state.rho[0], dom_hi), itin, depth)
    u1l = np.minimum(u1a, u1b)
    u1r = np.maximum(u1a, u1b)
    left, first = np.unique(left, return_index=True)
    return {"left": left, "right": right[first], "u1_left": u1l[first],
            "u1_right": u1r[first], "target": i[first].astype(np.int32),
            "band": None, "probe": w[first], "log_slope": logs[first],
            "lift_anchor": None, "itin": itin[first]}


# ---------------------------------------------------------------------------
# hyperbolic-time probing at the iterate level
# ---------------------------------------------------------------------------

def _probe_qualifies(state, probes, n):
    """Vector of booleans: is n a qualifying time for each probe point,
    for the iterated system and the run's (sigma, delta, b)."""
    g = state.map_sys
    base = state.base_sys
    cfg = state.cfg
    x = np.asarray(probes, dtype=np.float64)
    npts = x.size
    loginv = np.empty((npts, n))
    cdist = np.empty((npts, n))
    tiny = np.finfo(np.float64).tiny
    for j in range(n):
        cdist[:, j] = g.crit_dist(x)
        acc = np.zeros(npts)
        for _ in range(state.n0):
            acc += np.log(np.maximum(np.asarray(base.deriv_norm(x)), tiny))
            x = np.asarray(base.eval_map(x))
        loginv[:, j] = -acc
    log_sigma = np.log(cfg.sigma)
    S = np.concatenate([np.zeros((npts, 1)), np.cumsum(loginv, axis=1)], axis=1)
    T = S - np.arange(n + 1)[None, :] * log_sigma
    cond1 = T[:, n] <= T[:, :n].min(axis=1) + cfg.tol
    with np.errstate(divide="ignore"):
        ld = np.where(cdist <= cfg.delta, np.log(cdist), 0.0)
    G = ld + cfg.b_exp * np.arange(n)[None, :] * log_sigma
    cond2 = G.min(axis=1) >= cfg.b_exp * n * log_sigma - cfg.tol
    return cond1 & cond2


# ---------------------------------------------------------------------------
# the inductive step
# ---------------------------------------------------------------------------

def _interval_meets_region(region: RegionSet, lo, hi):
    """Vector test: does [lo_i, hi_i) intersect the region.  Intervals of
    a canonical RegionSet are disjoint and sorted, so it suffices to look
    at the last interval starting before hi."""
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    if region.is_empty():
        return np.zeros(lo.shape, dtype=bool)
    i = np.searchsorted(region.starts, hi, side="left") - 1
    ok = i >= 0
    i = np.clip(i, 0, len(region) - 1)
    return ok & (region.ends[i] > lo)


def _interval_inside_region(region: RegionSet, lo, hi):
    """Vector test: is [lo_i, hi_i) contained in one region interval."""
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    if region.is_empty():
        return np.zeros(lo.shape, dtype=bool)
    i = np.searchsorted(region.starts, lo, side="right") - 1
    ok = i >= 0
    i = np.clip(i, 0, len(region) - 1)
    return ok & (lo >= region.starts[i]) & (hi <= region.ends[i])


def algorithm_step(state: PartitionState, sample_grid=None) -> PartitionState:
    """Advance the construction by one step.

    With sample_grid given, witnesses are exactly the grid points found in
    the allowed region that qualify at this time.  In adaptive mode every
    tile meeting the allowed region is probed for a qualifying center.
    """
    n = state.step + 1
    base = state.base

    allowed = [state.allowed_region(i) for i in range(base.m)]

    cand = None
    probes = None
    if sample_grid is not None:
        pts = np.asarray(sample_grid, dtype=np.float64)
        masks = []
        for i in range(base.m):
            masks.append(allowed[i].contains_points(pts))
        in_allowed = np.logical_or.reduce(masks) if masks else np.zeros(pts.shape, bool)
        wit = pts[in_allowed]
        if wit.size:
            qual = _probe_qualifies(state, wit, n)
            wit = wit[qual]
        if wit.size:
            cand = _tiles_from_witnesses(state, wit, n)
            probes = cand.pop("probe")
    else:
        band_lo, band_hi, band_p0 = [], [], []
        for i in range(base.m):
            r = allowed[i]
            if not r.is_empty():
                band_lo.append(np.asarray(r.starts, dtype=LD))
                band_hi.append(np.asarray(r.ends, dtype=LD))
                band_p0.append(np.full(len(r), i, dtype=np.int64))
        if band_lo:
            band_lo = np.concatenate(band_lo)
            band_hi = np.concatenate(band_hi)
            band_p0 = np.concatenate(band_p0)
            maker = _tiles_circle if state.map_sys.is_circle else _tiles_interval
            cand = maker(state, band_lo, band_hi, band_p0, n)
            if cand is not None:
                # probe each tile inside its originating band
                b = cand.pop("band")
                ov_lo = np.maximum(cand["left"], band_lo[b])
                ov_hi = np.minimum(cand["right"], band_hi[b])
                width = np.asarray(ov_hi - ov_lo, dtype=np.float64)
                n_extra = np.clip((width * state.grid_size).astype(np.int64), 1, 8)
                reps = np.repeat(np.arange(cand["left"].size), n_extra)
                offs = np.concatenate([
                    (np.arange(c) + 0.5) / c for c in n_extra])
                probe_pts = (np.asarray(ov_lo, dtype=np.float64)[reps]
                             + offs * width[reps])
                qual_pts = _probe_qualifies(state, probe_pts, n)
                bounds = np.concatenate([[0], np.cumsum(n_extra)])
                qual = np.logical_or.reduceat(qual_pts, bounds[:-1])
                # representative probe: first qualifying point per tile
                first_q = np.full(cand["left"].size, np.nan)
                order = np.flatnonzero(qual_pts)
                if order.size:
                    tile_of = reps[order]
                    seen = np.unique(tile_of, return_index=True)
                    first_q[seen[0]] = probe_pts[order[seen[1]]]
                state.checks["skipped_probes"] += int((~qual).sum())
                for key in ("left", "right", "u1_left", "u1_right", "target",
                            "log_slope"):
                    cand[key] = cand[key][qual]
                if cand["lift_anchor"] is not None:
                    cand["lift_anchor"] = cand["lift_anchor"][qual]
                if cand["itin"] is not None:
                    cand["itin"] = cand["itin"][qual]
                probes = first_q[qual]
                if cand["left"].size == 0:
                    cand = None

    accepted_per_elem = {}
    if cand is not None:
        left, right = cand["left"], cand["right"]
        # geometric sanity
        good = right > left
        # containment in a single base element
        src = base.index_of(np.asarray(left, dtype=LD))
        good &= (left >= base.lefts[src]) & (right <= base.rights[src])
        # enlarged region inside the base element with the ring margin
        margin = state.rho[min(n, state.T_cap)]
        good &= (cand["u1_left"] - base.lefts[src] > margin)
        good &= (base.rights[src] - cand["u1_right"] > margin)
        state.checks["rem2_rejects"] += int((right > left).sum() - good.sum())

        if good.any():
            idx = np.flatnonzero(good)
            src = src[idx]
            left, right = left[idx], right[idx]
            u1l, u1r = cand["u1_left"][idx], cand["u1_right"][idx]
            # containment in the not-yet-removed region (fatal otherwise)
            for i in np.unique(src):
                sel = src == i
                inside = _interval_inside_region(state.delta[i],
                                                 left[sel], right[sel])
                if not inside.all():
                    raise OverlapError(
                        "step %d: %d tile(s) in base element %d intersect "
                        "previously removed territory" % (n, int((~inside).sum()), i))
                # deep-collar check (reported, not enforced)
                deep = state.t_field[i].level_region("gt", 1).intersect(state.delta[i])
                hits = _interval_meets_region(deep, left[sel], right[sel])
                if hits.any():
                    for j in np.flatnonzero(hits):
                        state.checks["lclaim_violations"].append(
                            {"step": n, "base": int(i),
                             "left": float(left[sel][j]), "right": float(right[sel][j])})
            # mutual disjointness, zero tolerance
            order = np.argsort(left)
            if not np.all(right[order][:-1] <= left[order][1:]):
                raise OverlapError("step %d: same-step tiles overlap" % n)

            cols = {
                "left": left, "right": right, "u1_left": u1l, "u1_right": u1r,
                "center": (np.asarray(probes)[idx] if probes is not None
                           else np.asarray((left + right) / 2, dtype=np.float64)),
                "step": np.full(left.size, n, dtype=np.int32),
                "source": src,
                "target": cand["target"][idx],
                "log_slope": cand["log_slope"][idx],
                "lift_anchor": (cand["lift_anchor"][idx]
                                if cand["lift_anchor"] is not None else None),
            }
            itin = cand["itin"][idx] if cand["itin"] is not None else None
            first_new = len(state.store)
            state.store.append(cols, itin)
            for i in np.unique(src):
                sel = src == i
                accepted_per_elem[int(i)] = (left[sel], right[sel])
                state.delta[i] = state.delta[i].difference(
                    RegionSet(left[sel], right[sel]))
            state._new_indices = np.arange(first_new, len(state.store))
        else:
            state._new_indices = np.empty(0, dtype=np.int64)
    else:
        state._new_indices = np.empty(0, dtype=np.int64)

    _install_annuli_and_update_fields(state, n)
    _record_series_and_checks(state, n)
    state.step = n
    return state


# ---------------------------------------------------------------------------
# field updates, series, checks
# ---------------------------------------------------------------------------

def _field_from_pieces(lo, hi, pieces, dtype):
    """Max-paint (start, end, value) pieces over a zero field on [lo, hi)."""
    if not pieces:
        return IntStepField.constant(lo, hi, 0, dtype=dtype)
    starts = np.asarray([p[0] for p in pieces], dtype=dtype)
    ends = np.asarray([p[1] for p in pieces], dtype=dtype)
    vals = np.asarray([p[2] for p in pieces], dtype=np.int64)
    keep = ends > starts
    starts, ends, vals = starts[keep], ends[keep], vals[keep]
    bp = np.unique(np.concatenate([[lo, hi], np.clip(starts, lo, hi),
                                   np.clip(ends, lo, hi)]))
    out = np.zeros(bp.size - 1, dtype=np.int64)
    for s, e, v in zip(starts, ends, vals):
        i0 = np.searchsorted(bp, max(s, lo))
        i1 = np.searchsorted(bp, min(e, hi))
        if i1 > i0:
            out[i0:i1] = np.maximum(out[i0:i1], v)
    return IntStepField(bp, out)


def _cache_rings(state, elem_indices, n):
    """Backward images of the full ring ladder for the given elements
    (built at step n).  Cached so that the time field and the collar
    inventory share bit-identical endpoints."""
    if len(elem_indices) == 0:
        return
    st = state.store
    J = max(state.N_max - n + 2, 2)
    tb = _target_bounds(state)
    idx = np.asarray(elem_indices, dtype=np.int64)
    tl = np.asarray(tb[st.target[idx]], dtype=LD)
    tr = np.asarray(tb[st.target[idx] + 1], dtype=LD)
    depth = n * state.n0
    rows_lo = np.empty((idx.size, J), dtype=LD)
    rows_hi = np.empty((idx.size, J), dtype=LD)
    if state.map_sys.is_circle:
        anchors = st.lift_anchor[idx]
        width = tr - tl
        for j in range(J):
            rows_lo[:, j] = _lift_chain(state.base_sys,
                                        anchors - state.rho[j], depth)
            rows_hi[:, j] = _lift_chain(state.base_sys,
                                        anchors + width + state.rho[j], depth)
    else:
        dom_lo = np.asarray(state.base_sys.cell_bounds[0], dtype=LD)
        dom_hi = np.asarray(state.base_sys.cell_bounds[-1], dtype=LD)
        itin = st.itineraries(idx)
        for j in range(J):
            a = _itinerary_chain(state.base_sys,
                                 np.maximum(tl - state.rho[j], dom_lo), itin, depth)
            b = _itinerary_chain(state.base_sys,
                                 np.minimum(tr + state.rho[j], dom_hi), itin, depth)
            rows_lo[:, j] = np.minimum(a, b)
            rows_hi[:, j] = np.maximum(a, b)
    for t, e in enumerate(idx):
        st.ring_cache[int(e)] = np.stack([rows_lo[t], rows_hi[t]])


def _install_annuli_and_update_fields(state, n):
    """Install the protection annuli of the step's new elements in the time
    field and apply the max / decay update on every base element."""
    st = state.store
    new_idx = state._new_indices
    by_base = {}
    if new_idx.size:
        # flanking: annulus parts that still meet unremoved territory
        lo_ext = st.u1_left[new_idx]
        hi_ext = st.u1_right[new_idx]
        flank = np.zeros(new_idx.size, dtype=bool)
        for i in np.unique(st.source[new_idx]):
            sel = st.source[new_idx] == i
            meets_l = _interval_meets_region(state.delta[i], lo_ext[sel],
                                             st.left[new_idx][sel])
            meets_r = _interval_meets_region(state.delta[i],
                                             st.right[new_idx][sel], hi_ext[sel])
            flank[sel] = meets_l | meets_r
        if state.retain_fields:
            flank[:] = True
        cached = new_idx[flank]
        _cache_rings(state, cached, n)
        for e in cached:
            by_base.setdefault(int(st.source[e]), []).append(int(e))

    if not hasattr(state, "flank_elems"):
        state.flank_elems = {i: [] for i in range(state.base.m)}
    for i, lst in by_base.items():
        state.flank_elems[i].extend(lst)

    J_by_elem = {}
    tprime = []
    for i in range(state.base.m):
        l, r = state.base.lefts[i], state.base.rights[i]
        pieces = []
        for e in by_base.get(i, []):
            cache = st.ring_cache[e]
            J = cache.shape[1]
            J_by_elem[e] = J
            el, er = st.left[e], st.right[e]
            for j in range(1, J):
                v = j
                pieces.append((cache[0, j - 1], cache[0, j], v))   # left annulus
                pieces.append((cache[1, j], cache[1, j - 1], v))   # right annulus
            pieces.append((cache[0, J - 1], el, J))                # capped, left
            pieces.append((er, cache[1, J - 1], J))                # capped, right
        tp = _field_from_pieces(l, r, pieces, dtype=LD)
        tprime.append(tp)
        t_new = state.t_field[i].decayed().max_with(tp)
        if not state.retain_fields:
            t_new = t_new.restricted(state.delta[i])
        state.t_field[i] = t_new
    if state.retain_fields:
        state.tprime_log[n] = tprime


def _element_collar_regions(state, i, n, elem_list):
    """Collar regions at step n for cached elements of base element i."""
    st = state.store
    pieces_s, pieces_e = [], []
    for e in elem_list:
        k = int(st.step[e])
        if k > n:
            continue
        cache = st.ring_cache[e]
        j = n - k
        if j >= cache.shape[1]:
            j = cache.shape[1] - 1
        pieces_s.extend([cache[0, j], st.right[e]])
        pieces_e.extend([st.left[e], cache[1, j]])
    if not pieces_s:
        return RegionSet.empty(LD)
    return RegionSet(np.asarray(pieces_s, dtype=LD),
                     np.asarray(pieces_e, dtype=LD))


def _record_series_and_checks(state, n):
    base = state.base
    st = state.store
    lebB = 0.0
    id1_ok = True
    id2_ok = True
    gt1_regions = []
    for i in range(base.m):
        delta_i = state.delta[i]
        forb = state.t_field[i].level_region("ge", 1).intersect(delta_i)
        lebB += float(forb.measure())
        flank = getattr(state, "flank_elems", {}).get(i, [])
        coll_n = state.former_collar(i, n).union(
            _element_collar_regions(state, i, n, flank))
        coll_next = state.former_collar(i, n + 1).union(
            _element_collar_regions(state, i, n + 1, flank))
        if state.retain_fields:
            lhs1 = coll_n
            rhs1 = state.t_field[i].level_region("ge", 1)
            lhs2 = coll_next
            rhs2 = state.t_field[i].level_region("gt", 1)
        else:
            lhs1 = coll_n.intersect(delta_i)
            rhs1 = forb
            lhs2 = coll_next.intersect(delta_i)
            rhs2 = state.t_field[i].level_region("gt", 1).intersect(delta_i)
        id1_ok &= (lhs1 == rhs1)
        id2_ok &= (lhs2 == rhs2)
        gt1_regions.append(rhs2 if not state.retain_fields
                           else rhs2.intersect(delta_i))
    state.checks["collar_identity"][n] = bool(id1_ok)
    state.checks["collar_ring_identity"][n] = bool(id2_ok)
    state.retained_gt1[n] = gt1_regions
    state.retained_B[n] = [
        state.t_field[i].level_region("ge", 1).intersect(state.delta[i])
        for i in range(base.m)]
    if state.retain_fields:
        state.retained_fields[n] = [f for f in state.t_field]

    # full collar-mass series and the per-element collar bound
    lebC = sum(float(state.former_collar(i, n).measure())
               for i in range(base.m))
    if len(st):
        idx = np.arange(len(st))
        lo, hi = state._ring_points(idx, n)
        wl = np.maximum(np.asarray(st.left - lo, dtype=np.float64), 0.0)
        wr = np.maximum(np.asarray(hi - st.right, dtype=np.float64), 0.0)
        widths = wl + wr
        lebC += float(widths.sum())
        # collar bound: Leb C <= C2 sigma^{(n-k)/2} Leb U, in log space
        from .preballs import distortion_bound_rho
        rho_c = distortion_bound_rho(state.map_sys.nondeg_B,
                                     state.map_sys.nondeg_beta,
                                     base.delta1, state.cfg.sigma,
                                     state.cfg.b_exp)
        diam = 0.5 if state.map_sys.is_circle else 1.0
        xi = 2.0 / float(min(base.widths()))
        logC2 = rho_c * diam + np.log(xi * base.delta0)
        lebU = np.asarray(st.right - st.left, dtype=np.float64)
        k = st.step.astype(np.float64)
        with np.errstate(divide="ignore"):
            lhs = np.log(np.maximum(widths, 0.0))
            rhs = logC2 + 0.5 * (n - k) * np.log(state.cfg.sigma) + np.log(lebU)
        bad = lhs > rhs
        state.comp2.append({"n": n, "checked": int(len(st)),
                            "violations": int(bad.sum())})
    else:
        state.comp2.append({"n": n, "checked": 0, "violations": 0})

    state.series.append({"n": n, "leb_forbidden": lebB, "leb_collars": lebC,
                         "coverage": state.coverage()})


# ---------------------------------------------------------------------------
# drivers and audits
# ---------------------------------------------------------------------------

def run_partitioning(map_sys: MapSystem, cfg: HyperbolicConfig,
                     base: BasePartition, N_max: int, grid_size: int = 100_000,
                     coverage_target: float = 0.999,
                     retain_fields: bool = False,
                     sample_grid=None) -> PartitionState:
    """Run the construction for steps 1..N_max, stopping early once the
    requested coverage is reached.  Coverage never decreases."""
    state = PartitionState(map_sys, cfg, base, N_max=N_max,
                           grid_size=grid_size,
                           coverage_target=coverage_target,
                           retain_fields=retain_fields)
    for _ in range(N_max):
        algorithm_step(state, sample_grid=sample_grid)
        if state.coverage() >= coverage_target:
            break
    return state


def forbidden_mass_series(state: PartitionState) -> dict:
    """Per-step forbidden and collar masses plus the collar bound audit and
    a log-linear tail fit of the forbidden-mass decay."""
    ns = [row["n"] for row in state.series]
    lebB = [row["leb_forbidden"] for row in state.series]
    lebC = [row["leb_collars"] for row in state.series]
    cov = [row["coverage"] for row in state.series]
    tail_slope = None
    pos = [(n, v) for n, v in zip(ns, lebB) if v > 0 and n >= 1]
    if len(pos) >= 4:
        half = pos[len(pos) // 2:]
        xs = np.asarray([p[0] for p in half], dtype=float)
        ys = np.log([p[1] for p in half])
        tail_slope = float(np.polyfit(xs, ys, 1)[0])
    comp2_viol = int(sum(row["violations"] for row in state.comp2))
    return {
        "n": ns,
        "leb_forbidden": lebB,
        "leb_collars": lebC,
        "coverage": cov,
        "tail_slope": tail_slope,
        "log_sqrt_sigma": float(0.5 * np.log(state.cfg.sigma)),
        "collar_bound_checked": int(sum(row["checked"] for row in state.comp2)),
        "collar_bound_violations": comp2_viol,
        "collar_bound_ok": comp2_viol == 0,
    }


def audit_no_deep_overlap(state: PartitionState) -> dict:
    """Post-hoc check that every element constructed at step n avoids the
    previous step's deep collar {t_{n-1} > 1}, as exact intersections."""
    st = state.store
    violations = []
    for e in range(len(st)):
        n = int(st.step[e])
        snap = state.retained_gt1.get(n - 1)
        if snap is None:
            continue
        region = snap[int(st.source[e])]
        if bool(_interval_meets_region(region, st.left[e:e + 1],
                                       st.right[e:e + 1])[0]):
            violations.append({"element": e, "step": n,
                               "left": float(st.left[e]),
                               "right": float(st.right[e])})
    return {"elements_checked": len(st), "violations": violations,
            "ok": not violations}


def verify_unrolled_max(state: PartitionState) -> bool:
    """Recompute t_n from the stored per-step annulus fields via
    t_n = max(t'_n, t'_{n-1} - 1, ..., t'_1 - (n-1), t0 - n) and compare
    with the incrementally maintained field.  Needs retain_fields."""
    if not state.retain_fields:
        raise ValueError("needs a state built with retain_fields=True")
    for n in sorted(state.tprime_log):
        for i in range(state.base.m):
            acc = state.retained_fields[0][i]
            acc = IntStepField(acc.bp, np.maximum(acc.val - n, 0))
            for k in sorted(state.tprime_log):
                if k > n:
                    break
                tp = state.tprime_log[k][i]
                acc = acc.max_with(IntStepField(tp.bp, np.maximum(tp.val - (n - k), 0)))
            if acc != state.retained_fields[n][i]:
                return False
    return True
