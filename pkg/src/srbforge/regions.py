"""Exact set algebra on finite unions of half-open intervals.

All sets live inside a universe interval (default [0, 1)).  Intervals are
half-open [a, b), stored as two sorted numpy arrays, merged whenever they
touch or overlap.  Every boolean operation is done with comparisons only,
never with arithmetic on endpoints, so identical endpoint values propagate
bit-for-bit through unions, intersections and differences.  That property
is what makes the zero-tolerance disjointness and collar-identity checks
of the partition builder meaningful.
"""
from __future__ import annotations

import numpy as np

__all__ = ["RegionSet", "IntStepField"]


def _as_array(x, dtype):
    a = np.asarray(x, dtype=dtype)
    return np.atleast_1d(a)


class RegionSet:
    """A finite union of disjoint half-open intervals [a, b)."""

    __slots__ = ("starts", "ends")

    def __init__(self, starts=(), ends=(), dtype=np.float64, canonical=False):
        if canonical:
            self.starts = starts
            self.ends = ends
            return
        s = _as_array(starts, dtype)
        e = _as_array(ends, dtype)
        if s.shape != e.shape:
            raise ValueError("starts and ends must have equal length")
        keep = e > s
        s, e = s[keep], e[keep]
        if s.size == 0:
            self.starts = s
            self.ends = e
            return
        order = np.argsort(s, kind="stable")
        s, e = s[order], e[order]
        # merge overlapping or touching intervals
        emax = np.maximum.accumulate(e)
        newgrp = np.empty(s.size, dtype=bool)
        newgrp[0] = True
        newgrp[1:] = s[1:] > emax[:-1]
        idx = np.flatnonzero(newgrp)
        self.starts = s[idx]
        self.ends = emax[np.concatenate([idx[1:] - 1, [s.size - 1]])]

    # -- constructors -------------------------------------------------
    @classmethod
    def empty(cls, dtype=np.float64):
        z = np.empty(0, dtype=dtype)
        return cls(z, z.copy(), canonical=True)

    @classmethod
    def interval(cls, a, b, dtype=np.float64):
        return cls([a], [b], dtype=dtype)

    @classmethod
    def from_pairs(cls, pairs, dtype=np.float64):
        if len(pairs) == 0:
            return cls.empty(dtype)
        arr = np.asarray(pairs, dtype=dtype)
        return cls(arr[:, 0], arr[:, 1])

    # -- basic queries -------------------------------------------------
    @property
    def dtype(self):
        return self.starts.dtype

    def __len__(self):
        return int(self.starts.size)

    def is_empty(self):
        return self.starts.size == 0

    def measure(self):
        if self.starts.size == 0:
            return self.starts.dtype.type(0.0)
        return (self.ends - self.starts).sum()

    def pairs(self):
        return list(zip(self.starts.tolist(), self.ends.tolist()))

    def bounds(self):
        if self.is_empty():
            return None
        return self.starts[0], self.ends[-1]

    def contains_points(self, x):
        """Boolean mask: which points lie inside the set."""
        x = np.asarray(x)
        if self.starts.size == 0:
            return np.zeros(x.shape, dtype=bool)
        i = np.searchsorted(self.starts, x, side="right") - 1
        inside = i >= 0
        i = np.clip(i, 0, self.starts.size - 1)
        return inside & (x < self.ends[i])

    def __contains__(self, x):
        return bool(self.contains_points(np.asarray([x]))[0])

    def __eq__(self, other):
        if not isinstance(other, RegionSet):
            return NotImplemented
        return (self.starts.shape == other.starts.shape
                and np.array_equal(self.starts, other.starts)
                and np.array_equal(self.ends, other.ends))

    def __hash__(self):
        return hash((self.starts.tobytes(), self.ends.tobytes()))

    def __repr__(self):
        if self.is_empty():
            return "RegionSet(empty)"
        if len(self) <= 4:
            body = ", ".join("[%.17g, %.17g)" % p for p in self.pairs())
        else:
            body = "%d intervals, measure %.17g" % (len(self), float(self.measure()))
        return "RegionSet(%s)" % body

    # -- boolean algebra -----------------------------------------------
    def _sweep(self, other, keep):
        """Boundary sweep. keep(a_in, b_in) -> bool decides membership."""
        dtype = np.promote_types(self.dtype, other.dtype)
        pts = np.concatenate([
            self.starts.astype(dtype, copy=False),
            self.ends.astype(dtype, copy=False),
            other.starts.astype(dtype, copy=False),
            other.ends.astype(dtype, copy=False),
        ])
        if pts.size == 0:
            return RegionSet.empty(dtype)
        bounds = np.unique(pts)
        if bounds.size < 2:
            return RegionSet.empty(dtype)
        lo, hi = bounds[:-1], bounds[1:]
        # segment [lo, hi) is inside a set iff lo falls in one of its intervals
        def _inside(rs):
            if rs.starts.size == 0:
                return np.zeros(lo.shape, dtype=bool)
            i = np.searchsorted(rs.starts, lo, side="right") - 1
            ok = i >= 0
            i = np.clip(i, 0, rs.starts.size - 1)
            return ok & (lo < rs.ends[i])

        mask = keep(_inside(self), _inside(other))
        if not mask.any():
            return RegionSet.empty(dtype)
        return RegionSet(lo[mask], hi[mask])

    def union(self, other):
        if self.is_empty():
            return other
        if other.is_empty():
            return self
        dtype = np.promote_types(self.dtype, other.dtype)
        return RegionSet(
            np.concatenate([self.starts.astype(dtype, copy=False),
                            other.starts.astype(dtype, copy=False)]),
            np.concatenate([self.ends.astype(dtype, copy=False),
                            other.ends.astype(dtype, copy=False)]))

    def intersect(self, other):
        if self.is_empty() or other.is_empty():
            return RegionSet.empty(np.promote_types(self.dtype, other.dtype))
        return self._sweep(other, lambda a, b: a & b)

    def difference(self, other):
        if self.is_empty() or other.is_empty():
            return self
        return self._sweep(other, lambda a, b: a & ~b)

    def __or__(self, other):
        return self.union(other)

    def __and__(self, other):
        return self.intersect(other)

    def __sub__(self, other):
        return self.difference(other)

    def complement(self, universe):
        return universe.difference(self)

    def is_subset_of(self, other):
        return self.difference(other).is_empty()

    def is_disjoint_from(self, other):
        return self.intersect(other).is_empty()


class IntStepField:
    """Piecewise-constant nonnegative integer field on [lo, hi).

    Stored as breakpoints b_0 < ... < b_m with values v_i on [b_i, b_{i+1});
    b_0 = lo and b_m = hi always.  Adjacent pieces with equal values are
    merged, so two fields are equal iff their arrays are equal.
    """

    __slots__ = ("bp", "val")

    def __init__(self, bp, val, canonical=False):
        bp = np.asarray(bp)
        val = np.asarray(val, dtype=np.int64)
        if canonical:
            self.bp = bp
            self.val = val
            return
        if bp.size != val.size + 1:
            raise ValueError("need len(bp) == len(val) + 1")
        keep = bp[1:] > bp[:-1]
        if not keep.all():
            idx = np.flatnonzero(keep)
            val = val[idx]
            bp = np.concatenate([bp[idx], bp[-1:]])
        # merge equal-valued neighbours
        if val.size > 1:
            diff = val[1:] != val[:-1]
            idx = np.concatenate([[0], np.flatnonzero(diff) + 1])
            val = val[idx]
            bp = np.concatenate([bp[idx], bp[-1:]])
        self.bp = bp
        self.val = val

    @classmethod
    def constant(cls, lo, hi, value=0, dtype=np.float64):
        return cls(np.asarray([lo, hi], dtype=dtype),
                   np.asarray([value], dtype=np.int64))

    @property
    def lo(self):
        return self.bp[0]

    @property
    def hi(self):
        return self.bp[-1]

    def __eq__(self, other):
        if not isinstance(other, IntStepField):
            return NotImplemented
        return (np.array_equal(self.bp, other.bp)
                and np.array_equal(self.val, other.val))

    def __hash__(self):
        return hash((self.bp.tobytes(), self.val.tobytes()))

    def value_at(self, x):
        x = np.asarray(x)
        i = np.clip(np.searchsorted(self.bp, x, side="right") - 1,
                    0, self.val.size - 1)
        return self.val[i]

    def decayed(self):
        """Field after one step of the t -> max(t - 1, 0) update."""
        return IntStepField(self.bp, np.maximum(self.val - 1, 0))

    def max_with(self, other):
        """Pointwise maximum with another field on the same support."""
        bp = np.unique(np.concatenate([self.bp, other.bp]))
        lo = bp[:-1]
        va = self.val[np.clip(np.searchsorted(self.bp, lo, side="right") - 1,
                              0, self.val.size - 1)]
        vb = other.val[np.clip(np.searchsorted(other.bp, lo, side="right") - 1,
                               0, other.val.size - 1)]
        return IntStepField(bp, np.maximum(va, vb))

    def level_region(self, op, c):
        """Region where the field compares to c: op in {'ge','gt','eq','le'}."""
        if op == "ge":
            mask = self.val >= c
        elif op == "gt":
            mask = self.val > c
        elif op == "eq":
            mask = self.val == c
        elif op == "le":
            mask = self.val <= c
        else:
            raise ValueError(op)
        if not mask.any():
            return RegionSet.empty(self.bp.dtype)
        return RegionSet(self.bp[:-1][mask], self.bp[1:][mask])

    def restricted(self, region):
        """Zero the field outside the region (support pruning)."""
        if region.is_empty():
            return IntStepField.constant(self.lo, self.hi, 0, dtype=self.bp.dtype)
        bp = np.unique(np.concatenate([
            self.bp,
            region.starts.astype(self.bp.dtype, copy=False),
            region.ends.astype(self.bp.dtype, copy=False)]))
        bp = bp[(bp >= self.lo) & (bp <= self.hi)]
        if bp[0] != self.lo:
            bp = np.concatenate([[self.lo], bp])
        if bp[-1] != self.hi:
            bp = np.concatenate([bp, [self.hi]])
        lo = bp[:-1]
        v = self.val[np.clip(np.searchsorted(self.bp, lo, side="right") - 1,
                             0, self.val.size - 1)]
        inside = region.contains_points(lo)
        return IntStepField(bp, np.where(inside, v, 0))

    def __repr__(self):
        return "IntStepField(%d pieces on [%.6g, %.6g), max %d)" % (
            self.val.size, float(self.lo), float(self.hi),
            int(self.val.max()) if self.val.size else 0)
