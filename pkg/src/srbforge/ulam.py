"""Stand-alone Ulam discretization used as a cross-validation oracle.

This module deliberately shares no code with the induced-map / tower
machinery: it discretizes the transfer operator of the raw map f on a
uniform grid by subsampling each cell, then power-iterates the resulting
column-stochastic matrix to its fixed density.  A long-orbit histogram
helper lives here too for the same reason.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = ["ulam_matrix", "ulam_density", "orbit_histogram"]


def ulam_matrix(map_sys, G: int, samples_per_cell: int = 64) -> sp.csr_matrix:
    """Column-stochastic cell-to-cell transport matrix of the map."""
    q = samples_per_cell
    offsets = (np.arange(q) + 0.5) / q
    src = np.repeat(np.arange(G), q)
    x = (src + np.tile(offsets, G)) / G
    y = np.asarray(map_sys.eval_map(x), dtype=np.float64)
    dst = np.clip((y * G).astype(np.int64), 0, G - 1)
    mat = sp.coo_matrix((np.full(src.size, 1.0 / q), (dst, src)), shape=(G, G))
    return mat.tocsr()


def ulam_density(map_sys, G: int, samples_per_cell: int = 64,
                 max_iters: int = 20000, tol: float = 1e-12):
    """Fixed density of the Ulam matrix; returns (masses, residual, iters)."""
    P = ulam_matrix(map_sys, G, samples_per_cell)
    v = np.full(G, 1.0 / G)
    residual = np.inf
    for it in range(1, max_iters + 1):
        w = P.dot(v)
        s = w.sum()
        if s <= 0:
            raise RuntimeError("Ulam iteration lost all mass")
        w /= s
        residual = float(np.abs(w - v).sum())
        v = w
        if residual < tol:
            break
    return v, residual, it


def orbit_histogram(map_sys, n_steps: int, G: int, seed: int = 0,
                    burn_in: int = 1000, strands: int = 64):
    """Occupation histogram of Lebesgue-random orbits, as cell masses.

    The step budget is split across independent orbit strands so the
    evolution vectorizes; each strand gets its own burn-in.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=strands)
    for _ in range(burn_in):
        x = np.asarray(map_sys.eval_map(x))
    per = int(np.ceil(n_steps / strands))
    counts = np.zeros(G, dtype=np.int64)
    for _ in range(per):
        idx = np.clip((x * G).astype(np.int64), 0, G - 1)
        counts += np.bincount(idx, minlength=G)
        x = np.asarray(map_sys.eval_map(x))
    return counts / float(counts.sum())
