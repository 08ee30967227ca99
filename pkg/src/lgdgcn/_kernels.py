"""Compiled per-edge loops used by the routing operations.

All loops run sequentially in edge order, so results do not depend on threading.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def block_dot(z, c, src, dst, blocks):
    e_count = src.shape[0]
    width = z.shape[1] // blocks
    out = np.zeros((e_count, blocks))
    for e in range(e_count):
        zr = z[src[e]]
        cr = c[dst[e]]
        for m in range(blocks):
            base = m * width
            s = 0.0
            for k in range(width):
                s += zr[base + k] * cr[base + k]
            out[e, m] = s
    return out


@njit(cache=True)
def block_dot_grad(g, z, c, src, dst, blocks, want_z, want_c):
    width = z.shape[1] // blocks
    gz = np.zeros_like(z)
    gc = np.zeros_like(c)
    for e in range(src.shape[0]):
        zr = z[src[e]]
        cr = c[dst[e]]
        gzr = gz[src[e]]
        gcr = gc[dst[e]]
        for m in range(blocks):
            ge = g[e, m]
            if ge == 0.0:
                continue
            base = m * width
            if want_z:
                for k in range(base, base + width):
                    gzr[k] += ge * cr[k]
            if want_c:
                for k in range(base, base + width):
                    gcr[k] += ge * zr[k]
    return gz, gc


@njit(cache=True)
def block_scatter(p, z, src, dst):
    blocks = p.shape[1]
    width = z.shape[1] // blocks
    out = np.zeros_like(z)
    for e in range(src.shape[0]):
        zr = z[src[e]]
        orow = out[dst[e]]
        for m in range(blocks):
            pe = p[e, m]
            base = m * width
            for k in range(base, base + width):
                orow[k] += pe * zr[k]
    return out


@njit(cache=True)
def block_scatter_grad(g, p, z, src, dst, want_p, want_z):
    blocks = p.shape[1]
    width = z.shape[1] // blocks
    gp = np.zeros_like(p)
    gz = np.zeros_like(z)
    for e in range(src.shape[0]):
        zr = z[src[e]]
        gr = g[dst[e]]
        gzr = gz[src[e]]
        for m in range(blocks):
            pe = p[e, m]
            base = m * width
            if want_p:
                s = 0.0
                for k in range(base, base + width):
                    s += gr[k] * zr[k]
                gp[e, m] = s
            if want_z:
                for k in range(base, base + width):
                    gzr[k] += pe * gr[k]
    return gp, gz


@njit(cache=True)
def pair_distances(x):
    """Euclidean distances from coordinate differences: exactly symmetric, no cancellation."""
    n, d = x.shape
    out = np.zeros((n, n))
    for i in range(n):
        xi = x[i]
        for j in range(i + 1, n):
            xj = x[j]
            s = 0.0
            for k in range(d):
                t = xi[k] - xj[k]
                s += t * t
            v = np.sqrt(s)
            out[i, j] = v
            out[j, i] = v
    return out


@njit(cache=True)
def radius_adjacency(d, radius, continuous):
    """CSR arrays of the kNN union rule (d <= r_i or d <= r_j) or the CkNN rule (d < sqrt(r_i r_j))."""
    n = d.shape[0]
    offsets = np.zeros(n + 1, dtype=np.int64)
    for pass_ in range(2):
        if pass_ == 1:
            cols = np.empty(offsets[n], dtype=np.int64)
        for i in range(n):
            row = d[i]
            ri = radius[i]
            count = 0
            for j in range(n):
                if j == i:
                    continue
                dij = row[j]
                if continuous:
                    hit = dij < np.sqrt(ri * radius[j])
                else:
                    hit = dij <= ri or dij <= radius[j]
                if hit:
                    if pass_ == 1:
                        cols[offsets[i] + count] = j
                    count += 1
            if pass_ == 0:
                offsets[i + 1] = offsets[i] + count
    return offsets, cols
