"""Pure-Python sampler kernels.

Reference implementation of the per-spike loops; ``_sampler_ext`` mirrors it
operation for operation so both backends agree bit-for-bit.
"""

from __future__ import annotations

import numpy as np

INF = float("inf")


def level_cross(w, dv):
    out = [0]
    ref = w[0]
    for i in range(1, len(w)):
        if abs(w[i] - ref) >= dv[i]:
            out.append(i)
            ref = w[i]
    return out


def fill_point(sel, length):
    # largest gap wins, ties to the leftmost; boundary gaps fill the boundary
    if not sel:
        return 0
    best_len, best_at = 0, -1
    if sel[0] > 0:
        best_len, best_at = sel[0], 0
    for a, b in zip(sel[:-1], sel[1:]):
        if b - a >= 2 and b - a > best_len:
            best_len, best_at = b - a, (a + b) // 2
    last = length - 1
    if sel[-1] < last and last - sel[-1] > best_len:
        best_len, best_at = last - sel[-1], last
    return best_at


def _hold_cost(x, lo, hi, v):
    s = 0.0
    for i in range(lo, hi):
        d = x[i] - v
        s += d * d
    return s


def _segment_cost(x, a, b):
    va = x[a]
    vb = x[b]
    s = 0.0
    for i in range(a + 1, b):
        d = x[i] - (va + (vb - va) * (i - a) / (b - a))
        s += d * d
    return s


def optimal_subset(x, c, n_keep):
    """Subset of sorted candidates ``c`` minimizing the reconstruction SSE."""
    m = len(c)
    length = len(x)
    seg = [[INF] * m for _ in range(m)]
    for p in range(m):
        for q in range(p + 1, m):
            seg[p][q] = _segment_cost(x, c[p], c[q])
    cost = [_hold_cost(x, 0, c[q], x[c[q]]) for q in range(m)]
    back = []
    for k in range(1, n_keep):
        new = [INF] * m
        arg = [-1] * m
        for q in range(k, m):
            for p in range(k - 1, q):
                v = cost[p] + seg[p][q]
                if v < new[q]:
                    new[q] = v
                    arg[q] = p
        cost = new
        back.append(arg)
    best, q = INF, -1
    for j in range(n_keep - 1, m):
        v = cost[j] + _hold_cost(x, c[j] + 1, length, x[c[j]])
        if v < best:
            best, q = v, j
    out = [q]
    for arg in reversed(back):
        q = arg[q]
        out.append(q)
    return [c[j] for j in reversed(out)]


def select(cands, x, kabs, sabs, n_keep=8, optimal=True):
    sel = sorted(set(int(i) for i in cands))
    length = len(x)
    if len(sel) > n_keep:
        if optimal:
            return optimal_subset(x, sel, n_keep)
        ranked = sorted(sel, key=lambda i: (-kabs[i], -sabs[i], i))
        return sorted(ranked[:n_keep])
    while len(sel) < n_keep:
        sel.append(fill_point(sel, length))
        sel.sort()
    return sel


def reconstruct(idx, vals, length=48):
    out = np.empty(length, dtype=np.float64)
    n = len(idx)
    for i in range(0, idx[0]):
        out[i] = vals[0]
    for j in range(n - 1):
        a, b = idx[j], idx[j + 1]
        va, vb = vals[j], vals[j + 1]
        for i in range(a, b):
            out[i] = va + (vb - va) * (i - a) / (b - a)
    for i in range(idx[n - 1], length):
        out[i] = vals[n - 1]
    return out


def compress_batch(x, kabs, sabs, dv, n_keep=8, optimal=True):
    m = x.shape[0]
    out = np.empty((m, n_keep), dtype=np.int64)
    for r in range(m):
        # python floats keep the loops off numpy scalars
        xr = x[r].tolist()
        cands = level_cross(xr, dv[r].tolist())
        out[r] = select(cands, xr, kabs[r].tolist(), sabs[r].tolist(), n_keep, optimal)
    return out


def reconstruct_batch(idx, vals, length=48):
    out = np.empty((idx.shape[0], length), dtype=np.float64)
    for r in range(idx.shape[0]):
        out[r] = reconstruct(idx[r].tolist(), vals[r].tolist(), length)
    return out
