"""Compiled CART kernels: Gini splits on bootstrap-weighted rows."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def build_tree(Xt, y, weights, rows, order, col_const, max_depth, min_samples_split, max_features, seed):
    """Grow one tree depth-first.

    ``Xt`` is the (d, n) transposed feature matrix, ``weights`` the bootstrap
    multiplicity of every row and ``rows`` the rows with non-zero weight.
    ``order[f]`` lists all rows sorted by feature ``f``; large nodes scan it
    instead of sorting their own rows. ``col_const[f]`` marks features that
    are constant over all rows and can never split. ``max_depth < 0`` means unbounded.
    Candidate features are visited in a random order until ``max_features``
    non-constant ones have been scored.
    """
    np.random.seed(seed)
    d = Xt.shape[0]
    idx = rows.copy()
    m = idx.shape[0]
    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    count0 = np.zeros(cap)
    count1 = np.zeros(cap)

    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_node = np.empty(cap, dtype=np.int64)
    sp = 0
    st_start[0] = 0
    st_end[0] = m
    st_depth[0] = 0
    st_node[0] = 0
    sp = 1
    n_nodes = 1
    vals = np.empty(m)
    n_all = Xt.shape[1]
    stamp = np.full(n_all, -1, dtype=np.int64)
    sorted_rows = np.empty(m, dtype=np.int64)

    while sp > 0:
        sp -= 1
        s = st_start[sp]
        e = st_end[sp]
        depth = st_depth[sp]
        node = st_node[sp]

        c0 = 0.0
        c1 = 0.0
        for p in range(s, e):
            i = idx[p]
            if y[i]:
                c1 += weights[i]
            else:
                c0 += weights[i]
        count0[node] = c0
        count1[node] = c1
        total = c0 + c1
        if c0 == 0.0 or c1 == 0.0 or total < min_samples_split or e - s < 2:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        perm = np.random.permutation(d)
        if (e - s) * 16 > n_all:
            for p in range(s, e):
                stamp[idx[p]] = node
        best_f = -1
        best_imp = np.inf
        best_thr = 0.0
        visited = 0
        for fi in range(d):
            if visited >= max_features:
                break
            f = perm[fi]
            if col_const[f]:
                continue
            k = e - s
            # k log k sort versus one pass over every row
            if k * 16 > n_all:
                q = 0
                for j in range(n_all):
                    i = order[f, j]
                    if stamp[i] == node:
                        sorted_rows[q] = i
                        vals[q] = Xt[f, i]
                        q += 1
            else:
                vmin = np.inf
                vmax = -np.inf
                for p in range(k):
                    v = Xt[f, idx[s + p]]
                    vals[p] = v
                    vmin = min(vmin, v)
                    vmax = max(vmax, v)
                if vmax <= vmin:
                    continue
                o = np.argsort(vals[:k])
                for p in range(k):
                    sorted_rows[p] = idx[s + o[p]]
                tmpv = vals[:k][o]
                vals[:k] = tmpv
            if vals[k - 1] <= vals[0]:
                continue
            visited += 1
            l0 = 0.0
            l1 = 0.0
            for q in range(k - 1):
                i = sorted_rows[q]
                if y[i]:
                    l1 += weights[i]
                else:
                    l0 += weights[i]
                v = vals[q]
                vn = vals[q + 1]
                if vn <= v:
                    continue
                nl = l0 + l1
                nr = total - nl
                r0 = c0 - l0
                r1 = c1 - l1
                imp = (nl - (l0 * l0 + l1 * l1) / nl) + (nr - (r0 * r0 + r1 * r1) / nr)
                if imp < best_imp:
                    best_imp = imp
                    best_f = f
                    thr = v / 2.0 + vn / 2.0
                    if thr >= vn:
                        thr = v
                    best_thr = thr
        if best_f < 0:
            continue

        # partition idx[s:e] so that rows with x <= thr come first
        lo = s
        hi = e - 1
        while lo <= hi:
            if Xt[best_f, idx[lo]] <= best_thr:
                lo += 1
            else:
                tmp = idx[lo]
                idx[lo] = idx[hi]
                idx[hi] = tmp
                hi -= 1
        mid = lo
        if mid == s or mid == e:
            continue

        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_start[sp] = mid
        st_end[sp] = e
        st_depth[sp] = depth + 1
        st_node[sp] = n_nodes + 1
        sp += 1
        st_start[sp] = s
        st_end[sp] = mid
        st_depth[sp] = depth + 1
        st_node[sp] = n_nodes
        sp += 1
        n_nodes += 2

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), count0[:n_nodes].copy(), count1[:n_nodes].copy())


@njit(cache=True, nogil=True)
def predict_tree(X, feature, threshold, left, right, leaf_value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while left[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = leaf_value[node]
    return out
