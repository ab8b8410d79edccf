"""Numba kernels for the layered navigable small-world graph.

Vectors are unit-normalized float32 rows; distance is ``1 - dot``.  The graph
lives in flat arrays: ``nbr0``/``cnt0`` for the base layer (capacity 2M) and
``nbrU``/``cntU`` for upper layers (capacity M), indexed ``[node, level-1]``.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _dist(data, i, q):
    s = np.float32(0.0)
    row = data[i]
    for k in range(q.shape[0]):
        s += row[k] * q[k]
    return np.float64(1.0) - np.float64(s)


@njit(cache=True)
def _push(keys, vals, size, k, v):
    i = size
    keys[i] = k
    vals[i] = v
    while i > 0:
        p = (i - 1) >> 1
        if keys[p] > keys[i] or (keys[p] == keys[i] and vals[p] > vals[i]):
            keys[p], keys[i] = keys[i], keys[p]
            vals[p], vals[i] = vals[i], vals[p]
            i = p
        else:
            break
    return size + 1


@njit(cache=True)
def _pop(keys, vals, size):
    k = keys[0]
    v = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < size and (keys[l] < keys[m] or (keys[l] == keys[m] and vals[l] < vals[m])):
            m = l
        if r < size and (keys[r] < keys[m] or (keys[r] == keys[m] and vals[r] < vals[m])):
            m = r
        if m == i:
            break
        keys[m], keys[i] = keys[i], keys[m]
        vals[m], vals[i] = vals[i], vals[m]
        i = m
    return k, v, size


@njit(cache=True)
def _neighbors(node, level, nbr0, cnt0, nbrU, cntU):
    if level == 0:
        return nbr0[node, :cnt0[node]]
    return nbrU[node, level - 1, :cntU[node, level - 1]]


@njit(cache=True)
def search_layer(data, q, entries, ef, level, nbr0, cnt0, nbrU, cntU, visited, tag):
    """Beam search on one layer; returns (dists, ids) ascending, length <= ef."""
    cap = data.shape[0] + 1
    ck = np.empty(cap, np.float64)
    cv = np.empty(cap, np.int64)
    rk = np.empty(ef + 1, np.float64)  # max-heap via negated keys
    rv = np.empty(ef + 1, np.int64)
    cs = 0
    rs = 0
    for e in entries:
        if visited[e] == tag:
            continue
        visited[e] = tag
        d = _dist(data, e, q)
        cs = _push(ck, cv, cs, d, e)
        rs = _push(rk, rv, rs, -d, -e)
        if rs > ef:
            _, _, rs = _pop(rk, rv, rs)
    while cs > 0:
        d, c, cs = _pop(ck, cv, cs)
        if rs >= ef and d > -rk[0]:
            break
        nb = _neighbors(c, level, nbr0, cnt0, nbrU, cntU)
        for t in range(nb.shape[0]):
            e = nb[t]
            if visited[e] == tag:
                continue
            visited[e] = tag
            de = _dist(data, e, q)
            if rs < ef or de < -rk[0]:
                cs = _push(ck, cv, cs, de, e)
                rs = _push(rk, rv, rs, -de, -e)
                if rs > ef:
                    _, _, rs = _pop(rk, rv, rs)
    out_d = np.empty(rs, np.float64)
    out_i = np.empty(rs, np.int64)
    for k in range(rs - 1, -1, -1):
        nd, ni, rs = _pop(rk, rv, rs)
        out_d[k] = -nd
        out_i[k] = -ni
    return out_d, out_i


@njit(cache=True)
def _select(data, cand_d, cand_i, M):
    """Diversity heuristic: keep c if it is closer to the base than to every kept node."""
    order = np.argsort(cand_d, kind="mergesort")
    keep = np.empty(M, np.int64)
    nk = 0
    for t in range(order.shape[0]):
        c = cand_i[order[t]]
        dc = cand_d[order[t]]
        good = True
        for s in range(nk):
            if _dist(data, c, data[keep[s]]) < dc:
                good = False
                break
        if good:
            keep[nk] = c
            nk += 1
            if nk == M:
                break
    return keep[:nk]


@njit(cache=True)
def _link(data, src, dst, level, M_level, nbr0, cnt0, nbrU, cntU):
    if level == 0:
        n = cnt0[src]
        if n < M_level:
            nbr0[src, n] = dst
            cnt0[src] = n + 1
            return
        cur = nbr0[src, :n]
    else:
        n = cntU[src, level - 1]
        if n < M_level:
            nbrU[src, level - 1, n] = dst
            cntU[src, level - 1] = n + 1
            return
        cur = nbrU[src, level - 1, :n]
    cand_i = np.empty(n + 1, np.int64)
    cand_d = np.empty(n + 1, np.float64)
    for t in range(n):
        cand_i[t] = cur[t]
        cand_d[t] = _dist(data, cur[t], data[src])
    cand_i[n] = dst
    cand_d[n] = _dist(data, dst, data[src])
    kept = _select(data, cand_d, cand_i, M_level)
    if level == 0:
        for t in range(kept.shape[0]):
            nbr0[src, t] = kept[t]
        cnt0[src] = kept.shape[0]
    else:
        for t in range(kept.shape[0]):
            nbrU[src, level - 1, t] = kept[t]
        cntU[src, level - 1] = kept.shape[0]


@njit(cache=True)
def build_graph(data, levels, M, ef_construction, nbr0, cnt0, nbrU, cntU):
    n = data.shape[0]
    visited = np.zeros(n, np.int64)
    tag = 0
    entry = 0
    top = levels[0]
    ep = np.empty(1, np.int64)
    for i in range(1, n):
        q = data[i]
        li = levels[i]
        ep[0] = entry
        for lc in range(top, li, -1):
            tag += 1
            dd, ii = search_layer(data, q, ep, 1, lc, nbr0, cnt0, nbrU, cntU, visited, tag)
            ep[0] = ii[0]
        entries = ep.copy()
        for lc in range(min(top, li), -1, -1):
            tag += 1
            dd, ii = search_layer(data, q, entries, ef_construction, lc,
                                  nbr0, cnt0, nbrU, cntU, visited, tag)
            M_level = 2 * M if lc == 0 else M
            chosen = _select(data, dd, ii, M)
            for t in range(chosen.shape[0]):
                c = chosen[t]
                _link(data, i, c, lc, M_level, nbr0, cnt0, nbrU, cntU)
                _link(data, c, i, lc, M_level, nbr0, cnt0, nbrU, cntU)
            entries = ii
        if li > top:
            top = li
            entry = i
    return entry, top


@njit(cache=True)
def knn_query(data, q, K, ef, entry, top, nbr0, cnt0, nbrU, cntU, visited, tag):
    ep = np.empty(1, np.int64)
    ep[0] = entry
    for lc in range(top, 0, -1):
        tag += 1
        dd, ii = search_layer(data, q, ep, 1, lc, nbr0, cnt0, nbrU, cntU, visited, tag)
        ep[0] = ii[0]
    tag += 1
    dd, ii = search_layer(data, q, ep, max(ef, K), 0, nbr0, cnt0, nbrU, cntU, visited, tag)
    k = min(K, dd.shape[0])
    return dd[:k], ii[:k], tag
