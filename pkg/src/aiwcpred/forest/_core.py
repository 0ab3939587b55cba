"""Compiled tree growing and traversal.

Every random draw comes from a counter-based splitmix64 stream keyed by
``(seed, tree index)``, so tree ``t`` of a forest depends only on the data,
the seed, ``t``, ``mtry`` and ``min_node_size``.  A forest of ``N`` trees is
therefore a prefix of any forest of ``M > N`` trees grown with the same
settings; the tuner's objective cache relies on this.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream selectors mixed into the tree key
_BOOTSTRAP_STREAM = np.uint64(0x626F6F74)
_SPLIT_STREAM = np.uint64(0x73706C74)

LEAF = -1


@njit(cache=True)
def splitmix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def tree_key(seed, tree_index):
    return splitmix64(splitmix64(np.uint64(seed)) ^ np.uint64(tree_index))


@njit(cache=True)
def _uniform(key, counter):
    # 53 random bits -> [0, 1)
    return (splitmix64(key ^ splitmix64(np.uint64(counter))) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def bootstrap_counts(key, n):
    counts = np.zeros(n, dtype=np.int32)
    k = splitmix64(key ^ _BOOTSTRAP_STREAM)
    for i in range(n):
        j = int(_uniform(k, i) * n)
        if j >= n:
            j = n - 1
        counts[j] += 1
    return counts


@njit(cache=True)
def _grow(Xt, order, list_of, y, counts, mtry, min_node_size, key,
          feat, thr, left, right, value):
    """Grow one tree into the preallocated node arrays; returns node count.

    ``Xt`` is the predictor matrix transposed (columns, rows).  Row list 0
    holds node membership in arbitrary order; list ``list_of[f]`` (when
    positive) holds the rows sorted by column ``f``.  Each split partitions
    every list stably, so a node's rows stay contiguous and sorted.  Columns
    with at most two distinct values get no sorted list and are scanned from
    list 0 directly.
    """
    p, n = Xt.shape
    n_lists = order.shape[0] + 1
    m = 0
    for i in range(n):
        if counts[i] > 0:
            m += 1
    srt = np.empty((n_lists, m), dtype=np.int32)
    k = 0
    for i in range(n):
        if counts[i] > 0:
            srt[0, k] = i
            k += 1
    for li in range(1, n_lists):
        k = 0
        for a in range(n):
            r = order[li - 1, a]
            if counts[r] > 0:
                srt[li, k] = r
                k += 1

    goes_left = np.zeros(n, dtype=np.int32)
    buf = np.empty(m, dtype=np.int32)
    perm = np.arange(p)
    chosen = np.empty(mtry, dtype=np.int64)

    # explicit stack of (node id, start, stop)
    st_node = np.empty(m + 1, dtype=np.int64)
    st_lo = np.empty(m + 1, dtype=np.int64)
    st_hi = np.empty(m + 1, dtype=np.int64)
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = m
    sp = 1
    n_nodes = 1
    split_key = splitmix64(key ^ _SPLIT_STREAM)
    draw = 0

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lo = st_lo[sp]
        hi = st_hi[sp]

        w_tot = 0.0
        s_tot = 0.0
        for a in range(lo, hi):
            r = srt[0, a]
            w = counts[r]
            w_tot += w
            s_tot += w * y[r]
        value[node] = s_tot / w_tot
        feat[node] = LEAF

        if w_tot < 2 * min_node_size:
            continue
        y0 = y[srt[0, lo]]
        constant = True
        for a in range(lo + 1, hi):
            if y[srt[0, a]] != y0:
                constant = False
                break
        if constant:
            continue

        # partial Fisher-Yates draw of mtry columns, scanned in ascending order
        for j in range(p):
            perm[j] = j
        for j in range(mtry):
            u = _uniform(split_key, draw)
            draw += 1
            k = j + int(u * (p - j))
            if k >= p:
                k = p - 1
            tmp = perm[j]
            perm[j] = perm[k]
            perm[k] = tmp
            chosen[j] = perm[j]
        chosen.sort()

        base = s_tot * s_tot / w_tot
        best_gain = 0.0
        best_f = -1
        best_t = 0.0
        for ci in range(mtry):
            f = chosen[ci]
            li = list_of[f]
            if li > 0:
                wl = 0.0
                sl = 0.0
                for a in range(lo, hi - 1):
                    r = srt[li, a]
                    wl += counts[r]
                    sl += counts[r] * y[r]
                    v = Xt[f, r]
                    v_next = Xt[f, srt[li, a + 1]]
                    if v_next == v:
                        continue
                    wr = w_tot - wl
                    sr = s_tot - sl
                    gain = sl * sl / wl + sr * sr / wr - base
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        t = 0.5 * (v + v_next)
                        if t >= v_next:
                            t = v
                        best_t = t
            elif li == 0:
                # two-valued column: a single candidate threshold
                v_lo = Xt[f, srt[0, lo]]
                v_hi = v_lo
                for a in range(lo + 1, hi):
                    v = Xt[f, srt[0, a]]
                    if v < v_lo:
                        v_lo = v
                    elif v > v_hi:
                        v_hi = v
                if v_lo == v_hi:
                    continue
                wl = 0.0
                sl = 0.0
                for a in range(lo, hi):
                    r = srt[0, a]
                    if Xt[f, r] == v_lo:
                        wl += counts[r]
                        sl += counts[r] * y[r]
                wr = w_tot - wl
                sr = s_tot - sl
                gain = sl * sl / wl + sr * sr / wr - base
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    t = 0.5 * (v_lo + v_hi)
                    if t >= v_hi:
                        t = v_lo
                    best_t = t

        if best_f < 0:
            continue

        n_left = 0
        for a in range(lo, hi):
            r = srt[0, a]
            g = 1 if Xt[best_f, r] <= best_t else 0
            goes_left[r] = g
            n_left += g
        mid = lo + n_left
        for li in range(n_lists):
            il = lo
            ir = 0
            # branch-free: the side test is unpredictable
            for a in range(lo, hi):
                r = srt[li, a]
                g = goes_left[r]
                srt[li, il] = r
                buf[ir] = r
                il += g
                ir += 1 - g
            for a in range(ir):
                srt[li, mid + a] = buf[a]

        feat[node] = best_f
        thr[node] = best_t
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is numbered depth-first
        st_node[sp] = rnode
        st_lo[sp] = mid
        st_hi[sp] = hi
        sp += 1
        st_node[sp] = lnode
        st_lo[sp] = lo
        st_hi[sp] = mid
        sp += 1
    return n_nodes


@njit(cache=True)
def predict_tree(feat, thr, left, right, value, x):
    node = 0
    while feat[node] != LEAF:
        if x[feat[node]] <= thr[node]:
            node = left[node]
        else:
            node = right[node]
    return value[node]


@njit(cache=True, nogil=True)
def grow_forest(X, Xt, order, list_of, y, seed, first_tree, num_trees,
                mtry, min_node_size):
    """Grow trees ``first_tree .. first_tree + num_trees - 1``.

    Returns flat node arrays, per-tree node offsets, the in-bag count matrix
    and per-tree out-of-bag predictions (NaN where the row was in-bag).
    """
    n = X.shape[0]
    cap = 2 * n + 1
    feat_all = np.empty(num_trees * cap, dtype=np.int32)
    thr_all = np.empty(num_trees * cap)
    left_all = np.empty(num_trees * cap, dtype=np.int32)
    right_all = np.empty(num_trees * cap, dtype=np.int32)
    value_all = np.empty(num_trees * cap)
    offsets = np.zeros(num_trees + 1, dtype=np.int64)
    inbag = np.empty((num_trees, n), dtype=np.int32)
    oob = np.empty((num_trees, n))

    feat = np.empty(cap, dtype=np.int32)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    value = np.zeros(cap)
    pos = 0
    for t in range(num_trees):
        key = tree_key(seed, first_tree + t)
        counts = bootstrap_counts(key, n)
        nn = _grow(Xt, order, list_of, y, counts, mtry, min_node_size,
                   key, feat, thr, left, right, value)
        for k in range(nn):
            feat_all[pos + k] = feat[k]
            thr_all[pos + k] = thr[k] if feat[k] != LEAF else 0.0
            left_all[pos + k] = left[k] if feat[k] != LEAF else -1
            right_all[pos + k] = right[k] if feat[k] != LEAF else -1
            value_all[pos + k] = value[k]
        for i in range(n):
            inbag[t, i] = counts[i]
            if counts[i] == 0:
                oob[t, i] = predict_tree(feat, thr, left, right, value, X[i])
            else:
                oob[t, i] = np.nan
        pos += nn
        offsets[t + 1] = pos
    return (feat_all[:pos].copy(), thr_all[:pos].copy(), left_all[:pos].copy(),
            right_all[:pos].copy(), value_all[:pos].copy(), offsets, inbag, oob)


@njit(cache=True, nogil=True)
def predict_forest(feat, thr, left, right, value, offsets, X):
    """Per-tree predictions, shape (num_trees, rows)."""
    num_trees = offsets.shape[0] - 1
    out = np.empty((num_trees, X.shape[0]))
    for t in range(num_trees):
        o = offsets[t]
        e = offsets[t + 1]
        f = feat[o:e]
        th = thr[o:e]
        lf = left[o:e]
        rt = right[o:e]
        v = value[o:e]
        for i in range(X.shape[0]):
            out[t, i] = predict_tree(f, th, lf, rt, v, X[i])
    return out


def presort(X):
    """Sorted row lists for every column with more than two distinct values.

    Returns ``(order, list_of)``: ``order[k]`` is the stable sort of the rows
    by the k-th such column and ``list_of[f]`` is ``k + 1`` for those columns,
    ``0`` for two-valued columns and ``-1`` for constant ones.
    """
    n, p = X.shape
    list_of = np.full(p, -1, dtype=np.int64)
    wide = []
    for f in range(p):
        d = len(np.unique(X[:, f]))
        if d > 2:
            wide.append(f)
            list_of[f] = len(wide)
        elif d == 2:
            list_of[f] = 0
    if wide:
        order = np.ascontiguousarray(np.argsort(X[:, wide], axis=0, kind="stable").T.astype(np.int32))
    else:
        order = np.empty((0, n), dtype=np.int32)
    return order, list_of
