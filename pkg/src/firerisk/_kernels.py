"""Compiled inner loops: CART growth, batch traversal and path-dependent TreeSHAP.

Trees are flat arrays in preorder (node 0 is the root). Leaves have
``left == right == -1`` and ``feature == -1``.
"""

import numpy as np
from numba import njit

# ---------------------------------------------------------------------------
# CART growth


@njit(cache=True, nogil=True)
def _weighted_gini(n, pos):
    # n * gini(node); 2*pos*neg/n is exact for equal counts, so ties compare exactly
    if n == 0:
        return 0.0
    return 2.0 * pos * (n - pos) / n


@njit(cache=True, nogil=True)
def build_tree(X, y, rows, max_depth, min_leaf, mtry, uniforms):
    """Grow one tree on ``X[rows]``. ``uniforms`` supplies the feature draws.

    Returns (left, right, feature, threshold, value, cover, n_uniforms_used).
    """
    n_rows = rows.shape[0]
    p = X.shape[1]
    cap = 2 * n_rows + 1
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    value = np.zeros(cap, np.float64)
    cover = np.zeros(cap, np.int64)

    idx = rows.copy()
    buf = np.empty(n_rows, np.int64)
    perm = np.arange(p)
    svals = np.empty(n_rows, np.float64)
    slabs = np.empty(n_rows, np.int64)

    # stack of (start, end, depth, parent, is_left)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_parent = np.empty(cap, np.int64)
    st_isleft = np.empty(cap, np.int64)
    sp = 0
    st_start[0] = 0
    st_end[0] = n_rows
    st_depth[0] = 0
    st_parent[0] = -1
    st_isleft[0] = 0
    sp = 1

    n_nodes = 0
    u = 0
    while sp > 0:
        sp -= 1
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        parent = st_parent[sp]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if st_isleft[sp] == 1:
                left[parent] = node
            else:
                right[parent] = node

        n = end - start
        pos = 0
        for i in range(start, end):
            pos += y[idx[i]]
        cover[node] = n
        value[node] = pos / n

        if pos == 0 or pos == n or depth >= max_depth or n < 2 * min_leaf:
            continue

        # partial Fisher-Yates: first mtry entries of perm become the draw
        for k in range(p):
            perm[k] = k
        for k in range(mtry):
            j = k + int(uniforms[u] * (p - k))
            u += 1
            if j >= p:
                j = p - 1
            tmp = perm[k]
            perm[k] = perm[j]
            perm[j] = tmp

        parent_score = _weighted_gini(n, pos)
        limit = parent_score - 1e-12 * max(1.0, parent_score)
        best_f = -1
        best_thr = 0.0
        best_score = 0.0
        for k in range(mtry):
            f = perm[k]
            for i in range(n):
                svals[i] = X[idx[start + i], f]
            order = np.argsort(svals[:n], kind="mergesort")
            for i in range(n):
                slabs[i] = y[idx[start + order[i]]]
            ln = 0
            lp = 0
            for i in range(n - 1):
                ln += 1
                lp += slabs[i]
                a = svals[order[i]]
                b = svals[order[i + 1]]
                if a == b:
                    continue
                if ln < min_leaf or n - ln < min_leaf:
                    continue
                score = _weighted_gini(ln, lp) + _weighted_gini(n - ln, pos - lp)
                if score >= limit:
                    continue
                thr = 0.5 * (a + b)
                if thr >= b or thr < a:
                    thr = a
                if (
                    best_f < 0
                    or score < best_score
                    or (score == best_score and (f < best_f or (f == best_f and thr < best_thr)))
                ):
                    best_f = f
                    best_thr = thr
                    best_score = score

        if best_f < 0:
            continue

        feature[node] = best_f
        threshold[node] = best_thr
        # stable partition of idx[start:end]
        nl = 0
        for i in range(start, end):
            if X[idx[i], best_f] <= best_thr:
                buf[nl] = idx[i]
                nl += 1
        nr = nl
        for i in range(start, end):
            if X[idx[i], best_f] > best_thr:
                buf[nr] = idx[i]
                nr += 1
        for i in range(n):
            idx[start + i] = buf[i]

        # push right first so the left subtree is numbered first (preorder)
        st_start[sp] = start + nl
        st_end[sp] = end
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_isleft[sp] = 0
        sp += 1
        st_start[sp] = start
        st_end[sp] = start + nl
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_isleft[sp] = 1
        sp += 1

    return (
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        value[:n_nodes].copy(),
        cover[:n_nodes].copy(),
        u,
    )


# ---------------------------------------------------------------------------
# prediction


@njit(cache=True, nogil=True)
def predict_tree(left, right, feature, threshold, value, X):
    out = np.empty(X.shape[0], np.float64)
    for r in range(X.shape[0]):
        node = 0
        while left[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


# ---------------------------------------------------------------------------
# TreeSHAP (path-dependent, cover weighted)
#
# Each recursion level owns one row of the path buffers; children copy the
# parent's row and extend it. Depth-first processing guarantees a parent's
# row is intact until both of its subtrees are done.


@njit(cache=True, nogil=True)
def _extend(pd, pz, po, pw, row, length, zero_frac, one_frac, feat):
    pd[row, length] = feat
    pz[row, length] = zero_frac
    po[row, length] = one_frac
    pw[row, length] = 1.0 if length == 0 else 0.0
    for i in range(length - 1, -1, -1):
        pw[row, i + 1] += one_frac * pw[row, i] * (i + 1) / (length + 1)
        pw[row, i] = zero_frac * pw[row, i] * (length - i) / (length + 1)
    return length + 1


@njit(cache=True, nogil=True)
def _unwind(pd, pz, po, pw, row, length, k):
    # remove element k from a path of `length` elements
    last = length - 1
    one = po[row, k]
    zero = pz[row, k]
    nxt = pw[row, last]
    for j in range(last - 1, -1, -1):
        if one != 0.0:
            t = pw[row, j]
            pw[row, j] = nxt * (last + 1) / ((j + 1) * one)
            nxt = t - pw[row, j] * zero * (last - j) / (last + 1)
        else:
            pw[row, j] = pw[row, j] * (last + 1) / (zero * (last - j))
    for j in range(k, last):
        pd[row, j] = pd[row, j + 1]
        pz[row, j] = pz[row, j + 1]
        po[row, j] = po[row, j + 1]
    return length - 1


@njit(cache=True, nogil=True)
def _unwound_sum(pz, po, pw, row, length, k):
    # total weight of the path with element k removed, without mutating it
    last = length - 1
    one = po[row, k]
    zero = pz[row, k]
    nxt = pw[row, last]
    total = 0.0
    if one != 0.0:
        for j in range(last - 1, -1, -1):
            t = nxt / ((j + 1) * one)
            total += t
            nxt = pw[row, j] - t * zero * (last - j)
    else:
        for j in range(last - 1, -1, -1):
            total += pw[row, j] / (zero * (last - j))
    return total * (last + 1)


@njit(cache=True, nogil=True)
def max_depth_of(left, right):
    n = left.shape[0]
    depth = np.zeros(n, np.int64)
    best = 0
    for i in range(n):  # preorder: parents precede children
        if left[i] >= 0:
            depth[left[i]] = depth[i] + 1
            depth[right[i]] = depth[i] + 1
            if depth[i] + 1 > best:
                best = depth[i] + 1
    return best


@njit(cache=True, nogil=True)
def tree_shap_row(left, right, feature, threshold, value, cover, x, phi, max_depth):
    """Add the Shapley values of one tree at ``x`` into ``phi``."""
    levels = max_depth + 2
    pd = np.empty((levels + 1, levels + 1), np.int64)
    pz = np.empty((levels + 1, levels + 1), np.float64)
    po = np.empty((levels + 1, levels + 1), np.float64)
    pw = np.empty((levels + 1, levels + 1), np.float64)
    lengths = np.zeros(levels + 1, np.int64)

    n_nodes = left.shape[0]
    s_node = np.empty(n_nodes, np.int64)
    s_level = np.empty(n_nodes, np.int64)
    s_zero = np.empty(n_nodes, np.float64)
    s_one = np.empty(n_nodes, np.float64)
    s_feat = np.empty(n_nodes, np.int64)
    sp = 0
    s_node[0] = 0
    s_level[0] = 0
    s_zero[0] = 1.0
    s_one[0] = 1.0
    s_feat[0] = -1
    sp = 1

    while sp > 0:
        sp -= 1
        node = s_node[sp]
        lvl = s_level[sp]
        # copy parent path (row lvl-1) into row lvl
        length = 0
        if lvl > 0:
            length = lengths[lvl - 1]
            for i in range(length):
                pd[lvl, i] = pd[lvl - 1, i]
                pz[lvl, i] = pz[lvl - 1, i]
                po[lvl, i] = po[lvl - 1, i]
                pw[lvl, i] = pw[lvl - 1, i]
        length = _extend(pd, pz, po, pw, lvl, length, s_zero[sp], s_one[sp], s_feat[sp])

        if left[node] < 0:
            v = value[node]
            for i in range(1, length):
                w = _unwound_sum(pz, po, pw, lvl, length, i)
                phi[pd[lvl, i]] += w * (po[lvl, i] - pz[lvl, i]) * v
            lengths[lvl] = length
            continue

        f = feature[node]
        if x[f] <= threshold[node]:
            hot = left[node]
            cold = right[node]
        else:
            hot = right[node]
            cold = left[node]
        inc_zero = 1.0
        inc_one = 1.0
        for k in range(1, length):
            if pd[lvl, k] == f:
                inc_zero = pz[lvl, k]
                inc_one = po[lvl, k]
                length = _unwind(pd, pz, po, pw, lvl, length, k)
                break
        lengths[lvl] = length

        c = cover[node]
        s_node[sp] = cold
        s_level[sp] = lvl + 1
        s_zero[sp] = inc_zero * cover[cold] / c
        s_one[sp] = 0.0
        s_feat[sp] = f
        sp += 1
        s_node[sp] = hot
        s_level[sp] = lvl + 1
        s_zero[sp] = inc_zero * cover[hot] / c
        s_one[sp] = inc_one
        s_feat[sp] = f
        sp += 1


@njit(cache=True, nogil=True)
def tree_shap_batch(left, right, feature, threshold, value, cover, X, max_depth):
    phi = np.zeros(X.shape, np.float64)
    for r in range(X.shape[0]):
        tree_shap_row(left, right, feature, threshold, value, cover, X[r], phi[r], max_depth)
    return phi


@njit(cache=True, nogil=True)
def expected_value(left, right, value, cover):
    """Cover-weighted mean of leaf values."""
    n = left.shape[0]
    weight = np.zeros(n, np.float64)
    weight[0] = 1.0
    total = 0.0
    for i in range(n):
        if left[i] >= 0:
            weight[left[i]] = weight[i] * cover[left[i]] / cover[i]
            weight[right[i]] = weight[i] * cover[right[i]] / cover[i]
        else:
            total += weight[i] * value[i]
    return total
