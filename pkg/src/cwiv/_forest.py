"""Honest forest internals: numba kernels and the fitted-model container.

Each tree draws a subsample without replacement and splits it into a
split-half (chooses thresholds) and an estimate-half (supplies leaf values),
so leaf estimates never reuse the data that selected the splits.  Split
search maximizes n_left * n_right * (delta_left - delta_right)^2 over
midpoints of consecutive distinct covariate values, where delta is the
difference of treatment-arm means of the response; a candidate is admissible
only if every child keeps at least ``min_leaf`` observations of each arm in
*both* halves.  When no admissible candidate exists the node closes as a
leaf.

For a single covariate the fitted forest is a step function of x; it is
collapsed once at fit time into sorted breakpoints plus cumulative values so
predictions reduce to a binary search.  Multivariate inputs fall back to
per-tree traversal.

Per-tree randomness comes from a splitmix64 stream seeded for each tree from
the fit-level stream, so forests are bit-reproducible and trees could be
built in parallel without shared state.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _sm64(state):
    state = (state + _SM_GAMMA) & _MASK64
    x = state
    x = ((x ^ (x >> np.uint64(30))) * _SM_M1) & _MASK64
    x = ((x ^ (x >> np.uint64(27))) * _SM_M2) & _MASK64
    x = x ^ (x >> np.uint64(31))
    return state, x


@njit(cache=True)
def _build_forest_1d(
    x_sorted, z_sorted, d_sorted, n_trees, sub_n, half_n, min_leaf, max_depth, seeds,
    feat, thr, left, right, value, n_nodes_out, cap,
):
    """Univariate fast path: one presort per fit, contiguous-range nodes.

    Observations enter as arrays sorted by x; each tree subsamples sorted
    positions, so every node is a pair of contiguous ranges in the tree's
    split-half and estimate-half arrays and split search is a single linear
    scan with an estimate-half pointer walked in tandem.
    """
    n = x_sorted.shape[0]
    est_n = sub_n - half_n
    idx = np.arange(n)
    memb = np.zeros(n, np.uint8)
    prev = np.empty(sub_n, np.int64)
    n_prev = 0
    xs = np.empty(half_n, np.float64)
    zs = np.empty(half_n, np.int8)
    ds = np.empty(half_n, np.float64)
    xe = np.empty(est_n, np.float64)
    ze = np.empty(est_n, np.int8)
    de = np.empty(est_n, np.float64)
    stack = np.empty((cap + 2, 6), np.int64)

    for t in range(n_trees):
        state = seeds[t]
        for i in range(n_prev):
            memb[prev[i]] = 0
        for i in range(sub_n):
            state, r = _sm64(state)
            j = i + np.int64(r % np.uint64(n - i))
            tmp = idx[i]
            idx[i] = idx[j]
            idx[j] = tmp
            v = idx[i]
            prev[i] = v
            memb[v] = 1 if i < half_n else 2
        n_prev = sub_n
        ns = 0
        ne = 0
        for pos in range(n):
            m = memb[pos]
            if m == 1:
                xs[ns] = x_sorted[pos]
                zs[ns] = z_sorted[pos]
                ds[ns] = d_sorted[pos]
                ns += 1
            elif m == 2:
                xe[ne] = x_sorted[pos]
                ze[ne] = z_sorted[pos]
                de[ne] = d_sorted[pos]
                ne += 1

        base = t * cap
        n_nodes = 1
        stack[0, 0] = 0
        stack[0, 1] = half_n
        stack[0, 2] = 0
        stack[0, 3] = est_n
        stack[0, 4] = 0
        stack[0, 5] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            s_lo = stack[sp, 0]
            s_hi = stack[sp, 1]
            e_lo = stack[sp, 2]
            e_hi = stack[sp, 3]
            depth = stack[sp, 4]
            node = stack[sp, 5]
            m_s = s_hi - s_lo

            n1 = 0
            n0 = 0
            sum1 = 0.0
            sum0 = 0.0
            for i in range(s_lo, s_hi):
                if zs[i] == 1:
                    n1 += 1
                    sum1 += ds[i]
                else:
                    n0 += 1
                    sum0 += ds[i]
            e1 = 0
            e0 = 0
            se1 = 0.0
            se0 = 0.0
            for i in range(e_lo, e_hi):
                if ze[i] == 1:
                    e1 += 1
                    se1 += de[i]
                else:
                    e0 += 1
                    se0 += de[i]

            best_crit = 0.0
            best_i = -1
            best_thr = 0.0
            best_e = e_lo
            if (
                m_s >= 2
                and n1 >= 2 * min_leaf
                and n0 >= 2 * min_leaf
                and e1 >= 2 * min_leaf
                and e0 >= 2 * min_leaf
                and (max_depth < 0 or depth < max_depth)
                and n_nodes + 2 <= cap
            ):
                cl1 = 0
                cl0 = 0
                sl1 = 0.0
                sl0 = 0.0
                el1 = 0
                el0 = 0
                je = e_lo
                for i in range(s_lo, s_hi - 1):
                    if zs[i] == 1:
                        cl1 += 1
                        sl1 += ds[i]
                    else:
                        cl0 += 1
                        sl0 += ds[i]
                    xi = xs[i]
                    xn = xs[i + 1]
                    if xn <= xi:
                        continue
                    cand = 0.5 * (xi + xn)
                    while je < e_hi and xe[je] <= cand:
                        if ze[je] == 1:
                            el1 += 1
                        else:
                            el0 += 1
                        je += 1
                    cr1 = n1 - cl1
                    cr0 = n0 - cl0
                    if cl1 < min_leaf or cl0 < min_leaf or cr1 < min_leaf or cr0 < min_leaf:
                        continue
                    er1 = e1 - el1
                    er0 = e0 - el0
                    if el1 < min_leaf or el0 < min_leaf or er1 < min_leaf or er0 < min_leaf:
                        continue
                    d_left = sl1 / cl1 - sl0 / cl0
                    d_right = (sum1 - sl1) / cr1 - (sum0 - sl0) / cr0
                    gap = d_left - d_right
                    crit = (i - s_lo + 1.0) * (s_hi - i - 1.0) * gap * gap
                    if crit > best_crit:
                        best_crit = crit
                        best_i = i
                        best_thr = cand
                        best_e = je

            if best_i < 0:
                feat[base + node] = -1
                thr[base + node] = 0.0
                left[base + node] = -1
                right[base + node] = -1
                if e1 > 0 and e0 > 0:
                    value[base + node] = se1 / e1 - se0 / e0
                else:
                    value[base + node] = 0.0
                continue

            left_id = n_nodes
            right_id = n_nodes + 1
            n_nodes += 2
            feat[base + node] = 0
            thr[base + node] = best_thr
            left[base + node] = left_id
            right[base + node] = right_id
            value[base + node] = 0.0
            stack[sp, 0] = s_lo
            stack[sp, 1] = best_i + 1
            stack[sp, 2] = e_lo
            stack[sp, 3] = best_e
            stack[sp, 4] = depth + 1
            stack[sp, 5] = left_id
            sp += 1
            stack[sp, 0] = best_i + 1
            stack[sp, 1] = s_hi
            stack[sp, 2] = best_e
            stack[sp, 3] = e_hi
            stack[sp, 4] = depth + 1
            stack[sp, 5] = right_id
            sp += 1
        n_nodes_out[t] = n_nodes


@njit(cache=True)
def _build_forest(
    x, z, d, n_trees, sub_n, half_n, min_leaf, max_depth, mtry, seeds,
    feat, thr, left, right, value, n_nodes_out, cap,
):
    n, p = x.shape
    est_n = sub_n - half_n
    idx = np.empty(n, np.int64)
    idx_s = np.empty(half_n, np.int64)
    idx_e = np.empty(est_n, np.int64)
    scratch = np.empty(max(half_n, est_n), np.int64)
    xs = np.empty(half_n, np.float64)
    xe = np.empty(est_n, np.float64)
    zs = np.empty(half_n, np.int8)
    ds = np.empty(half_n, np.float64)
    ze = np.empty(est_n, np.int8)
    feats = np.empty(p, np.int64)
    stack = np.empty((cap + 2, 6), np.int64)

    for t in range(n_trees):
        base = t * cap
        state = seeds[t]
        for i in range(n):
            idx[i] = i
        for i in range(sub_n):
            state, r = _sm64(state)
            j = i + np.int64(r % np.uint64(n - i))
            tmp = idx[i]
            idx[i] = idx[j]
            idx[j] = tmp
        for i in range(half_n):
            idx_s[i] = idx[i]
        for i in range(est_n):
            idx_e[i] = idx[half_n + i]

        n_nodes = 1
        stack[0, 0] = 0
        stack[0, 1] = half_n
        stack[0, 2] = 0
        stack[0, 3] = est_n
        stack[0, 4] = 0
        stack[0, 5] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            s_lo = stack[sp, 0]
            s_hi = stack[sp, 1]
            e_lo = stack[sp, 2]
            e_hi = stack[sp, 3]
            depth = stack[sp, 4]
            node = stack[sp, 5]
            m_s = s_hi - s_lo
            m_e = e_hi - e_lo

            # Arm totals on the split half.
            n1 = 0
            n0 = 0
            sum1 = 0.0
            sum0 = 0.0
            for i in range(s_lo, s_hi):
                v = idx_s[i]
                if z[v] == 1:
                    n1 += 1
                    sum1 += d[v]
                else:
                    n0 += 1
                    sum0 += d[v]
            e1 = 0
            e0 = 0
            for i in range(e_lo, e_hi):
                if z[idx_e[i]] == 1:
                    e1 += 1
                else:
                    e0 += 1

            best_crit = 0.0
            best_feat = -1
            best_thr = 0.0
            splittable = (
                m_s >= 2
                and n1 >= 2 * min_leaf
                and n0 >= 2 * min_leaf
                and e1 >= 2 * min_leaf
                and e0 >= 2 * min_leaf
                and (max_depth < 0 or depth < max_depth)
                and n_nodes + 2 <= cap
            )
            if splittable:
                n_try = p if mtry <= 0 or mtry >= p else mtry
                for f in range(p):
                    feats[f] = f
                if n_try < p:
                    for i in range(n_try):
                        state, r = _sm64(state)
                        j = i + np.int64(r % np.uint64(p - i))
                        tmpf = feats[i]
                        feats[i] = feats[j]
                        feats[j] = tmpf
                for fi in range(n_try):
                    f = feats[fi]
                    for i in range(m_s):
                        xs[i] = x[idx_s[s_lo + i], f]
                    order_s = np.argsort(xs[:m_s])
                    for i in range(m_s):
                        v = idx_s[s_lo + order_s[i]]
                        zs[i] = z[v]
                        ds[i] = d[v]
                    for i in range(m_e):
                        xe[i] = x[idx_e[e_lo + i], f]
                    order_e = np.argsort(xe[:m_e])
                    for i in range(m_e):
                        ze[i] = z[idx_e[e_lo + order_e[i]]]
                    xe_s = xe[:m_e][order_e]
                    xs_s = xs[:m_s][order_s]

                    cl1 = 0
                    cl0 = 0
                    sl1 = 0.0
                    sl0 = 0.0
                    el1 = 0
                    el0 = 0
                    je = 0
                    for i in range(m_s - 1):
                        if zs[i] == 1:
                            cl1 += 1
                            sl1 += ds[i]
                        else:
                            cl0 += 1
                            sl0 += ds[i]
                        xi = xs_s[i]
                        xn = xs_s[i + 1]
                        if xn <= xi:
                            continue
                        cand = 0.5 * (xi + xn)
                        while je < m_e and xe_s[je] <= cand:
                            if ze[je] == 1:
                                el1 += 1
                            else:
                                el0 += 1
                            je += 1
                        cr1 = n1 - cl1
                        cr0 = n0 - cl0
                        if cl1 < min_leaf or cl0 < min_leaf or cr1 < min_leaf or cr0 < min_leaf:
                            continue
                        er1 = e1 - el1
                        er0 = e0 - el0
                        if el1 < min_leaf or el0 < min_leaf or er1 < min_leaf or er0 < min_leaf:
                            continue
                        d_left = sl1 / cl1 - sl0 / cl0
                        d_right = (sum1 - sl1) / cr1 - (sum0 - sl0) / cr0
                        gap = d_left - d_right
                        crit = (i + 1.0) * (m_s - i - 1.0) * gap * gap
                        if crit > best_crit:
                            best_crit = crit
                            best_feat = f
                            best_thr = cand

            if best_feat < 0:
                se1 = 0.0
                se0 = 0.0
                ce1 = 0
                ce0 = 0
                for i in range(e_lo, e_hi):
                    v = idx_e[i]
                    if z[v] == 1:
                        ce1 += 1
                        se1 += d[v]
                    else:
                        ce0 += 1
                        se0 += d[v]
                feat[base + node] = -1
                thr[base + node] = 0.0
                left[base + node] = -1
                right[base + node] = -1
                if ce1 > 0 and ce0 > 0:
                    value[base + node] = se1 / ce1 - se0 / ce0
                else:
                    value[base + node] = 0.0
                continue

            # Stable partition of both halves around the chosen threshold.
            nl = 0
            nr = 0
            for i in range(s_lo, s_hi):
                v = idx_s[i]
                if x[v, best_feat] <= best_thr:
                    idx_s[s_lo + nl] = v
                    nl += 1
                else:
                    scratch[nr] = v
                    nr += 1
            for i in range(nr):
                idx_s[s_lo + nl + i] = scratch[i]
            mid_s = s_lo + nl

            nl_e = 0
            nr_e = 0
            for i in range(e_lo, e_hi):
                v = idx_e[i]
                if x[v, best_feat] <= best_thr:
                    idx_e[e_lo + nl_e] = v
                    nl_e += 1
                else:
                    scratch[nr_e] = v
                    nr_e += 1
            for i in range(nr_e):
                idx_e[e_lo + nl_e + i] = scratch[i]
            mid_e = e_lo + nl_e

            left_id = n_nodes
            right_id = n_nodes + 1
            n_nodes += 2
            feat[base + node] = best_feat
            thr[base + node] = best_thr
            left[base + node] = left_id
            right[base + node] = right_id
            value[base + node] = 0.0

            stack[sp, 0] = s_lo
            stack[sp, 1] = mid_s
            stack[sp, 2] = e_lo
            stack[sp, 3] = mid_e
            stack[sp, 4] = depth + 1
            stack[sp, 5] = left_id
            sp += 1
            stack[sp, 0] = mid_s
            stack[sp, 1] = s_hi
            stack[sp, 2] = mid_e
            stack[sp, 3] = e_hi
            stack[sp, 4] = depth + 1
            stack[sp, 5] = right_id
            sp += 1
        n_nodes_out[t] = n_nodes


@njit(cache=True)
def _collapse_univariate(feat, thr, left, right, value, n_nodes, cap, cut_off, val_off, cuts, vals):
    n_trees = n_nodes.shape[0]
    max_nodes = cap
    stack = np.empty(max_nodes, np.int64)
    for t in range(n_trees):
        base = t * cap
        cpos = cut_off[t]
        vpos = val_off[t]
        node = 0
        sp = 0
        while True:
            while feat[base + node] >= 0:
                stack[sp] = node
                sp += 1
                node = left[base + node]
            vals[vpos] = value[base + node]
            vpos += 1
            if sp == 0:
                break
            sp -= 1
            parent = stack[sp]
            cuts[cpos] = thr[base + parent]
            cpos += 1
            node = right[base + parent]


@njit(cache=True)
def _predict_traverse(feat, thr, left, right, value, n_nodes, cap, xq):
    n_trees = n_nodes.shape[0]
    nq = xq.shape[0]
    out = np.zeros(nq, np.float64)
    for q in range(nq):
        acc = 0.0
        for t in range(n_trees):
            base = t * cap
            node = 0
            while feat[base + node] >= 0:
                if xq[q, feat[base + node]] <= thr[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[q] = acc / n_trees
    return out


class FittedForest:
    """Fitted honest forest; immutable and safe to share across workers."""

    def __init__(self, feat, thr, left, right, value, n_nodes, cap, n_features, learner_id):
        self._feat = feat
        self._thr = thr
        self._left = left
        self._right = right
        self._value = value
        self._n_nodes = n_nodes
        self._cap = cap
        self.n_features = n_features
        self.n_trees = n_nodes.shape[0]
        self.learner_id = learner_id
        self._breaks = None
        self._levels = None
        if n_features == 1:
            self._collapse()

    def _collapse(self):
        leaves = (self._n_nodes + 1) // 2
        val_off = np.concatenate(([0], np.cumsum(leaves)))[:-1].astype(np.int64)
        cut_off = np.concatenate(([0], np.cumsum(leaves - 1)))[:-1].astype(np.int64)
        cuts = np.empty(int((leaves - 1).sum()), np.float64)
        vals = np.empty(int(leaves.sum()), np.float64)
        _collapse_univariate(
            self._feat, self._thr, self._left, self._right, self._value,
            self._n_nodes, self._cap, cut_off, val_off, cuts, vals,
        )
        base = float(vals[val_off].sum())
        diffs = np.diff(vals)
        boundary = val_off[1:] - 1
        deltas = np.delete(diffs, boundary) if boundary.size else diffs
        order = np.argsort(cuts, kind="stable")
        self._breaks = cuts[order]
        self._levels = np.concatenate(([base], base + np.cumsum(deltas[order]))) / self.n_trees

    def predict(self, x_new) -> np.ndarray:
        x_new = np.asarray(x_new, dtype=float)
        if x_new.ndim == 1:
            x2 = x_new[:, None]
        else:
            x2 = x_new
        if x2.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} feature(s), got {x2.shape[1]}")
        if self._breaks is not None:
            pos = np.searchsorted(self._breaks, x2[:, 0], side="left")
            return self._levels[pos]
        return _predict_traverse(
            self._feat, self._thr, self._left, self._right, self._value,
            self._n_nodes, self._cap, np.ascontiguousarray(x2),
        )


def build_forest(
    x: np.ndarray,
    z: np.ndarray,
    d: np.ndarray,
    n_trees: int,
    subsample_fraction: float,
    min_leaf_per_arm: int,
    max_depth: int,
    mtry: int,
    seeds: np.ndarray,
    learner_id: str,
) -> FittedForest:
    x2 = np.ascontiguousarray(np.atleast_2d(x.T).T if x.ndim == 1 else x, dtype=np.float64)
    if x2.ndim != 2:
        raise ValueError("covariates must form an (n, p) matrix")
    n, p = x2.shape
    z8 = np.ascontiguousarray(z, dtype=np.int8)
    d64 = np.ascontiguousarray(d, dtype=np.float64)
    sub_n = max(2, min(n, int(round(subsample_fraction * n))))
    half_n = max(1, sub_n // 2)
    cap = 4 * (sub_n // max(2 * min_leaf_per_arm, 2) + 2)
    feat = np.empty(n_trees * cap, np.int64)
    thr = np.empty(n_trees * cap, np.float64)
    left = np.empty(n_trees * cap, np.int64)
    right = np.empty(n_trees * cap, np.int64)
    value = np.empty(n_trees * cap, np.float64)
    n_nodes = np.empty(n_trees, np.int64)
    if p == 1:
        order = np.argsort(x2[:, 0], kind="stable")
        _build_forest_1d(
            np.ascontiguousarray(x2[order, 0]),
            np.ascontiguousarray(z8[order]),
            np.ascontiguousarray(d64[order]),
            n_trees, sub_n, half_n, min_leaf_per_arm, max_depth,
            seeds.astype(np.uint64), feat, thr, left, right, value, n_nodes, cap,
        )
    else:
        _build_forest(
            x2, z8, d64, n_trees, sub_n, half_n, min_leaf_per_arm, max_depth, mtry,
            seeds.astype(np.uint64), feat, thr, left, right, value, n_nodes, cap,
        )
    return FittedForest(feat, thr, left, right, value, n_nodes, cap, p, learner_id)
