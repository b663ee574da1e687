"""Hot numeric kernels.

Every kernel exists in two forms: an explicit-loop version compiled with
numba (``*_nb``) and a vectorized numpy version (``*_np``). The public
dispatchers pick one at import time; set ``EVCREDIT_DISABLE_NUMBA=1`` to force
the numpy path. Both forms stay importable so tests and the benchmark can
compare them directly.

Coalitions are bitmasks over agent positions; ``values[mask]`` is the value of
the group whose members are the set bits of ``mask``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

DISABLE_ENV = "EVCREDIT_DISABLE_NUMBA"
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get(DISABLE_ENV, "").strip().lower() not in (
    "1",
    "true",
    "yes",
    "on",
)

# dense image tables in the compiled cluster search are sized 2**k
MAX_DENSE_K = 20
MAX_BITMASK_K = 62


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def popcounts(n: int) -> np.ndarray:
    masks = np.arange(1 << n, dtype=np.int64)
    pc = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        pc += (masks >> i) & 1
    return pc


@_jit
def _popcount(x):
    s = 0
    while x:
        x &= x - 1
        s += 1
    return s


# ---------------------------------------------------------------------------
# Shapley sums over a full bitmask table


@_jit
def _shapley_nb(values, n, weights):
    out = np.zeros(n)
    for mask in range(1 << n):
        w = weights[_popcount(mask)]
        vm = values[mask]
        for i in range(n):
            bit = 1 << i
            if (mask & bit) == 0:
                out[i] += w * (values[mask | bit] - vm)
    return out


def _shapley_np(values, n, weights):
    masks = np.arange(1 << n, dtype=np.int64)
    pc = popcounts(n)
    out = np.empty(n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        out[i] = np.dot(weights[pc[without]], values[without | bit] - values[without])
    return out


def shapley_table(values: np.ndarray, n: int, weights: np.ndarray) -> np.ndarray:
    """Sum ``weights[|C|] * (v(C+i) - v(C))`` over all ``C`` not containing ``i``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if USE_NUMBA:
        return _shapley_nb(values, n, weights)
    return _shapley_np(values, n, weights)


# ---------------------------------------------------------------------------
# Size-stratified sums over a bitmask table


@_jit
def _table_strata_nb(values, n, size_ok):
    incl = np.zeros((n, n + 1))
    excl = np.zeros((n, n + 1))
    n_incl = np.zeros((n, n + 1), np.int64)
    n_excl = np.zeros((n, n + 1), np.int64)
    for mask in range(1 << n):
        s = _popcount(mask)
        if not size_ok[s]:
            continue
        v = values[mask]
        for i in range(n):
            if (mask >> i) & 1:
                incl[i, s] += v
                n_incl[i, s] += 1
            else:
                excl[i, s] += v
                n_excl[i, s] += 1
    return incl, n_incl, excl, n_excl


def _table_strata_np(values, n, size_ok):
    masks = np.arange(1 << n, dtype=np.int64)
    pc = popcounts(n)
    keep = size_ok[pc]
    masks, pc, vals = masks[keep], pc[keep], values[keep]
    incl = np.zeros((n, n + 1))
    excl = np.zeros((n, n + 1))
    n_incl = np.zeros((n, n + 1), np.int64)
    n_excl = np.zeros((n, n + 1), np.int64)
    for i in range(n):
        has = ((masks >> i) & 1).astype(bool)
        incl[i] = np.bincount(pc[has], weights=vals[has], minlength=n + 1)
        excl[i] = np.bincount(pc[~has], weights=vals[~has], minlength=n + 1)
        n_incl[i] = np.bincount(pc[has], minlength=n + 1)
        n_excl[i] = np.bincount(pc[~has], minlength=n + 1)
    return incl, n_incl, excl, n_excl


def table_strata(values: np.ndarray, n: int, size_ok: np.ndarray):
    """Per agent and group size: sum and count of values with and without the agent."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    size_ok = np.ascontiguousarray(size_ok, dtype=np.bool_)
    if USE_NUMBA:
        return _table_strata_nb(values, n, size_ok)
    return _table_strata_np(values, n, size_ok)


# ---------------------------------------------------------------------------
# Size-stratified sums over a list of observed groups (CSR membership)


@_jit
def _group_strata_nb(ptr, idx, sizes, scores, n_agents, n_sizes):
    in_sum = np.zeros((n_agents, n_sizes))
    in_sq = np.zeros((n_agents, n_sizes))
    in_cnt = np.zeros((n_agents, n_sizes), np.int64)
    tot_sum = np.zeros(n_sizes)
    tot_sq = np.zeros(n_sizes)
    tot_cnt = np.zeros(n_sizes, np.int64)
    for g in range(ptr.shape[0] - 1):
        s = sizes[g]
        v = scores[g]
        tot_sum[s] += v
        tot_sq[s] += v * v
        tot_cnt[s] += 1
        for p in range(ptr[g], ptr[g + 1]):
            a = idx[p]
            in_sum[a, s] += v
            in_sq[a, s] += v * v
            in_cnt[a, s] += 1
    return in_sum, in_sq, in_cnt, tot_sum, tot_sq, tot_cnt


def _group_strata_np(ptr, idx, sizes, scores, n_agents, n_sizes):
    n_groups = ptr.shape[0] - 1
    rows = np.repeat(np.arange(n_groups), np.diff(ptr))
    member = np.zeros((n_groups, n_agents))
    member[rows, idx] = 1.0
    onehot = np.zeros((n_groups, n_sizes))
    onehot[np.arange(n_groups), sizes] = 1.0
    in_sum = member.T @ (onehot * scores[:, None])
    in_sq = member.T @ (onehot * (scores**2)[:, None])
    in_cnt = np.rint(member.T @ onehot).astype(np.int64)
    tot_sum = onehot.T @ scores
    tot_sq = onehot.T @ scores**2
    tot_cnt = np.rint(onehot.sum(axis=0)).astype(np.int64)
    return in_sum, in_sq, in_cnt, tot_sum, tot_sq, tot_cnt


def group_strata(ptr, idx, sizes, scores, n_agents: int, n_sizes: int):
    """Per agent and size: sum, sum of squares and count of group scores that include it.

    Also returns the same three totals over all groups of each size; the
    excluding side is the total minus the including side. ``idx`` must list
    each member at most once per group.
    """
    args = (
        np.ascontiguousarray(ptr, dtype=np.int64),
        np.ascontiguousarray(idx, dtype=np.int64),
        np.ascontiguousarray(sizes, dtype=np.int64),
        np.ascontiguousarray(scores, dtype=np.float64),
        int(n_agents),
        int(n_sizes),
    )
    if USE_NUMBA:
        return _group_strata_nb(*args)
    return _group_strata_np(*args)


# ---------------------------------------------------------------------------
# EV-Clustering objective
#
# An observation's image is the bitmask of clusters its members occupy. The
# clustered value of an image is the mean score of observations with that
# image; cluster EVs are stratified by image size. Agents inherit their
# cluster's EV. The objective is the variance of agent EVs minus
# penalty * (fraction of agents off their init cluster). Validity is
# lexicographically first: fewer agents in inestimable clusters always wins.


@_jit
def _finish_nb(counts, S_in, N_in, S_tot, N_tot, n_agents, dev, penalty):
    k = counts.shape[0]
    ev = np.zeros(k)
    ok = np.zeros(k, np.bool_)
    nonempty = 0
    for c in range(k):
        if counts[c] > 0:
            nonempty += 1
    if nonempty == 1:
        for c in range(k):
            ok[c] = True
    else:
        for c in range(k):
            tot = 0.0
            used = 0
            for s in range(1, k + 1):
                ni = N_in[c, s]
                ne = N_tot[s] - ni
                if ni > 0 and ne > 0:
                    tot += S_in[c, s] / ni - (S_tot[s] - S_in[c, s]) / ne
                    used += 1
            if used > 0:
                ev[c] = tot / used
                ok[c] = True
    invalid = 0
    weight = 0
    mean = 0.0
    for c in range(k):
        if counts[c] > 0:
            if ok[c]:
                weight += counts[c]
                mean += counts[c] * ev[c]
            else:
                invalid += counts[c]
    var = 0.0
    if weight > 0:
        mean /= weight
        for c in range(k):
            if counts[c] > 0 and ok[c]:
                d = ev[c] - mean
                var += counts[c] * d * d
        var /= weight
    return invalid, var - penalty * dev / n_agents, var


@_jit
def _image_update(code, dsum, dcnt, isum, icnt, S_in, N_in, S_tot, N_tot, k):
    s = _popcount(code)
    if icnt[code] > 0:
        val = isum[code] / icnt[code]
        S_tot[s] -= val
        N_tot[s] -= 1
        for c in range(k):
            if (code >> c) & 1:
                S_in[c, s] -= val
                N_in[c, s] -= 1
    isum[code] += dsum
    icnt[code] += dcnt
    if icnt[code] == 0:
        isum[code] = 0.0
    else:
        val = isum[code] / icnt[code]
        S_tot[s] += val
        N_tot[s] += 1
        for c in range(k):
            if (code >> c) & 1:
                S_in[c, s] += val
                N_in[c, s] += 1


@_jit
def _rebuild_nb(u, k, ptr, idx, scores, codes, isum, icnt, S_in, N_in, S_tot, N_tot, counts):
    isum[:] = 0.0
    icnt[:] = 0
    S_in[:, :] = 0.0
    N_in[:, :] = 0
    S_tot[:] = 0.0
    N_tot[:] = 0
    counts[:] = 0
    for a in range(u.shape[0]):
        counts[u[a]] += 1
    n_obs = ptr.shape[0] - 1
    for o in range(n_obs):
        code = 0
        for p in range(ptr[o], ptr[o + 1]):
            code |= 1 << u[idx[p]]
        codes[o] = code
        isum[code] += scores[o]
        icnt[code] += 1
    seen = np.zeros(n_obs, np.bool_)
    for o in range(n_obs):
        if seen[o]:
            continue
        code = codes[o]
        for r in range(o, n_obs):
            if codes[r] == code:
                seen[r] = True
        val = isum[code] / icnt[code]
        s = _popcount(code)
        S_tot[s] += val
        N_tot[s] += 1
        for c in range(k):
            if (code >> c) & 1:
                S_in[c, s] += val
                N_in[c, s] += 1


@_jit
def _objective_nb(u, k, ptr, idx, scores, init, penalty):
    n_obs = ptr.shape[0] - 1
    codes = np.zeros(n_obs, np.int64)
    isum = np.zeros(1 << k)
    icnt = np.zeros(1 << k, np.int64)
    S_in = np.zeros((k, k + 1))
    N_in = np.zeros((k, k + 1), np.int64)
    S_tot = np.zeros(k + 1)
    N_tot = np.zeros(k + 1, np.int64)
    counts = np.zeros(k, np.int64)
    _rebuild_nb(u, k, ptr, idx, scores, codes, isum, icnt, S_in, N_in, S_tot, N_tot, counts)
    dev = 0
    if penalty != 0.0:
        for a in range(u.shape[0]):
            if u[a] != init[a]:
                dev += 1
    return _finish_nb(counts, S_in, N_in, S_tot, N_tot, u.shape[0], dev, penalty)


@_jit
def _move_nb(a, q, u, k, ptr, idx, scores, aptr, aidx, codes, isum, icnt, S_in, N_in, S_tot, N_tot, counts):
    counts[u[a]] -= 1
    counts[q] += 1
    u[a] = q
    for p in range(aptr[a], aptr[a + 1]):
        o = aidx[p]
        code = 0
        for r in range(ptr[o], ptr[o + 1]):
            code |= 1 << u[idx[r]]
        old = codes[o]
        if code != old:
            _image_update(old, -scores[o], -1, isum, icnt, S_in, N_in, S_tot, N_tot, k)
            _image_update(code, scores[o], 1, isum, icnt, S_in, N_in, S_tot, N_tot, k)
            codes[o] = code


@_jit
def _better(inv, val, best_inv, best_val, tol):
    if inv != best_inv:
        return inv < best_inv
    return val > best_val + tol * (1.0 + abs(best_val))


@_jit
def _climb_nb(u0, k, ptr, idx, scores, aptr, aidx, init, penalty, max_sweeps, tol):
    u = u0.copy()
    n = u.shape[0]
    n_obs = ptr.shape[0] - 1
    codes = np.zeros(n_obs, np.int64)
    isum = np.zeros(1 << k)
    icnt = np.zeros(1 << k, np.int64)
    S_in = np.zeros((k, k + 1))
    N_in = np.zeros((k, k + 1), np.int64)
    S_tot = np.zeros(k + 1)
    N_tot = np.zeros(k + 1, np.int64)
    counts = np.zeros(k, np.int64)
    use_pen = penalty != 0.0
    sweeps = 0
    while sweeps < max_sweeps:
        _rebuild_nb(u, k, ptr, idx, scores, codes, isum, icnt, S_in, N_in, S_tot, N_tot, counts)
        dev = 0
        if use_pen:
            for a in range(n):
                if u[a] != init[a]:
                    dev += 1
        cur_inv, cur_val, _ = _finish_nb(counts, S_in, N_in, S_tot, N_tot, n, dev, penalty)
        moved = False
        for a in range(n):
            p = u[a]
            if counts[p] == 1:
                continue
            best_q = p
            best_inv = cur_inv
            best_val = cur_val
            for q in range(k):
                if q == p:
                    continue
                d = dev
                if use_pen:
                    d += (q != init[a]) - (p != init[a])
                _move_nb(a, q, u, k, ptr, idx, scores, aptr, aidx, codes, isum, icnt, S_in, N_in, S_tot, N_tot, counts)
                inv, val, _ = _finish_nb(counts, S_in, N_in, S_tot, N_tot, n, d, penalty)
                _move_nb(a, p, u, k, ptr, idx, scores, aptr, aidx, codes, isum, icnt, S_in, N_in, S_tot, N_tot, counts)
                if _better(inv, val, best_inv, best_val, tol):
                    best_q = q
                    best_inv = inv
                    best_val = val
            if best_q != p:
                if use_pen:
                    dev += (best_q != init[a]) - (p != init[a])
                _move_nb(a, best_q, u, k, ptr, idx, scores, aptr, aidx, codes, isum, icnt, S_in, N_in, S_tot, N_tot, counts)
                cur_inv = best_inv
                cur_val = best_val
                moved = True
        sweeps += 1
        if not moved:
            break
    return u, sweeps


def _objective_np(u, k, ptr, idx, scores, init, penalty):
    n = u.shape[0]
    codes = np.bitwise_or.reduceat(np.left_shift(np.int64(1), u[idx]), ptr[:-1])
    uniq, inv = np.unique(codes, return_inverse=True)
    vt = np.bincount(inv, weights=scores) / np.bincount(inv)
    bits = ((uniq[:, None] >> np.arange(k)) & 1).astype(np.float64)
    sz = bits.sum(axis=1).astype(np.int64)
    onehot = np.zeros((uniq.shape[0], k + 1))
    onehot[np.arange(uniq.shape[0]), sz] = 1.0
    S_in = bits.T @ (onehot * vt[:, None])
    N_in = np.rint(bits.T @ onehot).astype(np.int64)
    S_tot = onehot.T @ vt
    N_tot = np.rint(onehot.sum(axis=0)).astype(np.int64)
    counts = np.bincount(u, minlength=k)
    nonempty = counts > 0
    if nonempty.sum() == 1:
        ev = np.zeros(k)
        ok = np.ones(k, dtype=bool)
    else:
        N_ex = N_tot[None, :] - N_in
        use = (N_in > 0) & (N_ex > 0)
        use[:, 0] = False
        with np.errstate(divide="ignore", invalid="ignore"):
            diff = np.where(use, S_in / np.maximum(N_in, 1) - (S_tot[None, :] - S_in) / np.maximum(N_ex, 1), 0.0)
        used = use.sum(axis=1)
        ok = used > 0
        ev = np.where(ok, diff.sum(axis=1) / np.maximum(used, 1), 0.0)
    valid = nonempty & ok
    invalid = int(counts[nonempty & ~ok].sum())
    weight = counts[valid].sum()
    var = 0.0
    if weight > 0:
        mean = np.dot(counts[valid], ev[valid]) / weight
        var = float(np.dot(counts[valid], (ev[valid] - mean) ** 2) / weight)
    dev = int(np.count_nonzero(u != init)) if penalty != 0.0 else 0
    return invalid, var - penalty * dev / n, var


def _climb_np(u0, k, ptr, idx, scores, aptr, aidx, init, penalty, max_sweeps, tol):
    u = u0.copy()
    n = u.shape[0]
    sweeps = 0
    while sweeps < max_sweeps:
        cur_inv, cur_val, _ = _objective_np(u, k, ptr, idx, scores, init, penalty)
        counts = np.bincount(u, minlength=k)
        moved = False
        for a in range(n):
            p = int(u[a])
            if counts[p] == 1:
                continue
            best_q, best_inv, best_val = p, cur_inv, cur_val
            for q in range(k):
                if q == p:
                    continue
                u[a] = q
                inv, val, _ = _objective_np(u, k, ptr, idx, scores, init, penalty)
                u[a] = p
                if inv != best_inv:
                    better = inv < best_inv
                else:
                    better = val > best_val + tol * (1.0 + abs(best_val))
                if better:
                    best_q, best_inv, best_val = q, inv, val
            if best_q != p:
                u[a] = best_q
                counts[p] -= 1
                counts[best_q] += 1
                cur_inv, cur_val = best_inv, best_val
                moved = True
        sweeps += 1
        if not moved:
            break
    return u, sweeps


def _prep(u, ptr, idx, scores, init):
    return (
        np.ascontiguousarray(u, dtype=np.int64),
        np.ascontiguousarray(ptr, dtype=np.int64),
        np.ascontiguousarray(idx, dtype=np.int64),
        np.ascontiguousarray(scores, dtype=np.float64),
        np.ascontiguousarray(init, dtype=np.int64),
    )


def cluster_objective(u, k, ptr, idx, scores, init, penalty):
    """Return ``(n_invalid_agents, penalized_objective, variance)`` for assignment ``u``."""
    u, ptr, idx, scores, init = _prep(u, ptr, idx, scores, init)
    if USE_NUMBA and k <= MAX_DENSE_K:
        inv, val, var = _objective_nb(u, k, ptr, idx, scores, init, float(penalty))
    else:
        inv, val, var = _objective_np(u, k, ptr, idx, scores, init, float(penalty))
    return int(inv), float(val), float(var)


def climb(u0, k, ptr, idx, scores, aptr, aidx, init, penalty, max_sweeps=1000, tol=1e-12):
    """Greedy single-agent reassignment from ``u0`` to a local optimum.

    Agents are visited in index order; each moves to the cluster with the
    strictly best objective (lowest index among equals). A move that would
    empty a cluster is never taken.
    """
    u0, ptr, idx, scores, init = _prep(u0, ptr, idx, scores, init)
    aptr = np.ascontiguousarray(aptr, dtype=np.int64)
    aidx = np.ascontiguousarray(aidx, dtype=np.int64)
    if aptr.shape[0] != u0.shape[0] + 1 or (aidx.size and (aidx.min() < 0 or aidx.max() >= ptr.shape[0] - 1)):
        raise ValueError("agent index does not match the observation index")
    if USE_NUMBA and k <= MAX_DENSE_K:
        u, sweeps = _climb_nb(u0, k, ptr, idx, scores, aptr, aidx, init, float(penalty), int(max_sweeps), float(tol))
    else:
        u, sweeps = _climb_np(u0, k, ptr, idx, scores, aptr, aidx, init, float(penalty), int(max_sweeps), float(tol))
    return u, int(sweeps)
