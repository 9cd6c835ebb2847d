"""
Hot loops: NetVLAD pooling over many sets, greedy and exhaustive
query/element matching, and descriptor-per-set scoring.

Each kernel exists twice, a numba ``@njit`` version and a vectorized numpy
version producing the same numbers. The numba path is used when numba
imports and ``SETRET_NO_JIT`` is unset (or ``0``); set ``SETRET_NO_JIT=1`` to
force the numpy path. Both are always importable for cross-checking.

Sets are stored ragged: a flat ``(M, dim)`` element array plus an
``offsets`` array of length ``N + 1`` with set ``i`` owning rows
``offsets[i]:offsets[i+1]``.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SETRET_NO_JIT", "0") in ("", "0")
BACKEND = "numba" if USE_NUMBA else "numpy"

JIT_OPTIONS = {"nogil": True, "cache": True}

# rows of elements processed at once by the numpy NetVLAD path
_CHUNK_ROWS = 8192


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --------------------------------------------------------------------------
# NetVLAD pooling
# --------------------------------------------------------------------------


def netvlad_pool_numpy(x, offsets, a, b, c):
    """Modified NetVLAD vectors (unit norm, length ``K * dim``) for every set."""
    x = np.asarray(x, dtype=np.float64)
    n_sets = len(offsets) - 1
    k, dim = c.shape
    out = np.zeros((n_sets, k * dim))
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise ValueError("empty set in NetVLAD pooling")
    set_of_row = np.repeat(np.arange(n_sets), counts)
    for start in range(0, len(x), _CHUNK_ROWS):
        xs = x[start:start + _CHUNK_ROWS]
        logits = xs @ a.T + b
        logits -= logits.max(axis=1, keepdims=True)
        alpha = np.exp(logits)
        alpha /= alpha.sum(axis=1, keepdims=True)
        resid = alpha[:, :, None] * (xs[:, None, :] - c[None, :, :])
        resid = resid.reshape(len(xs), -1)
        norms = np.linalg.norm(resid, axis=1)
        if np.any(norms == 0):
            bad = start + int(np.flatnonzero(norms == 0)[0])
            raise ValueError(f"element {bad} has a zero NetVLAD contribution")
        np.add.at(out, set_of_row[start:start + _CHUNK_ROWS], resid / norms[:, None])
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


if HAVE_NUMBA:

    @numba.njit(**JIT_OPTIONS)
    def netvlad_pool_numba(x, offsets, a, b, c):
        n_sets = offsets.shape[0] - 1
        k, dim = c.shape
        out = np.zeros((n_sets, k * dim))
        logits = np.empty(k)
        contrib = np.empty(k * dim)
        for s in range(n_sets):
            row = out[s]
            for i in range(offsets[s], offsets[s + 1]):
                xi = x[i]
                mx = -np.inf
                for kk in range(k):
                    acc = b[kk]
                    for d in range(dim):
                        acc += a[kk, d] * xi[d]
                    logits[kk] = acc
                    if acc > mx:
                        mx = acc
                tot = 0.0
                for kk in range(k):
                    logits[kk] = np.exp(logits[kk] - mx)
                    tot += logits[kk]
                sq = 0.0
                for kk in range(k):
                    wk = logits[kk] / tot
                    for d in range(dim):
                        r = wk * (xi[d] - c[kk, d])
                        contrib[kk * dim + d] = r
                        sq += r * r
                if sq == 0.0:
                    raise ValueError("element has a zero NetVLAD contribution")
                inv = 1.0 / np.sqrt(sq)
                for j in range(k * dim):
                    row[j] += contrib[j] * inv
            sq = 0.0
            for j in range(k * dim):
                sq += row[j] * row[j]
            if sq == 0.0:
                raise ValueError("empty set in NetVLAD pooling")
            inv = 1.0 / np.sqrt(sq)
            for j in range(k * dim):
                row[j] *= inv
        return out

else:  # pragma: no cover
    netvlad_pool_numba = None


def netvlad_pool(x, offsets, a, b, c):
    offsets = np.asarray(offsets, dtype=np.int64)
    if USE_NUMBA:
        if np.any(np.diff(offsets) <= 0):
            raise ValueError("empty set in NetVLAD pooling")
        return netvlad_pool_numba(
            np.ascontiguousarray(x, dtype=np.float64), offsets,
            np.ascontiguousarray(a, dtype=np.float64),
            np.ascontiguousarray(b, dtype=np.float64),
            np.ascontiguousarray(c, dtype=np.float64),
        )
    return netvlad_pool_numpy(x, offsets, a, b, c)


# --------------------------------------------------------------------------
# Greedy bipartite matching, one set per segment
# --------------------------------------------------------------------------
#
# Pair logits are ``w * <element, query> + b`` (float64 accumulation over the
# stored float32 values). Pairs are accepted in decreasing logit order (ties:
# lower query index, then lower element index) and a set scores the sum of
# sigmoid(logit) over accepted pairs. ``rows`` restricts scoring to a subset
# of sets, returned in the given order.


def greedy_scores_numpy(x, offsets, q, w, b, rows=None):
    x = np.asarray(x)
    offsets = np.asarray(offsets, dtype=np.int64)
    if rows is not None:
        rows = np.asarray(rows, dtype=np.int64)
        counts = offsets[rows + 1] - offsets[rows]
        new_off = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        starts = np.repeat(offsets[rows], counts)
        x = x[starts + np.arange(new_off[-1]) - np.repeat(new_off[:-1], counts)]
        offsets = new_off
    z_flat = w * (x.astype(np.float64) @ np.asarray(q, dtype=np.float64).T) + b
    n_sets = len(offsets) - 1
    n_q = z_flat.shape[1]
    counts = np.diff(offsets)
    if n_sets == 0:
        return np.zeros(0)
    f_max = int(counts.max())
    # padded (N, Q, F) logits; padding is -inf so it is never accepted
    z = np.full((n_sets, n_q, f_max), -np.inf)
    set_of_row = np.repeat(np.arange(n_sets), counts)
    pos = np.arange(len(z_flat)) - np.repeat(offsets[:-1], counts)
    z[set_of_row, :, pos] = z_flat
    total = np.zeros(n_sets)
    rr = np.arange(n_sets)
    flat = z.reshape(n_sets, -1)
    for _ in range(min(n_q, f_max)):
        best = np.argmax(flat, axis=1)
        val = flat[rr, best]
        live = np.isfinite(val)
        if not live.any():
            break
        total[live] += _sigmoid(val[live])
        qi, fi = np.divmod(best, f_max)
        z[rr[live], qi[live], :] = -np.inf
        z[rr[live], :, fi[live]] = -np.inf
    return total


if HAVE_NUMBA:

    @numba.njit(inline="always", **JIT_OPTIONS)
    def _greedy_one(z, n_q, n_f, used_q, used_f, picked, row):
        # each step accepts the largest logit whose query and element are both
        # free; the first index wins ties, which is the order a stable sort of
        # all pairs followed by a sweep would give. Q*F is a handful, so the
        # min(Q, F) rescans are cheaper than sorting
        for j in range(n_q):
            used_q[j] = False
        for j in range(n_f):
            used_f[j] = False
        for taken in range(min(n_q, n_f)):
            best = -np.inf
            bq = -1
            bf = -1
            for qq in range(n_q):
                if used_q[qq]:
                    continue
                for f in range(n_f):
                    v = z[qq * n_f + f]
                    if not used_f[f] and (bq < 0 or v > best):
                        best = v
                        bq = qq
                        bf = f
            used_q[bq] = True
            used_f[bf] = True
            picked[row, taken] = best

    @numba.njit(fastmath={"reassoc", "contract"}, **JIT_OPTIONS)
    def _dot(u, v):
        acc = 0.0
        for d in range(u.shape[0]):
            acc += np.float64(u[d]) * np.float64(v[d])
        return acc

    @numba.njit(**JIT_OPTIONS)
    def greedy_logits_numba(x, offsets, q, w, b, rows):
        """``(len(rows), min(Q, F_max))`` accepted logits, ``-inf`` padded."""
        n_out = rows.shape[0]
        n_q = q.shape[0]
        f_max = 0
        for k in range(n_out):
            s = rows[k]
            f_max = max(f_max, offsets[s + 1] - offsets[s])
        picked = np.full((n_out, min(n_q, f_max)), -np.inf)
        used_q = np.zeros(n_q, dtype=np.bool_)
        used_f = np.zeros(f_max, dtype=np.bool_)
        z = np.empty(n_q * f_max)
        for k in range(n_out):
            s = rows[k]
            lo = offsets[s]
            n_f = offsets[s + 1] - lo
            if n_f == 0:
                continue
            for f in range(n_f):
                xf = x[lo + f]
                for qq in range(n_q):
                    z[qq * n_f + f] = w * _dot(xf, q[qq]) + b
            _greedy_one(z, n_q, n_f, used_q, used_f, picked, k)
        return picked

else:  # pragma: no cover
    greedy_logits_numba = None


def _sum_sigmoids(z):
    # vectorized tanh beats a scalar libm call per pair; sigmoid(-inf) = 0
    np.multiply(z, 0.5, out=z)
    np.tanh(z, out=z)
    return 0.5 * (z.shape[1] + z.sum(axis=1))


def greedy_scores_numba(x, offsets, q, w, b, rows):
    return _sum_sigmoids(greedy_logits_numba(x, offsets, q, w, b, rows))


def greedy_scores(x, offsets, q, w, b, rows=None):
    """Greedy matching score of each set (or of ``rows``); see notes above."""
    offsets = np.asarray(offsets, dtype=np.int64)
    if USE_NUMBA:
        if rows is None:
            rows = np.arange(len(offsets) - 1, dtype=np.int64)
        return greedy_scores_numba(
            np.ascontiguousarray(x, dtype=np.float32), offsets,
            np.ascontiguousarray(q, dtype=np.float64), float(w), float(b),
            np.asarray(rows, dtype=np.int64),
        )
    return greedy_scores_numpy(x, offsets, q, float(w), float(b), rows)


# --------------------------------------------------------------------------
# Optimal (maximum-weight) matching for small sets, by exhaustive search
# --------------------------------------------------------------------------
#
# Pair scores are positive, so a maximum-weight matching is complete on the
# smaller side: every injective map from the smaller side into the larger
# one is tried.


def _pair_sigmoids(x, offsets, q, w, b, rows):
    x = np.asarray(x)
    offsets = np.asarray(offsets, dtype=np.int64)
    if rows is None:
        rows = np.arange(len(offsets) - 1)
    return [_sigmoid(w * (np.asarray(q, dtype=np.float64) @ x[offsets[s]:offsets[s + 1]].astype(np.float64).T) + b)
            for s in rows]


def optimal_scores_numpy(x, offsets, q, w, b, rows=None):
    import itertools

    mats = _pair_sigmoids(x, offsets, q, w, b, rows)
    out = np.zeros(len(mats))
    # group by shape so each group is one vectorized max over assignments
    groups = {}
    for i, m in enumerate(mats):
        groups.setdefault(m.shape, []).append(i)
    for (n_q, n_f), idx in groups.items():
        stack = np.stack([mats[i] for i in idx])
        if n_q > n_f:
            stack = stack.transpose(0, 2, 1)
        r, c = stack.shape[1:]
        perms = np.array(list(itertools.permutations(range(c), r)), dtype=np.int64)
        totals = stack[:, np.arange(r)[None, :], perms].sum(axis=2)
        out[idx] = totals.max(axis=1)
    return out


if HAVE_NUMBA:

    @numba.njit(inline="always", **JIT_OPTIONS)
    def _best_assignment(s, r, c, pick, used):
        # s is (r, c) with r <= c; odometer over injective maps row -> column
        best = 0.0
        depth = 0
        pick[0] = -1
        total = 0.0
        while depth >= 0:
            if pick[depth] >= 0:
                used[pick[depth]] = False
                total -= s[depth, pick[depth]]
            nxt = pick[depth] + 1
            while nxt < c and used[nxt]:
                nxt += 1
            if nxt == c:
                pick[depth] = -1
                depth -= 1
                continue
            pick[depth] = nxt
            used[nxt] = True
            total += s[depth, nxt]
            if depth == r - 1:
                if total > best:
                    best = total
            else:
                depth += 1
                pick[depth] = -1
        return best

    @numba.njit(**JIT_OPTIONS)
    def pair_logits_numba(x, offsets, q, w, b, rows):
        """Logits of every (query, element) pair, set by set, query-major.

        Set ``k`` owns ``z[starts[k]:starts[k + 1]]`` laid out as ``(Q, F_k)``.
        """
        n_out = rows.shape[0]
        n_q = q.shape[0]
        starts = np.zeros(n_out + 1, dtype=np.int64)
        for k in range(n_out):
            st = rows[k]
            starts[k + 1] = starts[k] + n_q * (offsets[st + 1] - offsets[st])
        z = np.empty(starts[n_out])
        for k in range(n_out):
            st = rows[k]
            lo = offsets[st]
            n_f = offsets[st + 1] - lo
            base = starts[k]
            for f in range(n_f):
                xf = x[lo + f]
                for qq in range(n_q):
                    z[base + qq * n_f + f] = w * _dot(xf, q[qq]) + b
        return z, starts

    @numba.njit(**JIT_OPTIONS)
    def best_assignments_numba(p, starts, n_q):
        """Exhaustive best matching of each set from its pair scores ``p``."""
        n_out = starts.shape[0] - 1
        out = np.zeros(n_out)
        side = n_q
        for k in range(n_out):
            side = max(side, (starts[k + 1] - starts[k]) // n_q)
        s = np.empty((side, side))
        pick = np.empty(side, dtype=np.int64)
        used = np.zeros(side, dtype=np.bool_)
        for k in range(n_out):
            base = starts[k]
            n_f = (starts[k + 1] - base) // n_q
            if n_f == 0:
                continue
            for qq in range(n_q):
                for f in range(n_f):
                    if n_q <= n_f:
                        s[qq, f] = p[base + qq * n_f + f]
                    else:
                        s[f, qq] = p[base + qq * n_f + f]
            out[k] = _best_assignment(s, min(n_q, n_f), max(n_q, n_f), pick, used)
        return out

    def optimal_scores_numba(x, offsets, q, w, b, rows):
        z, starts = pair_logits_numba(x, offsets, q, w, b, rows)
        # every pair needs its sigmoid here, so do them in one vectorized pass
        np.multiply(z, 0.5, out=z)
        np.tanh(z, out=z)
        z += 1.0
        z *= 0.5
        return best_assignments_numba(z, starts, q.shape[0])

else:  # pragma: no cover
    optimal_scores_numba = None


def optimal_scores(x, offsets, q, w, b, rows=None):
    """Maximum-weight matching score of each set (or of ``rows``).

    Exhaustive, so meant for the small query/set sizes of retrieval.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    if USE_NUMBA:
        if rows is None:
            rows = np.arange(len(offsets) - 1, dtype=np.int64)
        return optimal_scores_numba(
            np.ascontiguousarray(x, dtype=np.float32), offsets,
            np.ascontiguousarray(q, dtype=np.float64), float(w), float(b),
            np.asarray(rows, dtype=np.int64),
        )
    return optimal_scores_numpy(x, offsets, q, float(w), float(b), rows)


# --------------------------------------------------------------------------
# Descriptor-per-set scores: sum_q sigmoid(w * <v, q> + b) for every row
# --------------------------------------------------------------------------


def set_scores_numpy(vectors, q, w, b):
    z = w * (np.asarray(vectors, dtype=np.float64) @ np.asarray(q, dtype=np.float64).T) + b
    return _sigmoid(z).sum(axis=1)


if HAVE_NUMBA:

    @numba.njit(**JIT_OPTIONS)
    def set_logits_numba(vectors, q, w, b):
        n = vectors.shape[0]
        n_q = q.shape[0]
        out = np.empty((n_q, n))  # query-major so the final sum runs over rows
        for i in range(n):
            v = vectors[i]
            for j in range(n_q):
                out[j, i] = w * _dot(v, q[j]) + b
        return out

else:  # pragma: no cover
    set_logits_numba = None


def set_scores(vectors, q, w, b):
    """Summed sigmoid scores of set descriptors against query descriptors."""
    if USE_NUMBA:
        z = set_logits_numba(
            np.ascontiguousarray(vectors, dtype=np.float32),
            np.ascontiguousarray(q, dtype=np.float64), float(w), float(b),
        )
        return _sum_sigmoids(z.T)
    return set_scores_numpy(vectors, q, float(w), float(b))
