"""Independent reference implementations used as test oracles.

Each one is written from the definition, by brute force where possible, and
shares no code with the package.
"""

import itertools

import numpy as np


def central_fd(f, x, h):
    """Central finite-difference gradient of a scalar function of a flat array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def monotone_paths(n, m):
    """Every warping path from (0, 0) to (n-1, m-1) with unit steps right/down/diagonal."""
    out = []

    def rec(i, j, path):
        if (i, j) == (n - 1, m - 1):
            out.append(path)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                rec(a, b, path + [(a, b)])

    rec(0, 0, [(0, 0)])
    return out


def dtw_exhaustive(D):
    D = np.asarray(D)
    return min(sum(D[i, j] for i, j in p) for p in monotone_paths(*D.shape))


def soft_dtw_exhaustive(D, gamma):
    """-gamma log sum over all paths of exp(-cost / gamma), evaluated stably."""
    D = np.asarray(D)
    costs = np.array([sum(D[i, j] for i, j in p) for p in monotone_paths(*D.shape)])
    m = costs.min()
    return m - gamma * np.log(np.exp(-(costs - m) / gamma).sum())


def ap_brute_force(S, preference):
    """Exemplar set maximising net similarity, exhaustively over non-empty subsets."""
    n = len(S)
    best, best_set = -np.inf, None
    for k in range(1, n + 1):
        for ex in itertools.combinations(range(n), k):
            tot = 0.0
            for i in range(n):
                tot += preference if i in ex else max(S[i][e] for e in ex)
            if tot > best + 1e-12:
                best, best_set = tot, ex
    return best, best_set


def point_segment_dist(p, a, b):
    """Distance from point p to segment ab, by closest-point parameter."""
    ab = b - a
    L = float(ab @ ab)
    if L == 0.0:
        return float(np.hypot(*(p - a)))
    t = min(1.0, max(0.0, float((p - a) @ ab) / L))
    q = a + t * ab
    return float(np.hypot(*(p - q)))


def sspd_brute(A, B):
    def spd(P, Q):
        if len(Q) == 1:
            return np.mean([float(np.hypot(*(p - Q[0]))) for p in P])
        tot = 0.0
        for p in P:
            tot += min(point_segment_dist(p, Q[k], Q[k + 1]) for k in range(len(Q) - 1))
        return tot / len(P)

    return 0.5 * (spd(A, B) + spd(B, A))


def assignment_brute_force(cost, gate):
    """Minimum-cost partial matching that maximises the number of gated pairs first.

    Returns (number of pairs, total cost) of the optimum.
    """
    n, m = cost.shape
    best = (0, 0.0)
    rows = range(n)
    for k in range(min(n, m), 0, -1):
        found = None
        for rs in itertools.combinations(rows, k):
            for cs in itertools.permutations(range(m), k):
                c = [cost[r, q] for r, q in zip(rs, cs)]
                if max(c) > gate:
                    continue
                s = sum(c)
                if found is None or s < found:
                    found = s
        if found is not None:
            return k, found
    return best


def mpjpe_loops(pred, gt):
    """Root-aligned mean joint error in mm, by explicit loops."""
    T, J, _ = pred.shape
    tot = 0.0
    for t in range(T):
        for j in range(J):
            d = 0.0
            for c in range(3):
                d += ((pred[t, j, c] - pred[t, 0, c]) - (gt[t, j, c] - gt[t, 0, c])) ** 2
            tot += np.sqrt(d)
    return 1000.0 * tot / (T * J)


def similarity_align(X, Y):
    """Similarity transform of X onto Y via scipy's orthogonal Procrustes and a closed-form scale."""
    from scipy.linalg import orthogonal_procrustes

    mx, my = X.mean(0), Y.mean(0)
    A, B = X - mx, Y - my
    R, s = orthogonal_procrustes(A, B)
    if np.linalg.det(R) < 0:
        # reflection: redo with the sign fix on the smallest singular direction
        U, S, Vt = np.linalg.svd(A.T @ B)
        D = np.diag([1.0, 1.0, -1.0])
        R = U @ D @ Vt
        s = (S * np.diag(D)).sum()
    scale = s / (A * A).sum()
    return scale * A @ R + my


def pcod_pairs(zp, zg, tie=0.1):
    ok = tot = 0
    n = len(zp)
    for i in range(n):
        for j in range(i + 1, n):
            dp, dg = zp[i] - zp[j], zg[i] - zg[j]
            tot += 1
            if abs(dg) < tie:
                ok += abs(dp) < tie
            elif abs(dp) >= tie and (dp > 0) == (dg > 0):
                ok += 1
    return ok, tot
