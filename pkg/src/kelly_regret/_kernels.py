"""Compiled inner loops for the portfolio optimizers."""
import numpy as np
from numba import njit


@njit(cache=True)
def _objective(w, g, mu, lam):
    return 0.5 * (w @ g) - 0.5 * (w @ mu) + lam * np.sum(np.abs(w))


@njit(cache=True)
def _polish(Q, mu, lam, w, nonneg, kkt_tol):
    """Exact minimizer on the face fixed by the current support and signs.

    Accepted only if signs are preserved and the KKT conditions hold, so the
    result is the global minimizer. Returns True and overwrites ``w`` then.
    """
    n = mu.shape[0]
    q = 0
    for j in range(n):
        if w[j] != 0.0:
            q += 1
    if q == 0:
        return False
    idx = np.empty(q, dtype=np.int64)
    sgn = np.empty(q)
    k = 0
    for j in range(n):
        if w[j] != 0.0:
            idx[k] = j
            sgn[k] = 1.0 if w[j] > 0 else -1.0
            k += 1
    A = np.empty((q, q))
    b = np.empty(q)
    for a in range(q):
        b[a] = mu[idx[a]] - lam * sgn[a]
        for c in range(q):
            A[a, c] = Q[idx[a], idx[c]]
    ws = np.linalg.solve(A, b)
    for a in range(q):
        if ws[a] * sgn[a] <= 0.0:
            return False
    cand = np.zeros(n)
    for a in range(q):
        cand[idx[a]] = ws[a]
    g = Q @ cand - mu
    for j in range(n):
        if cand[j] == 0.0:
            if nonneg:
                if g[j] + lam < -kkt_tol:
                    return False
            elif abs(g[j]) > lam + kkt_tol:
                return False
        elif abs(g[j] + lam * (1.0 if cand[j] > 0 else -1.0)) > kkt_tol:
            return False
    for j in range(n):
        w[j] = cand[j]
    return True


@njit(cache=True)
def cd_lasso(Q, mu, lam, w, nonneg, max_sweeps, tol, trace):
    """Cyclic coordinate descent on ``0.5 w'Qw - w'mu + lam |w|_1``.

    ``w`` is the warm start and is updated in place. Whenever the support
    and signs have been stable for a few sweeps, the active face is solved
    exactly and the result kept if it passes the KKT check. ``trace`` (length
    ``max_sweeps + 1``, or 0 for none) receives the objective before the first sweep and after every sweep.
    Returns the number of sweeps run.
    """
    n = mu.shape[0]
    g = Q @ w - mu                      # gradient of the smooth part
    record = trace.shape[0] > 0
    if record:
        trace[0] = _objective(w, g, mu, lam)
    sweeps = 0
    stable = 0
    wait = 3
    for it in range(max_sweeps):
        max_delta = 0.0
        changed = False
        for j in range(n):
            qjj = Q[j, j]
            z = qjj * w[j] - g[j]       # mu_j - sum_{k != j} Q_jk w_k
            if nonneg:
                new = max(z - lam, 0.0) / qjj
            elif z > lam:
                new = (z - lam) / qjj
            elif z < -lam:
                new = (z + lam) / qjj
            else:
                new = 0.0
            delta = new - w[j]
            if (new > 0.0) != (w[j] > 0.0) or (new < 0.0) != (w[j] < 0.0):
                changed = True
            if delta != 0.0:
                for k in range(n):
                    g[k] += Q[k, j] * delta
                w[j] = new
                ad = abs(delta)
                if ad > max_delta:
                    max_delta = ad
        sweeps = it + 1
        if max_delta < tol:
            if record:
                trace[sweeps] = _objective(w, g, mu, lam)
            break
        stable = 0 if changed else stable + 1
        if stable >= wait:
            stable = 0
            wait *= 2
            if _polish(Q, mu, lam, w, nonneg, 1e-12):
                g = Q @ w - mu
                if record:
                    trace[sweeps] = _objective(w, g, mu, lam)
                break
        if record:
            trace[sweeps] = _objective(w, g, mu, lam)
    return sweeps


@njit(cache=True)
def cd_path(Q, mu, lams, nonneg, max_sweeps, tol):
    """:func:`cd_lasso` over a penalty grid, each solve warm-started from the last.

    Returns the ``(K, N)`` raw solutions and the sweeps used per point.
    """
    K, n = lams.shape[0], mu.shape[0]
    W = np.empty((K, n))
    sweeps = np.empty(K, dtype=np.int64)
    w = np.zeros(n)
    no_trace = np.empty(0)
    for k in range(K):
        sweeps[k] = cd_lasso(Q, mu, lams[k], w, nonneg, max_sweeps, tol, no_trace)
        W[k] = w
    return W, sweeps


@njit(cache=True)
def project_simplex(v, z):
    """Euclidean projection of ``v`` onto ``{x >= 0, sum(x) = z}``."""
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for i in range(n):
        css += u[i]
        t = (css - z) / (i + 1)
        if u[i] - t > 0:
            theta = t
    out = np.empty(n)
    for i in range(n):
        out[i] = max(v[i] - theta, 0.0)
    return out


@njit(cache=True)
def _pg_residual(Qs, mus, lb, v, budget, L):
    w = lb + v
    grad = Qs @ w - mus
    p = project_simplex(v - grad / L, budget)
    return L * np.sqrt(np.sum((v - p) ** 2))


@njit(cache=True)
def pg_simplex(Qs, mus, lb, tol, max_iter):
    """Minimize ``0.5 w'Qw - w'mu`` over ``{w >= lb, sum(w) = 1}``.

    Works on ``w = lb + v`` with ``v`` in the simplex scaled to
    ``1 - sum(lb)``. Accelerated projected gradient with step ``1/L``
    (``L`` the largest eigenvalue of ``Qs``) and function-value restart.
    Returns ``(w, iterations, projected-gradient norm)``.
    """
    q = mus.shape[0]
    budget = 1.0 - np.sum(lb)
    if budget < 0.0:
        budget = 0.0
    L = np.linalg.eigvalsh(Qs)[-1]
    if L <= 0.0:
        L = 1.0
    v = project_simplex(np.full(q, budget / q), budget)
    y = v.copy()
    t = 1.0
    w = lb + v
    f_old = 0.5 * (w @ (Qs @ w)) - w @ mus
    res = _pg_residual(Qs, mus, lb, v, budget, L)
    it = 0
    while it < max_iter and res >= tol:
        it += 1
        wy = lb + y
        grad = Qs @ wy - mus
        v_new = project_simplex(y - grad / L, budget)
        w = lb + v_new
        f_new = 0.5 * (w @ (Qs @ w)) - w @ mus
        if f_new > f_old:
            # restart momentum from the last iterate
            t = 1.0
            y = v.copy()
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = v_new + ((t - 1.0) / t_new) * (v_new - v)
        v = v_new
        t = t_new
        f_old = f_new
        res = _pg_residual(Qs, mus, lb, v, budget, L)
    return lb + v, it, res


@njit(cache=True)
def pg_simplex_batch(Q, mu, idx, sizes, lbs, tol, max_iter):
    """:func:`pg_simplex` for many subsets of one problem.

    ``idx`` and ``lbs`` are ``(K, qmax)`` and padded beyond ``sizes[k]``.
    """
    K = idx.shape[0]
    qmax = idx.shape[1]
    W = np.zeros((K, qmax))
    iters = np.zeros(K, dtype=np.int64)
    resid = np.zeros(K)
    for k in range(K):
        q = sizes[k]
        ix = idx[k, :q]
        Qs = np.empty((q, q))
        mus = np.empty(q)
        for a in range(q):
            mus[a] = mu[ix[a]]
            for b in range(q):
                Qs[a, b] = Q[ix[a], ix[b]]
        w, n_it, r = pg_simplex(Qs, mus, lbs[k, :q].copy(), tol, max_iter)
        W[k, :q] = w
        iters[k] = n_it
        resid[k] = r
    return W, iters, resid


@njit(cache=True)
def count_satisfied(G, gt, same, strict):
    """Per column of ``1 + G``: scenarios with both gross returns positive,
    and those among them where the column is at least ``gt`` (above it if strict).

    Columns flagged in ``same`` are taken to equal ``gt`` exactly.
    """
    M, K = G.shape
    sat = np.zeros(K, dtype=np.int64)
    valid = np.zeros(K, dtype=np.int64)
    for m in range(M):
        t = gt[m]
        if not t > 0.0:
            continue
        for k in range(K):
            g = t if same[k] else 1.0 + G[m, k]
            if g > 0.0:
                valid[k] += 1
                if g > t or (not strict and g == t):
                    sat[k] += 1
    return sat, valid
