"""Numba kernels for Gram-form lasso coordinate descent.

Objective (constant dropped): ``b' G b - 2 c' b + lam * |b|_1`` with
``G = Xc'Xc / N`` and ``c = Xc'(yc - Xc w) / N``. The coordinate minimizer is
``soft(c_j - (G b)_j + G_jj b_j, lam / 2) / G_jj``.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def soft_threshold(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def kkt_violation_gram(G, c, q, beta, lam, free):
    worst = 0.0
    for j in range(beta.size):
        if not free[j]:
            continue
        g = 2.0 * (c[j] - q[j])
        if beta[j] > 0.0:
            v = abs(g - lam)
        elif beta[j] < 0.0:
            v = abs(g + lam)
        else:
            v = abs(g) - lam
        if v > worst:
            worst = v
    return worst


@njit(cache=True)
def _objective(c, q, beta, lam):
    return np.dot(beta, q) - 2.0 * np.dot(c, beta) + lam * np.sum(np.abs(beta))


@njit(cache=True)
def _sweep(G, c, q, beta, lam, free, only_active):
    p = beta.size
    half = 0.5 * lam
    maxchange = 0.0
    for j in range(p):
        if not free[j]:
            continue
        old = beta[j]
        if only_active and old == 0.0:
            continue
        gjj = G[j, j]
        z = c[j] - q[j] + gjj * old
        new = soft_threshold(z, half) / gjj
        delta = new - old
        if delta != 0.0:
            beta[j] = new
            for i in range(p):
                q[i] += G[i, j] * delta
            if abs(delta) > maxchange:
                maxchange = abs(delta)
    return maxchange


@njit(cache=True)
def _cholesky_solve(M, b, out):
    """Solve ``M x = b`` for symmetric PSD ``M`` in place; False if numerically singular."""
    n = b.size
    L = np.zeros((n, n))
    scale = 0.0
    for i in range(n):
        if M[i, i] > scale:
            scale = M[i, i]
    floor = 1e-10 * scale
    for j in range(n):
        d = M[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if d <= floor:
            return False
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            v = M[i, j]
            for k in range(j):
                v -= L[i, k] * L[j, k]
            L[i, j] = v / L[j, j]
    z = np.empty(n)
    for i in range(n):
        v = b[i]
        for k in range(i):
            v -= L[i, k] * z[k]
        z[i] = v / L[i, i]
    for i in range(n - 1, -1, -1):
        v = z[i]
        for k in range(i + 1, n):
            v -= L[k, i] * out[k]
        out[i] = v / L[i, i]
    return True


@njit(cache=True)
def _newton_on_support(G, c, beta, lam, free, kkt_tol, max_rounds=12):
    """Active-set Newton step started from the support and signs of ``beta``.

    Each round solves the stationarity equations on the working support,
    drops coordinates whose sign flipped, or adds the worst violating
    inactive coordinate. The candidate is written into ``beta`` only if it
    satisfies the full KKT conditions, i.e. it is an exact minimizer.
    """
    p = beta.size
    sign = np.zeros(p)
    for j in range(p):
        if beta[j] > 0.0:
            sign[j] = 1.0
        elif beta[j] < 0.0:
            sign[j] = -1.0
    cand = np.zeros(p)
    for _ in range(max_rounds):
        n_act = 0
        for j in range(p):
            if sign[j] != 0.0:
                n_act += 1
        if n_act == 0:
            return False
        act = np.empty(n_act, dtype=np.int64)
        i = 0
        for j in range(p):
            if sign[j] != 0.0:
                act[i] = j
                i += 1
        Gaa = np.empty((n_act, n_act))
        rhs = np.empty(n_act)
        for r in range(n_act):
            jr = act[r]
            rhs[r] = c[jr] - 0.5 * lam * sign[jr]
            for t in range(n_act):
                Gaa[r, t] = G[jr, act[t]]
        sol = np.empty(n_act)
        if not _cholesky_solve(Gaa, rhs, sol):
            return False
        flipped = False
        for r in range(n_act):
            if not np.isfinite(sol[r]):
                return False
            if sol[r] * sign[act[r]] <= 0.0:
                sign[act[r]] = 0.0
                flipped = True
        if flipped:
            continue
        cand[:] = 0.0
        for r in range(n_act):
            cand[act[r]] = sol[r]
        qc = G @ cand
        worst = kkt_tol
        add = -1
        for j in range(p):
            if not free[j] or sign[j] != 0.0:
                continue
            g = 2.0 * (c[j] - qc[j])
            v = abs(g) - lam
            if v > worst:
                worst = v
                add = j
        if add < 0:
            if kkt_violation_gram(G, c, qc, cand, lam, free) > kkt_tol:
                return False
            for j in range(p):
                beta[j] = cand[j]
            return True
        sign[add] = 1.0 if c[add] - qc[add] > 0.0 else -1.0
    return False


@njit(cache=True)
def cd_gram(G, c, lam, beta, free, tol, kkt_tol, max_iter, trace):
    """Coordinate descent from the warm start ``beta`` (modified in place).

    Alternates full sweeps with active-set sweeps; during long active-set
    phases a Newton step on the current support is attempted and kept only if
    it is an exact minimizer. Stops when a full sweep moves no coordinate by
    ``tol`` or more and the KKT violation is below ``kkt_tol``. ``trace``
    (length ``max_iter + 1`` or 0) receives the objective after every sweep.
    Returns ``(sweeps, violation, converged)``.
    """
    q = G @ beta
    it = 0
    record = trace.size > 0
    if record:
        trace[0] = _objective(c, q, beta, lam)
    # warm starts along a grid usually keep their support: try it before sweeping
    if _newton_on_support(G, c, beta, lam, free, kkt_tol):
        q = G @ beta
    while it < max_iter:
        change = _sweep(G, c, q, beta, lam, free, False)
        it += 1
        if record:
            trace[it] = _objective(c, q, beta, lam)
        if change < tol:
            # recompute q to shed accumulated drift before certifying
            q = G @ beta
            viol = kkt_violation_gram(G, c, q, beta, lam, free)
            if viol <= kkt_tol:
                return it, viol, True
            continue
        inner = 0
        while it < max_iter:
            change = _sweep(G, c, q, beta, lam, free, True)
            it += 1
            inner += 1
            if record:
                trace[it] = _objective(c, q, beta, lam)
            if change < tol:
                break
            if inner == 3 or inner == 16 or inner == 48:
                if _newton_on_support(G, c, beta, lam, free, kkt_tol):
                    q = G @ beta
                    break
            if inner >= 64:
                break
    q = G @ beta
    viol = kkt_violation_gram(G, c, q, beta, lam, free)
    return it, viol, False


@njit(cache=True)
def path_gram(G, c, lams, free, tol, kkt_tol, max_iter):
    """Warm-started fits along ``lams``; returns coefficients (L, p), sweeps, violations, flags."""
    p = c.size
    L = lams.size
    coefs = np.zeros((L, p))
    sweeps = np.zeros(L, dtype=np.int64)
    viols = np.zeros(L)
    conv = np.zeros(L, dtype=np.bool_)
    beta = np.zeros(p)
    empty = np.zeros(0)
    for l in range(L):
        it, v, ok = cd_gram(G, c, lams[l], beta, free, tol, kkt_tol, max_iter, empty)
        coefs[l] = beta
        sweeps[l] = it
        viols[l] = v
        conv[l] = ok
    return coefs, sweeps, viols, conv


@njit(cache=True)
def cv_errors(Xc, yc, fold_id, n_folds, lams, tol, kkt_tol, max_iter):
    """Pooled held-out squared error per lambda; training folds are re-centered.

    Returns ``(sse / N, all_converged, worst_violation)``.
    """
    N, p = Xc.shape
    L = lams.size
    sse = np.zeros(L)
    all_ok = True
    worst = 0.0
    for f in range(n_folds):
        tr = fold_id != f
        te = ~tr
        Xtr = Xc[tr]
        ytr = yc[tr]
        Xte = Xc[te]
        yte = yc[te]
        ntr = Xtr.shape[0]
        xm = np.zeros(p)
        for j in range(p):
            xm[j] = Xtr[:, j].mean()
        ym = ytr.mean()
        Xtr_c = Xtr - xm
        ytr_c = ytr - ym
        free = np.zeros(p, dtype=np.bool_)
        for j in range(p):
            col = Xtr[:, j]
            free[j] = col.max() > col.min()
            if not free[j]:
                Xtr_c[:, j] = 0.0
        G = (Xtr_c.T @ Xtr_c) / ntr
        c = (Xtr_c.T @ ytr_c) / ntr
        Xte_c = Xte - xm
        resid0 = yte - ym
        coefs, sweeps, viols, conv = path_gram(G, c, lams, free, tol, kkt_tol, max_iter)
        for l in range(L):
            if not conv[l]:
                all_ok = False
            if viols[l] > worst:
                worst = viols[l]
            r = resid0 - Xte_c @ coefs[l]
            sse[l] += np.dot(r, r)
    return sse / N, all_ok, worst
