"""Hot numerical kernels for square-root information filtering.

A Gaussian over x is carried as a stochastic equation system ``R x = c``
with ``R`` unit upper triangular and ``c ~ N(mean, diag(std^2))``, the
right-hand sides mutually independent.  Each filter step assembles a small
dense system, triangularizes it with a variant of Gaussian elimination
that preserves right-hand-side independence, and reads off the new
representation.  All arithmetic on uncertainties happens in standard
deviations, never variances, so the filter stays finite on problems whose
variances span hundreds of orders of magnitude.

Kernels are numba-compiled when available (see :mod:`intermit._accel`);
the identical code runs under plain numpy otherwise.

Layout conventions (0-based arrays for a series of length T):

- ``a[i]`` is the selector for observation ``i`` (couples state ``l_i``
  backwards: y_{i+1} = a_i' l_i + b_i in 1-based math notation).
- ``g[i]`` drives the transition ``l_i -> l_{i+1}``; training uses
  ``g[0..T-2]``.
- With feature-weight inference enabled (p > 0) the carried state is the
  joint ``(l, w)`` of dimension J = d + p, represented as a block system
  ``[[R_l, S], [0, R_w]]``.
"""

import numpy as np

from ._accel import njit

LOG_2PI = 1.8378770664093453


@njit(cache=True)
def _stable_norm(v):
    """2-norm without overflow for entries near the float range limits."""
    m = 0.0
    for i in range(v.shape[0]):
        av = abs(v[i])
        if av > m:
            m = av
    if m == 0.0 or not np.isfinite(m):
        return m
    acc = 0.0
    for i in range(v.shape[0]):
        r = v[i] / m
        acc += r * r
    return m * np.sqrt(acc)


@njit(cache=True)
def solve_unit_upper(R, b):
    """Solve R x = b for unit upper triangular R."""
    n = b.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for j in range(i + 1, n):
            acc -= R[i, j] * x[j]
        x[i] = acc / R[i, i]
    return x


@njit(cache=True)
def solve_unit_upper_t(R, b):
    """Solve R' x = b (forward substitution on the transpose)."""
    n = b.shape[0]
    x = np.empty(n)
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= R[j, i] * x[j]
        x[i] = acc / R[i, i]
    return x


@njit(cache=True)
def _eliminate(A, mean, std, p, i, j, ncols):
    """Zero A[i, j] using pivot row p (A[p, j] == 1), keeping RHS independent.

    Row i becomes q_i - a_ij q_p; the pivot becomes w1 q_p + wi q_i with the
    weights chosen so the new right-hand sides are uncorrelated.  Standard
    deviations are updated through the alpha/beta case split, which never
    forms a variance.
    """
    aij = A[i, j]
    if aij == 0.0:
        return
    s1 = std[p]
    si = std[i]
    if s1 == 0.0:
        # Deterministic pivot: plain elimination, pivot row unchanged.
        for c in range(j, ncols):
            A[i, c] -= aij * A[p, c]
        A[i, j] = 0.0
        mean[i] -= aij * mean[p]
        return
    as1 = aij * s1
    if si > abs(as1):
        alpha = as1 / si
        den = 1.0 + alpha * alpha
        sq = np.sqrt(den)
        w1 = 1.0 / den
        wi = alpha * (s1 / si) / den
        si_new = si * sq
        s1_new = s1 / sq
    else:
        beta = si / as1
        den = 1.0 + beta * beta
        sq = np.sqrt(den)
        w1 = (beta * beta) / den
        wi = (1.0 / aij) / den
        si_new = abs(as1) * sq
        s1_new = (si / abs(aij)) / sq
    for c in range(j, ncols):
        ap = A[p, c]
        ai = A[i, c]
        A[i, c] = ai - aij * ap
        A[p, c] = w1 * ap + wi * ai
    A[i, j] = 0.0
    A[p, j] = 1.0
    mp = mean[p]
    mi = mean[i]
    mean[i] = mi - aij * mp
    mean[p] = w1 * mp + wi * mi
    std[i] = si_new
    std[p] = s1_new


@njit(cache=True)
def _triangularize(A, mean, std, nrows, ncols, npre):
    """Bring a stochastic system to unit upper triangular form in place.

    Rows 0..npre-1 must already be unit upper triangular over columns
    0..npre-1; they serve as pivots eliminating those columns from the
    rows below.  Remaining columns are processed with max-absolute-value
    pivoting among the remaining rows.  Returns True on success, False on
    a numerically singular column.
    """
    for j in range(npre):
        for i in range(npre, nrows):
            if A[i, j] != 0.0:
                _eliminate(A, mean, std, j, i, j, ncols)
    r = npre
    for j in range(npre, ncols):
        if r >= nrows:
            break
        piv = r
        best = abs(A[r, j])
        for i in range(r + 1, nrows):
            v = abs(A[i, j])
            if v > best:
                best = v
                piv = i
        if best == 0.0:
            return False
        if piv != r:
            for c in range(j, ncols):
                tmp = A[r, c]
                A[r, c] = A[piv, c]
                A[piv, c] = tmp
            tmp = mean[r]
            mean[r] = mean[piv]
            mean[piv] = tmp
            tmp = std[r]
            std[r] = std[piv]
            std[piv] = tmp
        pv = A[r, j]
        if pv != 1.0:
            for c in range(j, ncols):
                A[r, c] /= pv
            A[r, j] = 1.0
            mean[r] /= pv
            std[r] /= abs(pv)
        for i in range(r + 1, nrows):
            if A[i, j] != 0.0:
                _eliminate(A, mean, std, r, i, j, ncols)
        r += 1
    return True


@njit(cache=True)
def _householder(gv):
    """Reflection direction u with (I - 2uu'/u'u) g = sig * ||g|| e0.

    Returns (u, u'u, sig, ||g||); a zero g yields u = 0, meaning Q = I.
    """
    d = gv.shape[0]
    u = np.zeros(d)
    gnorm = _stable_norm(gv)
    if gnorm == 0.0:
        return u, 0.0, 1.0, 0.0
    for i in range(d):
        u[i] = gv[i] / gnorm
    sgn = 1.0 if u[0] >= 0.0 else -1.0
    u[0] += sgn
    un2 = 0.0
    for i in range(d):
        un2 += u[i] * u[i]
    return u, un2, -sgn, gnorm


@njit(cache=True)
def _apply_q(u, un2, M, out):
    """out = Q M with Q = I - 2uu'/u'u (u = 0 means Q = I)."""
    d = M.shape[0]
    n = M.shape[1]
    if un2 == 0.0:
        for i in range(d):
            for j in range(n):
                out[i, j] = M[i, j]
        return
    c = 2.0 / un2
    for j in range(n):
        acc = 0.0
        for i in range(d):
            acc += u[i] * M[i, j]
        acc *= c
        for i in range(d):
            out[i, j] = M[i, j] - u[i] * acc


@njit(cache=True)
def _gauss_logpdf(z, m, s):
    r = (z - m) / s
    return -0.5 * (LOG_2PI + 2.0 * np.log(s) + r * r)


@njit(cache=True)
def srif_forward(F, Finv, a, x, g, mu0, s0, wmu, ws, zt, ostd, omask):
    """Forward filtering pass over all observations.

    Parameters: transition F and its inverse, selectors ``a`` (T, d),
    features ``x`` (T, p) (p = 0 disables weight inference), innovation
    vectors ``g`` (>= T-1, d), diagonal priors on the initial state
    (mu0, s0) and the weights (wmu, ws), centred observations ``zt`` with
    stds ``ostd``, and mask ``omask`` (0 = missing).

    Returns per-step joint messages (R, m, s) for q_{t+1}(l_t, w), the
    conditionals of each innovation given the next state (k, q, m_eps,
    v_eps), the one-step-ahead predictive moments, the accumulated
    marginal log likelihood, and a success flag.
    """
    T = a.shape[0]
    d = a.shape[1]
    p = x.shape[1]
    J = d + p
    nmax = 2 * d + p + 1

    R = np.zeros((T, J, J))
    m = np.zeros((T, J))
    s = np.zeros((T, J))
    Tm1 = T - 1 if T > 1 else 0
    k = np.zeros((Tm1, d))
    q = np.zeros((Tm1, p))
    m_eps = np.zeros(Tm1)
    v_eps = np.ones(Tm1)
    pred_mean = np.zeros(T)
    pred_std = np.zeros(T)
    loglik = 0.0

    A = np.zeros((nmax, nmax))
    mean = np.zeros(nmax)
    std = np.zeros(nmax)
    QF = np.zeros((d, d))
    Q = np.zeros((d, d))
    eye = np.eye(d)

    # First observation conditions the prior directly.
    if omask[0] != 0:
        n = J + 1
        for i in range(n):
            mean[i] = 0.0
            std[i] = 0.0
            for j in range(n):
                A[i, j] = 0.0
        for i in range(d):
            A[i, i] = 1.0
            mean[i] = mu0[i]
            std[i] = s0[i]
        for i in range(p):
            A[d + i, d + i] = 1.0
            mean[d + i] = wmu[i]
            std[d + i] = ws[i]
        for j in range(d):
            A[J, j] = -a[0, j]
        for j in range(p):
            A[J, d + j] = -x[0, j]
        A[J, J] = 1.0
        mean[J] = 0.0
        std[J] = ostd[0]
        if not _triangularize(A, mean, std, n, n, J):
            return R, m, s, k, q, m_eps, v_eps, pred_mean, pred_std, loglik, 1
        pred_mean[0] = mean[J]
        pred_std[0] = std[J]
        loglik += _gauss_logpdf(zt[0], mean[J], std[J])
        for i in range(J):
            for j in range(J):
                R[0, i, j] = A[i, j]
            m[0, i] = mean[i] - zt[0] * A[i, J]
            s[0, i] = std[i]
    else:
        for i in range(d):
            R[0, i, i] = 1.0
            m[0, i] = mu0[i]
            s[0, i] = s0[i]
        for i in range(p):
            R[0, d + i, d + i] = 1.0
            m[0, d + i] = wmu[i]
            s[0, d + i] = ws[i]

    for t in range(1, T):
        # Conditional of eps_t given the next state, from q_t(l_{t-1} | w).
        gv = g[t - 1]
        hg = Finv @ gv
        htil = np.zeros(d)
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += R[t - 1, i, j] * hg[j]
            htil[i] = acc
        u_w = np.zeros(d)
        ssum = 0.0
        for i in range(d):
            if htil[i] != 0.0:
                ui = htil[i] / (s[t - 1, i] * s[t - 1, i])
                u_w[i] = ui
                ssum += htil[i] * ui
        ve = 1.0 / (1.0 + ssum)
        v_eps[t - 1] = ve
        # k = ve * Finv' R_l' u,  q = ve * S' u,  m_eps = -ve * m_l' u
        tmp = np.zeros(d)
        for j in range(d):
            acc = 0.0
            for i in range(d):
                acc += R[t - 1, i, j] * u_w[i]
            tmp[j] = acc
        me = 0.0
        for i in range(d):
            me -= m[t - 1, i] * u_w[i]
        m_eps[t - 1] = ve * me
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += Finv[j, i] * tmp[j]
            k[t - 1, i] = ve * acc
        for jw in range(p):
            acc = 0.0
            for i in range(d):
                acc += R[t - 1, i, d + jw] * u_w[i]
            q[t - 1, jw] = ve * acc

        # Assemble the forward system over [l_{t-1}, l_t, w, ztilde].
        hu, hun2, hsig, gnorm = _householder(gv)
        _apply_q(hu, hun2, F, QF)
        _apply_q(hu, hun2, eye, Q)
        obs = omask[t] != 0
        n = 2 * d + p + 1 if obs else 2 * d + p
        ncol = n
        for i in range(n):
            mean[i] = 0.0
            std[i] = 0.0
            for j in range(ncol):
                A[i, j] = 0.0
        for i in range(d):
            for j in range(d):
                A[i, j] = R[t - 1, i, j]
                A[d + i, j] = -QF[i, j]
                A[d + i, d + j] = Q[i, j]
            for j in range(p):
                A[i, 2 * d + j] = R[t - 1, i, d + j]
            mean[i] = m[t - 1, i]
            std[i] = s[t - 1, i]
        std[d] = gnorm
        for i in range(p):
            for j in range(p):
                A[2 * d + i, 2 * d + j] = R[t - 1, d + i, d + j]
            mean[2 * d + i] = m[t - 1, d + i]
            std[2 * d + i] = s[t - 1, d + i]
        if obs:
            r_obs = 2 * d + p
            for j in range(d):
                A[r_obs, d + j] = -a[t, j]
            for j in range(p):
                A[r_obs, 2 * d + j] = -x[t, j]
            A[r_obs, r_obs] = 1.0
            std[r_obs] = ostd[t]
        if not _triangularize(A, mean, std, n, ncol, d):
            return R, m, s, k, q, m_eps, v_eps, pred_mean, pred_std, loglik, t + 1
        if obs:
            zcol = 2 * d + p
            pred_mean[t] = mean[zcol]
            pred_std[t] = std[zcol]
            loglik += _gauss_logpdf(zt[t], mean[zcol], std[zcol])
            for i in range(J):
                m[t, i] = mean[d + i] - zt[t] * A[d + i, zcol]
        else:
            for i in range(J):
                m[t, i] = mean[d + i]
        for i in range(J):
            s[t, i] = std[d + i]
            for j in range(J):
                R[t, i, j] = A[d + i, d + j]

    return R, m, s, k, q, m_eps, v_eps, pred_mean, pred_std, loglik, 0


@njit(cache=True)
def srif_backward(F, Finv, a, x, g, Rf, mf, sf, kf, qf, m_eps, v_eps):
    """Backward smoothing pass.

    Consumes the forward messages and innovation conditionals, produces
    smoothed joint representations per step plus the posterior summaries
    used everywhere else: E/Var of each innovation, E/Var of y_t (without
    the deterministic offset), and mean/diagonal covariance of the initial
    joint state (l_0, w).
    """
    T = a.shape[0]
    d = a.shape[1]
    p = x.shape[1]
    J = d + p
    nmax = 2 * d + p

    Rs = np.zeros((T, J, J))
    ms = np.zeros((T, J))
    ss = np.zeros((T, J))
    Tm1 = T - 1 if T > 1 else 0
    eps_mean = np.zeros(Tm1)
    eps_var = np.zeros(Tm1)
    y_mean = np.zeros(T)
    y_std = np.zeros(T)
    j0_mean = np.zeros(J)
    j0_cov_diag = np.zeros(J)

    for i in range(J):
        ms[T - 1, i] = mf[T - 1, i]
        ss[T - 1, i] = sf[T - 1, i]
        for j in range(J):
            Rs[T - 1, i, j] = Rf[T - 1, i, j]

    A = np.zeros((nmax, nmax))
    mean = np.zeros(nmax)
    std = np.zeros(nmax)
    QM = np.zeros((d, d))
    QF = np.zeros((d, d))
    IK = np.zeros((d, d))
    kq = np.zeros(J)

    for t in range(T - 1, 0, -1):
        # Innovation stats from the smoothed state l_t.
        lw = solve_unit_upper(Rs[t], ms[t])
        acc = m_eps[t - 1]
        for i in range(d):
            acc += kf[t - 1, i] * lw[i]
        for i in range(p):
            acc += qf[t - 1, i] * lw[d + i]
        eps_mean[t - 1] = acc
        for i in range(d):
            kq[i] = kf[t - 1, i]
        for i in range(p):
            kq[d + i] = qf[t - 1, i]
        ktil = solve_unit_upper_t(Rs[t], kq)
        for i in range(J):
            ktil[i] *= ss[t, i]
        vnorm = _stable_norm(ktil)
        eps_var[t - 1] = vnorm * vnorm + v_eps[t - 1]

        gv = g[t - 1]
        hu, hun2, hsig, gnorm = _householder(gv)
        for i in range(d):
            for j in range(d):
                IK[i, j] = (1.0 if i == j else 0.0) - gv[i] * kf[t - 1, j]
        _apply_q(hu, hun2, IK, QM)
        _apply_q(hu, hun2, F, QF)

        n = 2 * d + p
        for i in range(n):
            mean[i] = 0.0
            std[i] = 0.0
            for j in range(n):
                A[i, j] = 0.0
        for i in range(d):
            for j in range(d):
                A[i, j] = Rs[t, i, j]
                A[d + i, j] = QM[i, j]
                A[d + i, d + j] = -QF[i, j]
            for j in range(p):
                A[i, 2 * d + j] = Rs[t, i, d + j]
            mean[i] = ms[t, i]
            std[i] = ss[t, i]
        for j in range(p):
            A[d, 2 * d + j] = -hsig * gnorm * qf[t - 1, j]
        mean[d] = hsig * gnorm * m_eps[t - 1]
        std[d] = gnorm * np.sqrt(v_eps[t - 1])
        for i in range(p):
            for j in range(p):
                A[2 * d + i, 2 * d + j] = Rs[t, d + i, d + j]
            mean[2 * d + i] = ms[t, d + i]
            std[2 * d + i] = ss[t, d + i]
        if not _triangularize(A, mean, std, n, n, d):
            return (Rs, ms, ss, eps_mean, eps_var, y_mean, y_std,
                    j0_mean, j0_cov_diag, t)
        for i in range(J):
            ms[t - 1, i] = mean[d + i]
            ss[t - 1, i] = std[d + i]
            for j in range(J):
                Rs[t - 1, i, j] = A[d + i, d + j]

    # Marginal moments of y_t from the smoothed state it reads.
    av = np.zeros(J)
    for t in range(T):
        for i in range(d):
            av[i] = a[t, i]
        for i in range(p):
            av[d + i] = x[t, i]
        atil = solve_unit_upper_t(Rs[t], av)
        acc = 0.0
        for i in range(J):
            acc += atil[i] * ms[t, i]
            atil[i] *= ss[t, i]
        y_mean[t] = acc
        y_std[t] = _stable_norm(atil)

    j0 = solve_unit_upper(Rs[0], ms[0])
    for i in range(J):
        j0_mean[i] = j0[i]
    # Diagonal of R^{-1} diag(s^2) R^{-T} column by column.
    col = np.zeros(J)
    for jcol in range(J):
        for i in range(J):
            col[i] = 0.0
        col[jcol] = ss[0, jcol]
        w = solve_unit_upper(Rs[0], col)
        for i in range(J):
            j0_cov_diag[i] += w[i] * w[i]

    return Rs, ms, ss, eps_mean, eps_var, y_mean, y_std, j0_mean, j0_cov_diag, 0


@njit(cache=True)
def forward_map(F, a, g, eps, l0, b):
    """Latent-path image y(s): the deterministic forward recursion."""
    T = a.shape[0]
    d = a.shape[1]
    y = np.zeros(T)
    l = l0.copy()
    acc = b[0]
    for i in range(d):
        acc += a[0, i] * l[i]
    y[0] = acc
    lnew = np.zeros(d)
    for t in range(1, T):
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += F[i, j] * l[j]
            lnew[i] = s + g[t - 1, i] * eps[t - 1]
        for i in range(d):
            l[i] = lnew[i]
        acc = b[t]
        for i in range(d):
            acc += a[t, i] * l[i]
        y[t] = acc
    return y


@njit(cache=True)
def sensitivity_map(F, a, gtilde, eps):
    """d y_t / d theta for an innovation strength with unit shape gtilde.

    Runs the forward recursion on the derivative state, which starts at
    zero (the initial state does not depend on the strengths).
    """
    T = a.shape[0]
    d = a.shape[1]
    dy = np.zeros(T)
    D = np.zeros(d)
    Dn = np.zeros(d)
    for t in range(1, T):
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += F[i, j] * D[j]
            Dn[i] = s + gtilde[t - 1, i] * eps[t - 1]
        for i in range(d):
            D[i] = Dn[i]
        acc = 0.0
        for i in range(d):
            acc += a[t, i] * D[i]
        dy[t] = acc
    return dy
