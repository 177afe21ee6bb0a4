"""Compiled inner loops for region-graph message passing and its linearization.

All tables live in flat float arrays with per-region offsets; ``proj`` maps
each outer-region configuration to the configuration of the inner region on
the other end of an edge.  Log-domain throughout; ``-inf`` marks zero weight.
"""
import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def _lse(v, lo, hi):
    m = NEG_INF
    for x in range(lo, hi):
        if v[x] > m:
            m = v[x]
    if m == NEG_INF:
        return NEG_INF
    s = 0.0
    for x in range(lo, hi):
        s += np.exp(v[x] - m)
    return m + np.log(s)


@njit(cache=True)
def _region_logits(a, base, lmu_ba, alpha_ptr, alpha_edges, msg_off, proj, proj_off,
                   out_off, tilt, s):
    lo = out_off[a]
    n = out_off[a + 1] - lo
    for x in range(n):
        s[x] = base[lo + x] + tilt[lo + x]
    for p in range(alpha_ptr[a], alpha_ptr[a + 1]):
        e = alpha_edges[p]
        mo = msg_off[e]
        po = proj_off[e]
        for x in range(n):
            s[x] += lmu_ba[mo + proj[po + x]]


@njit(cache=True)
def _softmax_into(s, n, q):
    m = NEG_INF
    for x in range(n):
        if s[x] > m:
            m = s[x]
    tot = 0.0
    for x in range(n):
        if s[x] == NEG_INF:
            q[x] = 0.0
        else:
            q[x] = np.exp(s[x] - m)
            tot += q[x]
    for x in range(n):
        q[x] /= tot
    return m + np.log(tot)


@njit(cache=True)
def solve_region(a, base, lmu_ba, alpha_ptr, alpha_edges, msg_off, proj, proj_off,
                 out_off, tilt, stats, stat_ptr, stat_off, bmat, bmat_off, means,
                 lq_out, tol, cap):
    """Self-consistent region belief; returns iterations used (negative on failure).

    The belief is softmax(s0 + theta . f) with theta = B m and m = E_q[f], where
    s0 already holds the potential, the fixed tilt and incoming messages.
    """
    lo = out_off[a]
    n = out_off[a + 1] - lo
    s0 = np.empty(n)
    _region_logits(a, base, lmu_ba, alpha_ptr, alpha_edges, msg_off, proj, proj_off,
                   out_off, tilt, s0)
    K = stat_ptr[a + 1] - stat_ptr[a]
    q = np.empty(n)
    if K == 0:
        lz = _softmax_into(s0, n, q)
        for x in range(n):
            lq_out[lo + x] = s0[x] - lz if q[x] > 0 else NEG_INF
        return 0
    so = stat_off[a]
    bo = bmat_off[a]
    mo = stat_ptr[a]
    m = np.empty(K)
    for k in range(K):
        m[k] = means[mo + k]
    s = np.empty(n)
    theta = np.empty(K)
    it = 0
    ok = False
    # plain fixed-point iteration
    while it < cap:
        it += 1
        for k in range(K):
            t = 0.0
            for l in range(K):
                t += bmat[bo + k * K + l] * m[l]
            theta[k] = t
        for x in range(n):
            v = s0[x]
            for k in range(K):
                v += theta[k] * stats[so + k * n + x]
            s[x] = v
        _softmax_into(s, n, q)
        diff = 0.0
        for k in range(K):
            t = 0.0
            for x in range(n):
                t += q[x] * stats[so + k * n + x]
            d = abs(t - m[k])
            if d > diff:
                diff = d
            m[k] = t
        if diff <= tol:
            ok = True
            break
    if not ok:
        # Newton on G(m) = E_q(m)[f] - m with Jacobian V B - I
        for k in range(K):
            m[k] = means[mo + k]
        for nit in range(100):
            for k in range(K):
                t = 0.0
                for l in range(K):
                    t += bmat[bo + k * K + l] * m[l]
                theta[k] = t
            for x in range(n):
                v = s0[x]
                for k in range(K):
                    v += theta[k] * stats[so + k * n + x]
                s[x] = v
            _softmax_into(s, n, q)
            Ef = np.zeros(K)
            for k in range(K):
                for x in range(n):
                    Ef[k] += q[x] * stats[so + k * n + x]
            G = Ef - m
            gn = np.max(np.abs(G))
            if gn <= tol:
                ok = True
                break
            V = np.zeros((K, K))
            for k in range(K):
                for l in range(K):
                    t = 0.0
                    for x in range(n):
                        t += q[x] * (stats[so + k * n + x] - Ef[k]) * (stats[so + l * n + x] - Ef[l])
                    V[k, l] = t
            Bm = np.empty((K, K))
            for k in range(K):
                for l in range(K):
                    Bm[k, l] = bmat[bo + k * K + l]
            Jac = V @ Bm - np.eye(K)
            step = np.linalg.solve(Jac, -G)
            m = m + step
            it += 1
    for k in range(K):
        means[mo + k] = m[k]
    # final belief from the converged means
    for k in range(K):
        t = 0.0
        for l in range(K):
            t += bmat[bo + k * K + l] * m[l]
        theta[k] = t
    for x in range(n):
        v = s0[x]
        for k in range(K):
            v += theta[k] * stats[so + k * n + x]
        s[x] = v
    lz = _softmax_into(s, n, q)
    for x in range(n):
        lq_out[lo + x] = s[x] - lz if q[x] > 0 else NEG_INF
    if not ok:
        return -it
    return it


@njit(cache=True)
def refresh_all(n_outer, base, lmu_ba, alpha_ptr, alpha_edges, msg_off, proj, proj_off,
                out_off, tilt, stats, stat_ptr, stat_off, bmat, bmat_off, means, lq_out,
                tol, cap):
    bad = 0
    for a in range(n_outer):
        r = solve_region(a, base, lmu_ba, alpha_ptr, alpha_edges, msg_off, proj, proj_off,
                         out_off, tilt, stats, stat_ptr, stat_off, bmat, bmat_off, means,
                         lq_out, tol, cap)
        if r < 0:
            bad += 1
    return bad


@njit(cache=True)
def _log_marginal(a, e, lq_out, out_off, proj, proj_off, nb, buf):
    lo = out_off[a]
    n = out_off[a + 1] - lo
    po = proj_off[e]
    for y in range(nb):
        buf[y] = 0.0
    for x in range(n):
        v = lq_out[lo + x]
        if v != NEG_INF:
            buf[proj[po + x]] += np.exp(v)
    for y in range(nb):
        buf[y] = np.log(buf[y]) if buf[y] > 0 else NEG_INF


@njit(cache=True)
def clbp_sweeps(nsweeps, n_inner, base, lmu_ba, lmu_ab, lq_in, in_off, beta_ptr,
                beta_edges, edge_alpha, expo, alpha_ptr, alpha_edges, msg_off, proj,
                proj_off, out_off, tilt, stats, stat_ptr, stat_off, bmat, bmat_off, means,
                lq_out, damping, tol_inner, cap_inner, resid):
    """Run sequential sweeps over inner regions; fills ``resid`` per sweep.

    Returns (status, inner_failures): status 0 ok, 1 NaN encountered (the
    offending outer region index is stored in resid[-1]).
    """
    maxn = 0
    for b in range(n_inner):
        nb = in_off[b + 1] - in_off[b]
        if nb > maxn:
            maxn = nb
    buf = np.empty(maxn)
    inner_fail = 0
    for sw in range(nsweeps):
        change = 0.0
        for b in range(n_inner):
            ib = in_off[b]
            nb = in_off[b + 1] - ib
            # outer -> inner messages from current outer beliefs
            for p in range(beta_ptr[b], beta_ptr[b + 1]):
                e = beta_edges[p]
                a = edge_alpha[e]
                _log_marginal(a, e, lq_out, out_off, proj, proj_off, nb, buf)
                mo = msg_off[e]
                for y in range(nb):
                    if buf[y] == NEG_INF:
                        lmu_ab[mo + y] = NEG_INF
                    else:
                        lmu_ab[mo + y] = buf[y] - lmu_ba[mo + y]
            # inner belief
            for y in range(nb):
                t = 0.0
                for p in range(beta_ptr[b], beta_ptr[b + 1]):
                    t += lmu_ab[msg_off[beta_edges[p]] + y]
                lq_in[ib + y] = t * expo[b] if t != NEG_INF else NEG_INF
            lz = _lse(lq_in, ib, ib + nb)
            for y in range(nb):
                lq_in[ib + y] -= lz
            # inner -> outer messages and outer beliefs
            for p in range(beta_ptr[b], beta_ptr[b + 1]):
                e = beta_edges[p]
                a = edge_alpha[e]
                mo = msg_off[e]
                for y in range(nb):
                    if expo[b] == 1.0:
                        t = 0.0
                        for p2 in range(beta_ptr[b], beta_ptr[b + 1]):
                            if p2 != p:
                                t += lmu_ab[msg_off[beta_edges[p2]] + y]
                    else:
                        if lq_in[ib + y] == NEG_INF:
                            t = NEG_INF
                        else:
                            t = lq_in[ib + y] - lmu_ab[mo + y]
                    buf[y] = t
                lz = _lse(buf, 0, nb)
                for y in range(nb):
                    new = buf[y] - lz
                    old = lmu_ba[mo + y]
                    if damping > 0.0 and new != NEG_INF and old != NEG_INF:
                        new = (1.0 - damping) * new + damping * old
                    if new != new:
                        resid[-1] = a
                        return 1, inner_fail
                    if new == NEG_INF and old == NEG_INF:
                        d = 0.0
                    elif new == NEG_INF or old == NEG_INF:
                        d = np.inf
                    else:
                        d = abs(new - old)
                    if d > change:
                        change = d
                    lmu_ba[mo + y] = new
                r = solve_region(a, base, lmu_ba, alpha_ptr, alpha_edges, msg_off, proj,
                                 proj_off, out_off, tilt, stats, stat_ptr, stat_off, bmat,
                                 bmat_off, means, lq_out, tol_inner, cap_inner)
                if r < 0:
                    inner_fail += 1
                lo = out_off[a]
                for x in range(out_off[a + 1] - lo):
                    if lq_out[lo + x] != lq_out[lo + x]:
                        resid[-1] = a
                        return 1, inner_fail
        resid[sw] = change
    return 0, inner_fail


# ------------------------------------------------------------ linear response


@njit(cache=True)
def lin_prepare(n_outer, lq_out, out_off, stats, stat_ptr, stat_off, bmat, bmat_off,
                minv, minv_off):
    """Per region (I - V B)^{-1} M-matrix used by the linearized region update."""
    for a in range(n_outer):
        K = stat_ptr[a + 1] - stat_ptr[a]
        if K == 0:
            continue
        lo = out_off[a]
        n = out_off[a + 1] - lo
        so = stat_off[a]
        bo = bmat_off[a]
        Ef = np.zeros(K)
        for k in range(K):
            for x in range(n):
                if lq_out[lo + x] != NEG_INF:
                    Ef[k] += np.exp(lq_out[lo + x]) * stats[so + k * n + x]
        V = np.zeros((K, K))
        for k in range(K):
            for l in range(K):
                t = 0.0
                for x in range(n):
                    if lq_out[lo + x] != NEG_INF:
                        t += np.exp(lq_out[lo + x]) * (stats[so + k * n + x] - Ef[k]) * (
                            stats[so + l * n + x] - Ef[l])
                V[k, l] = t
        Bm = np.empty((K, K))
        for k in range(K):
            for l in range(K):
                Bm[k, l] = bmat[bo + k * K + l]
        Mi = np.linalg.inv(np.eye(K) - V @ Bm)
        # store (B (I - V B)^{-1}) so that dtheta = W r directly
        W = Bm @ Mi
        mo = minv_off[a]
        for k in range(K):
            for l in range(K):
                minv[mo + k * K + l] = W[k, l]


@njit(cache=True)
def lin_region(a, t, dmu_ba, dq_out, src, q_out, alpha_ptr, alpha_edges, msg_off, proj,
               proj_off, out_off, stats, stat_ptr, stat_off, minv, minv_off, r, cv):
    lo = out_off[a]
    n = out_off[a + 1] - lo
    for x in range(n):
        r[x] = src[t, lo + x]
    for p in range(alpha_ptr[a], alpha_ptr[a + 1]):
        e = alpha_edges[p]
        mo = msg_off[e]
        po = proj_off[e]
        for x in range(n):
            r[x] += dmu_ba[t, mo + proj[po + x]]
    K = stat_ptr[a + 1] - stat_ptr[a]
    if K > 0:
        so = stat_off[a]
        wo = minv_off[a]
        Er = 0.0
        for x in range(n):
            Er += q_out[lo + x] * r[x]
        # Cov(f_k, r) needs no centring of f since r - E r has zero mean
        for k in range(K):
            t2 = 0.0
            for x in range(n):
                t2 += q_out[lo + x] * stats[so + k * n + x] * (r[x] - Er)
            cv[k] = t2
        for k in range(K):
            dth = 0.0
            for l in range(K):
                dth += minv[wo + k * K + l] * cv[l]
            for x in range(n):
                r[x] += dth * stats[so + k * n + x]
    mean = 0.0
    for x in range(n):
        mean += q_out[lo + x] * r[x]
    for x in range(n):
        dq_out[t, lo + x] = r[x] - mean


@njit(cache=True)
def _max_k(stat_ptr):
    m = 1
    for a in range(len(stat_ptr) - 1):
        if stat_ptr[a + 1] - stat_ptr[a] > m:
            m = stat_ptr[a + 1] - stat_ptr[a]
    return m


@njit(cache=True)
def lin_refresh_all(n_outer, ntarg, dmu_ba, dq_out, src, q_out, alpha_ptr, alpha_edges,
                    msg_off, proj, proj_off, out_off, stats, stat_ptr, stat_off, minv,
                    minv_off):
    maxn = 0
    for a in range(n_outer):
        if out_off[a + 1] - out_off[a] > maxn:
            maxn = out_off[a + 1] - out_off[a]
    r = np.empty(maxn)
    cv = np.empty(_max_k(stat_ptr))
    for t in range(ntarg):
        for a in range(n_outer):
            lin_region(a, t, dmu_ba, dq_out, src, q_out, alpha_ptr, alpha_edges, msg_off,
                       proj, proj_off, out_off, stats, stat_ptr, stat_off, minv, minv_off, r,
                       cv)


@njit(cache=True)
def lin_sweeps(nsweeps, ntarg, n_inner, dmu_ba, dmu_ab, dq_in, dq_out, src, q_out, q_in,
               in_off, beta_ptr, beta_edges, edge_alpha, expo, alpha_ptr, alpha_edges,
               msg_off, proj, proj_off, out_off, stats, stat_ptr, stat_off, minv, minv_off,
               damping, tol, resid):
    """Linearized sweeps for every target column; ``resid`` gets max change per sweep.

    Returns the number of sweeps run (stops once the change is <= tol), or -1 on NaN.
    """
    maxn = 0
    for a in range(len(out_off) - 1):
        if out_off[a + 1] - out_off[a] > maxn:
            maxn = out_off[a + 1] - out_off[a]
    r = np.empty(maxn)
    cv = np.empty(_max_k(stat_ptr))
    maxb = 0
    for b in range(n_inner):
        if in_off[b + 1] - in_off[b] > maxb:
            maxb = in_off[b + 1] - in_off[b]
    buf = np.empty(maxb)
    for sw in range(nsweeps):
        change = 0.0
        for b in range(n_inner):
            ib = in_off[b]
            nb = in_off[b + 1] - ib
            for t in range(ntarg):
                for p in range(beta_ptr[b], beta_ptr[b + 1]):
                    e = beta_edges[p]
                    a = edge_alpha[e]
                    lo = out_off[a]
                    n = out_off[a + 1] - lo
                    po = proj_off[e]
                    mo = msg_off[e]
                    for y in range(nb):
                        buf[y] = 0.0
                    for x in range(n):
                        buf[proj[po + x]] += q_out[lo + x] * dq_out[t, lo + x]
                    mean = 0.0
                    for y in range(nb):
                        qb = q_in[ib + y]
                        val = buf[y] / qb if qb > 0 else 0.0
                        val -= dmu_ba[t, mo + y]
                        dmu_ab[t, mo + y] = val
                        mean += qb * val
                    # gauge: keep messages centred so constants cannot circulate
                    for y in range(nb):
                        dmu_ab[t, mo + y] -= mean
                mean = 0.0
                for y in range(nb):
                    s = 0.0
                    for p in range(beta_ptr[b], beta_ptr[b + 1]):
                        s += dmu_ab[t, msg_off[beta_edges[p]] + y]
                    s *= expo[b]
                    dq_in[t, ib + y] = s
                    mean += q_in[ib + y] * s
                for y in range(nb):
                    dq_in[t, ib + y] -= mean
                for p in range(beta_ptr[b], beta_ptr[b + 1]):
                    e = beta_edges[p]
                    a = edge_alpha[e]
                    mo = msg_off[e]
                    for y in range(nb):
                        if expo[b] == 1.0:
                            s = 0.0
                            for p2 in range(beta_ptr[b], beta_ptr[b + 1]):
                                if p2 != p:
                                    s += dmu_ab[t, msg_off[beta_edges[p2]] + y]
                        else:
                            s = dq_in[t, ib + y] - dmu_ab[t, mo + y]
                        old = dmu_ba[t, mo + y]
                        if damping > 0.0:
                            s = (1.0 - damping) * s + damping * old
                        d = abs(s - old)
                        if d > change:
                            change = d
                        dmu_ba[t, mo + y] = s
                    lin_region(a, t, dmu_ba, dq_out, src, q_out, alpha_ptr, alpha_edges,
                               msg_off, proj, proj_off, out_off, stats, stat_ptr, stat_off,
                               minv, minv_off, r, cv)
        resid[sw] = change
        if change != change:
            return -1
        if change <= tol:
            return sw + 1
    return nsweeps


@njit(cache=True)
def lin_inner_beliefs(ntarg, n_inner, dmu_ab, dq_in, dq_out, q_out, q_in, in_off, beta_ptr,
                      beta_edges, edge_alpha, expo, msg_off, proj, proj_off, out_off):
    """Inner-region responses implied by the current outer responses."""
    maxb = 0
    for b in range(n_inner):
        if in_off[b + 1] - in_off[b] > maxb:
            maxb = in_off[b + 1] - in_off[b]
    buf = np.empty(maxb)
    for t in range(ntarg):
        for b in range(n_inner):
            ib = in_off[b]
            nb = in_off[b + 1] - ib
            e = beta_edges[beta_ptr[b]]
            a = edge_alpha[e]
            lo = out_off[a]
            n = out_off[a + 1] - lo
            po = proj_off[e]
            for y in range(nb):
                buf[y] = 0.0
            for x in range(n):
                buf[proj[po + x]] += q_out[lo + x] * dq_out[t, lo + x]
            for y in range(nb):
                qb = q_in[ib + y]
                dq_in[t, ib + y] = buf[y] / qb if qb > 0 else 0.0


# ------------------------------------------------------------ double loop


@njit(cache=True)
def _dl_logits(a, bk, gamma, alpha_ptr, alpha_edges, msg_off, proj, proj_off, out_off,
               skip, s):
    lo = out_off[a]
    n = out_off[a + 1] - lo
    for x in range(n):
        s[x] = bk[lo + x]
    for p in range(alpha_ptr[a], alpha_ptr[a + 1]):
        e = alpha_edges[p]
        if e == skip:
            continue
        mo = msg_off[e]
        po = proj_off[e]
        for x in range(n):
            s[x] += gamma[mo + proj[po + x]]


@njit(cache=True)
def _dl_marg(a, e, s, n, proj, proj_off, nb, out):
    # log of the (unnormalized) marginal of exp(s) on the inner side of edge e
    m = NEG_INF
    for x in range(n):
        if s[x] > m:
            m = s[x]
    for y in range(nb):
        out[y] = 0.0
    po = proj_off[e]
    for x in range(n):
        if s[x] != NEG_INF:
            out[proj[po + x]] += np.exp(s[x] - m)
    for y in range(nb):
        out[y] = np.log(out[y]) + m if out[y] > 0 else NEG_INF


@njit(cache=True)
def dl_inner(n_outer, n_inner, bk, gamma, kap_edge, ell, ctil, in_off, beta_ptr, beta_edges,
             edge_alpha, edge_beta, alpha_ptr, alpha_edges, msg_off, proj, proj_off, out_off, lq_out,
             lq_in, tol, max_sweeps):
    """Block coordinate ascent for the convex inner problem of the double loop.

    Outer beliefs are exp(bk + sum of scaled consistency multipliers).  Each
    block update makes every outer belief around one inner region agree with
    the closed-form inner belief.  Returns (ok, sweeps).
    """
    maxn = 0
    for a in range(n_outer):
        if out_off[a + 1] - out_off[a] > maxn:
            maxn = out_off[a + 1] - out_off[a]
    maxb = 0
    for b in range(n_inner):
        if in_off[b + 1] - in_off[b] > maxb:
            maxb = in_off[b + 1] - in_off[b]
    s = np.empty(maxn)
    nbr = 0
    for b in range(n_inner):
        if beta_ptr[b + 1] - beta_ptr[b] > nbr:
            nbr = beta_ptr[b + 1] - beta_ptr[b]
    logr = np.empty((nbr, maxb))
    tmp = np.empty(maxb)
    ok = False
    sw = 0
    for sw in range(1, max_sweeps + 1):
        for b in range(n_inner):
            ib = in_off[b]
            nb = in_off[b + 1] - ib
            ksum = ctil[b]
            for y in range(nb):
                tmp[y] = ell[ib + y]
            for p in range(beta_ptr[b], beta_ptr[b + 1]):
                e = beta_edges[p]
                a = edge_alpha[e]
                n = out_off[a + 1] - out_off[a]
                _dl_logits(a, bk, gamma, alpha_ptr, alpha_edges, msg_off, proj, proj_off,
                           out_off, e, s)
                r = logr[p - beta_ptr[b]]
                _dl_marg(a, e, s, n, proj, proj_off, nb, r)
                kap = kap_edge[e]
                ksum += kap
                for y in range(nb):
                    if r[y] == NEG_INF:
                        tmp[y] = NEG_INF
                    elif tmp[y] != NEG_INF:
                        tmp[y] += kap * r[y]
            for y in range(nb):
                if tmp[y] != NEG_INF:
                    tmp[y] /= ksum
            lz = _lse(tmp, 0, nb)
            for y in range(nb):
                lq_in[ib + y] = tmp[y] - lz
            for p in range(beta_ptr[b], beta_ptr[b + 1]):
                e = beta_edges[p]
                mo = msg_off[e]
                r = logr[p - beta_ptr[b]]
                for y in range(nb):
                    if r[y] == NEG_INF or lq_in[ib + y] == NEG_INF:
                        gamma[mo + y] = 0.0
                    else:
                        gamma[mo + y] = lq_in[ib + y] - r[y]
        # consistency check over all edges
        worst = 0.0
        for a in range(n_outer):
            lo = out_off[a]
            n = out_off[a + 1] - lo
            _dl_logits(a, bk, gamma, alpha_ptr, alpha_edges, msg_off, proj, proj_off,
                       out_off, -1, s)
            lz = _lse(s, 0, n)
            for x in range(n):
                lq_out[lo + x] = s[x] - lz
            for p in range(alpha_ptr[a], alpha_ptr[a + 1]):
                e = alpha_edges[p]
                bb = edge_beta[e]
                ib = in_off[bb]
                nb = in_off[bb + 1] - ib
                for y in range(nb):
                    tmp[y] = 0.0
                po = proj_off[e]
                for x in range(n):
                    if lq_out[lo + x] != NEG_INF:
                        tmp[proj[po + x]] += np.exp(lq_out[lo + x])
                for y in range(nb):
                    d = abs(tmp[y] - np.exp(lq_in[ib + y]))
                    if d > worst:
                        worst = d
        if worst <= tol:
            ok = True
            break
    return ok, sw



# ------------------------------------------------------------ cavity violation


@njit(cache=True)
def _cavity_means(s, F, B, m0, tol, cap):
    K, n = F.shape
    m = m0.copy()
    q = np.empty(n)
    t = np.empty(n)

    def belief(m):
        bm = B @ m
        for x in range(n):
            acc = s[x]
            for k in range(K):
                acc += bm[k] * F[k, x]
            t[x] = acc
        mx = t.max()
        tot = 0.0
        for x in range(n):
            q[x] = np.exp(t[x] - mx)
            tot += q[x]
        q[:] /= tot
        return F @ q

    for _ in range(cap):
        mn = belief(m)
        if np.max(np.abs(mn - m)) <= tol:
            return q.copy(), mn
        m = mn
    eye = np.eye(K)
    for _ in range(100):
        Ef = belief(m)
        G = Ef - m
        if np.max(np.abs(G)) <= tol:
            break
        Fc = F - Ef.reshape(K, 1)
        V = (Fc * q) @ Fc.T
        m = m - np.linalg.solve(V @ B - eye, G)
    mn = belief(m)
    return q.copy(), mn


@njit(cache=True)
def cavity_violation(s0, F, ck, cl, lam, m0, rho, want_jac, tol, cap):
    """Local violations of one region and their derivative in its multipliers.

    ``F`` is (K, n), ``rho`` is (nc, n); returns (delta, J) with J empty
    unless ``want_jac``.
    """
    K, n = F.shape
    nc = lam.size
    B = np.zeros((K, K))
    s = s0.copy()
    for c in range(nc):
        B[ck[c], cl[c]] += lam[c]
        B[cl[c], ck[c]] += lam[c]
        for x in range(n):
            s[x] -= lam[c] * F[ck[c], x] * F[cl[c], x]
    q, m = _cavity_means(s, F, B, m0, tol, cap)
    Fc = F - m.reshape(K, 1)
    Fq = Fc * q
    V = Fq @ Fc.T
    Minv = np.linalg.inv(np.eye(K) - V @ B)
    rc = rho - (rho @ q).reshape(nc, 1)
    cov_r = (rc * q) @ Fc.T
    dm = cov_r @ Minv.T
    graw = rho + (dm @ B.T) @ F
    Fk = np.empty((nc, n))
    wl = np.empty((nc, n))
    for c in range(nc):
        Fk[c] = Fc[ck[c]]
        wl[c] = Fc[cl[c]]
    chi = np.sum(graw * wl * q, axis=1)
    C = np.sum(Fk * wl * q, axis=1)
    delta = C - chi
    J = np.zeros((nc, nc))
    if not want_jac:
        return delta, J
    gc = graw - (graw @ q).reshape(nc, 1)
    for d in range(nc):
        Bd = np.zeros((K, K))
        Bd[ck[d], cl[d]] += 1.0
        Bd[cl[d], ck[d]] += 1.0
        h0 = -F[ck[d]] * F[cl[d]] + (Bd @ m) @ F
        h0c = h0 - h0 @ q
        mdot = Minv @ (Fq @ h0c)
        sdot = h0 + (B @ mdot) @ F
        sc = sdot - sdot @ q
        qs = q * sc
        Cdot = np.sum(Fk * wl * qs, axis=1)
        Vdot = (Fc * qs) @ Fc.T
        rdot = (rc * qs) @ Fc.T
        Mdot = Vdot @ B + V @ Bd
        dmdot = (dm @ Mdot.T + rdot) @ Minv.T
        gdot = (dm @ Bd.T + dmdot @ B.T) @ F
        chidot = np.sum(gdot * wl * q, axis=1) + np.sum(gc * wl * qs, axis=1)
        J[:, d] = Cdot - chidot
    return delta, J
