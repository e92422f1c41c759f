"""Compiled inner loops: likelihoods, gradients, EM sweeps and thinning.

Exponential and sum-of-exponential kernels are handled as a flat list of
components ``c`` with source ``cj[c]``, target ``ci[c]``, weight ``ca[c]`` and
decay ``dec[cu[c]]`` (decays are shared between components where the kernel
family shares them, so each step needs one exponential per distinct decay).
Per component the recursion carries

    S_c(t) = sum_{s < t} exp(-b (t - s)),   Q_c(t) = sum_{s < t} (t - s) exp(-b (t - s)),

over past events of type ``cj[c]``; ``Q`` feeds the decay gradient.
Events sharing a timestamp are all evaluated before any of them is added,
so the intensity at an event never includes the event itself.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

_OPTS = dict(cache=True, nogil=True)


@njit(**_OPTS)
def expsum_loglik(times, types, T, mu, ci, cj, cu, ca, dec):
    n = len(times)
    C = len(ca)
    D = len(mu)
    U = len(dec)
    eU = np.empty(U)
    S = np.zeros(C)
    Q = np.zeros(C)
    g_mu = np.zeros(D)
    g_a = np.zeros(C)
    g_b = np.zeros(C)
    counts = np.zeros(D)
    ll = 0.0
    t_prev = 0.0
    k = 0
    while k < n:
        t = times[k]
        dt = t - t_prev
        if dt > 0.0:
            for u in range(U):
                eU[u] = math.exp(-dec[u] * dt)
            for c in range(C):
                e = eU[cu[c]]
                Q[c] = e * (Q[c] + dt * S[c])
                S[c] = e * S[c]
        m = k
        while m < n and times[m] == t:
            m += 1
        for r in range(k, m):
            i = types[r]
            lam = mu[i]
            for c in range(C):
                if ci[c] == i:
                    lam += ca[c] * S[c]
            if not lam > 0.0:
                return -np.inf, g_mu, g_a, g_b, False
            ll += math.log(lam)
            inv = 1.0 / lam
            g_mu[i] += inv
            for c in range(C):
                if ci[c] == i:
                    g_a[c] += S[c] * inv
                    g_b[c] -= ca[c] * Q[c] * inv
        for r in range(k, m):
            j = types[r]
            counts[j] += 1.0
            for c in range(C):
                if cj[c] == j:
                    S[c] += 1.0
        t_prev = t
        k = m
    dt = T - t_prev
    for c in range(C):
        e = math.exp(-dec[cu[c]] * dt)
        Q[c] = e * (Q[c] + dt * S[c])
        S[c] = e * S[c]
    for i in range(D):
        ll -= mu[i] * T
        g_mu[i] -= T
    for c in range(C):
        # sum over sources of (1 - exp(-b x)) / b and its decay derivative
        one_minus = counts[cj[c]] - S[c]
        b = dec[cu[c]]
        ll -= ca[c] * one_minus / b
        g_a[c] -= one_minus / b
        g_b[c] -= ca[c] * (-one_minus / (b * b) + Q[c] / b)
    return ll, g_mu, g_a, g_b, True


@njit(**_OPTS)
def expsum_compensator_path(times, types, mu, ci, cj, cu, ca, dec):
    """Cumulative compensators ``Lambda_i(t_k)`` from 0 for every event and dimension."""
    n = len(times)
    C = len(ca)
    cb = dec[cu]
    D = len(mu)
    S = np.zeros(C)
    out = np.zeros((n, D))
    acc = np.zeros(D)
    t_prev = 0.0
    for k in range(n):
        t = times[k]
        dt = t - t_prev
        if dt > 0.0:
            for i in range(D):
                acc[i] += mu[i] * dt
            for c in range(C):
                e = math.exp(-cb[c] * dt)
                acc[ci[c]] += ca[c] / cb[c] * S[c] * (1.0 - e)
                S[c] *= e
        for i in range(D):
            out[k, i] = acc[i]
        j = types[k]
        for c in range(C):
            if cj[c] == j:
                S[c] += 1.0
        t_prev = t
    return out


@njit(**_OPTS)
def expsum_state(hist_t, hist_y, cj, cu, dec, t0):
    """``S_c(t0)`` from a history of events at times ``<= t0``."""
    C = len(cj)
    S = np.zeros(C)
    for r in range(len(hist_t)):
        x = t0 - hist_t[r]
        j = hist_y[r]
        for c in range(C):
            if cj[c] == j:
                S[c] += math.exp(-dec[cu[c]] * x)
    return S


@njit(**_OPTS)
def powerlaw_loglik(times, types, T, mu, A, B, Dl):
    n = len(times)
    D = len(mu)
    g_mu = np.zeros(D)
    gA = np.zeros((D, D))
    gB = np.zeros((D, D))
    gD = np.zeros((D, D))
    P = np.zeros((D, D))
    L = np.zeros((D, D))
    R = np.zeros((D, D))
    ll = 0.0
    for k in range(n):
        t = times[k]
        i = types[k]
        for j in range(D):
            P[i, j] = 0.0
            L[i, j] = 0.0
            R[i, j] = 0.0
        for r in range(k):
            s = times[r]
            if s >= t:
                break
            j = types[r]
            z = Dl[i, j] + (t - s)
            p = z ** (-B[i, j])
            P[i, j] += p
            L[i, j] += p * math.log(z)
            R[i, j] += p / z
        lam = mu[i]
        for j in range(D):
            lam += A[i, j] * P[i, j]
        if not lam > 0.0:
            return -np.inf, g_mu, gA, gB, gD, False
        ll += math.log(lam)
        inv = 1.0 / lam
        g_mu[i] += inv
        for j in range(D):
            gA[i, j] += P[i, j] * inv
            gB[i, j] -= A[i, j] * L[i, j] * inv
            gD[i, j] -= A[i, j] * B[i, j] * R[i, j] * inv
    for i in range(D):
        ll -= mu[i] * T
        g_mu[i] -= T
    for r in range(n):
        j = types[r]
        x = T - times[r]
        for i in range(D):
            a = A[i, j]
            b = B[i, j]
            d = Dl[i, j]
            bm = b - 1.0
            d0 = d ** (-bm)
            d1 = (d + x) ** (-bm)
            f = (d0 - d1) / bm
            ll -= a * f
            gA[i, j] -= f
            df = ((-math.log(d) * d0 + math.log(d + x) * d1) * bm - (d0 - d1)) / (bm * bm)
            gB[i, j] -= a * df
            gD[i, j] -= a * ((d + x) ** (-b) - d ** (-b))
    return ll, g_mu, gA, gB, gD, True


@njit(**_OPTS)
def grid_exposure(times, types, T, edges, D):
    """``exposure[j, b]`` = total length of bin ``b`` inside ``[0, T - s]`` over type-``j`` sources."""
    nb = len(edges) - 1
    out = np.zeros((D, nb))
    for r in range(len(times)):
        x = T - times[r]
        j = types[r]
        for b in range(nb):
            lo = edges[b]
            if x <= lo:
                break
            hi = edges[b + 1]
            out[j, b] += (hi if x >= hi else x) - lo
    return out


@njit(**_OPTS)
def _bin_of(edges, lag):
    # edges[b] <= lag < edges[b + 1]
    return np.searchsorted(edges, lag, side="right") - 1


@njit(**_OPTS)
def grid_sweep(times, types, T, mu, edges, V, exposure, want_em):
    """One pass over the data at parameters ``(mu, V)``.

    Returns the log-likelihood, the likelihood gradient wrt ``(mu, V)`` and the
    EM sufficient statistics (baseline responsibilities per dimension and
    triggered mass per ``(i, j, bin)``).
    """
    n = len(times)
    D = len(mu)
    nb = len(edges) - 1
    support = edges[nb]
    ll = 0.0
    g_mu = np.zeros(D)
    gV = np.zeros((D, D, nb))
    base = np.zeros(D)
    num = np.zeros((D, D, nb))
    start = 0
    idx = np.empty(n, dtype=np.int64)
    bins = np.empty(n, dtype=np.int64)
    k = 0
    while k < n:
        t = times[k]
        while start < k and t - times[start] >= support:
            start += 1
        m = k
        while m < n and times[m] == t:
            m += 1
        # sources in (t - support, t) for this timestamp group
        cnt = 0
        for r in range(start, k):
            idx[cnt] = r
            bins[cnt] = _bin_of(edges, t - times[r])
            cnt += 1
        for q in range(k, m):
            i = types[q]
            lam = mu[i]
            for u in range(cnt):
                lam += V[i, types[idx[u]], bins[u]]
            if not lam > 0.0:
                return -np.inf, g_mu, gV, base, num, False
            ll += math.log(lam)
            inv = 1.0 / lam
            g_mu[i] += inv
            for u in range(cnt):
                gV[i, types[idx[u]], bins[u]] += inv
            if want_em:
                base[i] += mu[i] * inv
                for u in range(cnt):
                    j = types[idx[u]]
                    b = bins[u]
                    num[i, j, b] += V[i, j, b] * inv
        k = m
    for i in range(D):
        ll -= mu[i] * T
        g_mu[i] -= T
        for j in range(D):
            for b in range(nb):
                ll -= V[i, j, b] * exposure[j, b]
                gV[i, j, b] -= exposure[j, b]
    return ll, g_mu, gV, base, num, True


# ----------------------------------------------------------------------------
# thinning


@njit(**_OPTS)
def _pick(lam, s):
    acc = 0.0
    for i in range(len(lam)):
        acc += lam[i]
        if s <= acc:
            return i
    return len(lam) - 1


@njit(**_OPTS)
def thin_expsum(rng, mu, ci, cj, cu, ca, dec, S0, tau, eps, max_events):
    """Thinning on ``(0, tau]`` from Markov state ``S0`` at time 0."""
    C = len(ca)
    D = len(mu)
    S = S0.copy()
    lam = np.zeros(D)
    out_t = np.empty(16)
    out_y = np.empty(16, dtype=np.int64)
    n = 0
    t = 0.0
    truncated = False
    U = len(dec)
    eU = np.empty(U)
    epsU = np.exp(-dec * eps)
    mu_tot = 0.0
    for i in range(D):
        mu_tot += mu[i]
    while True:
        M = mu_tot
        for c in range(C):
            M += ca[c] * S[c] * epsU[cu[c]]
        if not M > 0.0:
            break
        w = rng.standard_exponential() / M
        if t + w > tau:
            break
        t += w
        for u in range(U):
            eU[u] = math.exp(-dec[u] * w)
        for c in range(C):
            S[c] *= eU[cu[c]]
        tot = 0.0
        for i in range(D):
            lam[i] = mu[i]
        for c in range(C):
            lam[ci[c]] += ca[c] * S[c]
        for i in range(D):
            tot += lam[i]
        s = rng.random() * M
        if s <= tot:
            i = _pick(lam, s)
            if n == len(out_t):
                out_t = np.concatenate((out_t, np.empty(n)))
                out_y = np.concatenate((out_y, np.empty(n, dtype=np.int64)))
            out_t[n] = t
            out_y[n] = i
            n += 1
            for c in range(C):
                if cj[c] == i:
                    S[c] += 1.0
            if n >= max_events:
                truncated = True
                break
    return out_t[:n], out_y[:n], truncated


@njit(**_OPTS)
def thin_expsum_counts(rng, mu, ci, cj, cu, ca, dec, S0, tau, eps, max_events, K):
    """``K`` independent continuations from ``S0``; only per-dimension counts are kept."""
    C = len(ca)
    D = len(mu)
    counts = np.zeros((K, D), dtype=np.int64)
    S = np.empty(C)
    lam = np.zeros(D)
    U = len(dec)
    eU = np.empty(U)
    epsU = np.exp(-dec * eps)
    mu_tot = 0.0
    for i in range(D):
        mu_tot += mu[i]
    n_trunc = 0
    for kk in range(K):
        for c in range(C):
            S[c] = S0[c]
        t = 0.0
        n = 0
        while True:
            M = mu_tot
            for c in range(C):
                M += ca[c] * S[c] * epsU[cu[c]]
            if not M > 0.0:
                break
            w = rng.standard_exponential() / M
            if t + w > tau:
                break
            t += w
            for u in range(U):
                eU[u] = math.exp(-dec[u] * w)
            for c in range(C):
                S[c] *= eU[cu[c]]
            tot = 0.0
            for i in range(D):
                lam[i] = mu[i]
            for c in range(C):
                lam[ci[c]] += ca[c] * S[c]
            for i in range(D):
                tot += lam[i]
            s = rng.random() * M
            if s <= tot:
                i = _pick(lam, s)
                counts[kk, i] += 1
                n += 1
                for c in range(C):
                    if cj[c] == i:
                        S[c] += 1.0
                if n >= max_events:
                    n_trunc += 1
                    break
    return counts, n_trunc


@njit(**_OPTS)
def _powerlaw_lam(t, buf_t, buf_y, n, mu, A, B, Dl, lam):
    D = len(mu)
    for i in range(D):
        lam[i] = mu[i]
    for r in range(n):
        s = buf_t[r]
        if s >= t:
            break
        j = buf_y[r]
        for i in range(D):
            lam[i] += A[i, j] * (Dl[i, j] + (t - s)) ** (-B[i, j])


@njit(**_OPTS)
def _grid_lam(t, buf_t, buf_y, lo, n, mu, edges, V, lam):
    D = len(mu)
    support = edges[len(edges) - 1]
    for i in range(D):
        lam[i] = mu[i]
    for r in range(lo, n):
        x = t - buf_t[r]
        if x <= 0.0:
            break
        if x >= support:
            continue
        b = _bin_of(edges, x)
        j = buf_y[r]
        for i in range(D):
            lam[i] += V[i, j, b]


@njit(**_OPTS)
def thin_general(rng, kind, mu, A, B, Dl, edges, V, env, hist_t, hist_y, tau, eps, max_events):
    """Thinning for kernels without a Markov state (``kind`` 0 = power law, 1 = grid).

    History events must have times ``<= 0``.  For the grid kernel the bound
    uses the non-increasing envelope ``env`` of the bin values.
    """
    D = len(mu)
    nh = len(hist_t)
    cap = nh + 16
    buf_t = np.empty(cap)
    buf_y = np.empty(cap, dtype=np.int64)
    buf_t[:nh] = hist_t
    buf_y[:nh] = hist_y
    n = nh
    lam = np.zeros(D)
    t = 0.0
    lo = 0
    support = edges[len(edges) - 1]
    truncated = False
    while True:
        te = t + eps
        if kind == 0:
            _powerlaw_lam(te, buf_t, buf_y, n, mu, A, B, Dl, lam)
        else:
            while lo < n and te - buf_t[lo] >= support:
                lo += 1
            _grid_lam(te, buf_t, buf_y, lo, n, mu, edges, env, lam)
        M = 0.0
        for i in range(D):
            M += lam[i]
        if not M > 0.0:
            break
        w = rng.standard_exponential() / M
        if t + w > tau:
            break
        t += w
        if kind == 0:
            _powerlaw_lam(t, buf_t, buf_y, n, mu, A, B, Dl, lam)
        else:
            while lo < n and t - buf_t[lo] >= support:
                lo += 1
            _grid_lam(t, buf_t, buf_y, lo, n, mu, edges, V, lam)
        tot = 0.0
        for i in range(D):
            tot += lam[i]
        s = rng.random() * M
        if s <= tot:
            i = _pick(lam, s)
            if n == len(buf_t):
                buf_t = np.concatenate((buf_t, np.empty(n)))
                buf_y = np.concatenate((buf_y, np.empty(n, dtype=np.int64)))
            buf_t[n] = t
            buf_y[n] = i
            n += 1
            if n - nh >= max_events:
                truncated = True
                break
    return buf_t[nh:n].copy(), buf_y[nh:n].copy(), truncated
