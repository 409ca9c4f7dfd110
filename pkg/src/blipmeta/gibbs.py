"""MCMC engine for normal hierarchies observed through per-site linear maps.

Each site ``i`` reports ``xi_i ~ N(L_i theta_i, s_i * C_i)`` where
``theta_i ~ N(theta, diag(sigma2))`` on the coordinates the site informs.
Stage two uses ``C_i = diag(sd^2)`` with ``s_i = 1``; the one-stage model
uses OLS sufficient statistics with ``C_i = (X'X)^-1`` and an unknown
residual variance ``s_i``.

One iteration runs these kernels, each of which leaves the joint posterior
invariant:

1. random-walk Metropolis on ``log sigma_t``, ``log lambda_t`` and
   ``log tau`` with ``theta`` and every ``theta_i`` integrated out. The
   marginal is Gaussian, and a change in one ``sigma_t`` is a rank-one
   change of each site's marginal covariance, so a proposal costs
   O(K P^2). These moves let the chain cross between a shrunk-to-zero mode
   and a signal mode, which plain Gibbs updates of the scales do poorly.
2. ``theta`` from its exact Gaussian conditional given the variances
   (site effects integrated out; truncated coordinates get univariate
   one-sided truncated draws), then all ``theta_i`` jointly.
3. ``sigma2`` through the half-Cauchy inverse-gamma mixture
   ``sigma2 | nu ~ IG(1/2, 1/nu)``, ``nu ~ IG(1/2, 1/scale^2)``.
4. residual variances ``s_i`` through the same mixture (one-stage only).
5. horseshoe local and global scales through the same auxiliary device.

Step 1 is skipped when a coordinate has a truncated prior, since ``theta``
then has no closed-form marginal. The compiled kernels live here too so the
unit tests can exercise each conditional on frozen inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

NORMAL, TRUNCATED, HORSESHOE = 0, 1, 2

# inverse-gamma draws are clamped to this range so reciprocals stay finite
_VAR_FLOOR = 1e-150
_VAR_CEIL = 1e150
_TARGET_ACCEPT = 0.44

_JIT = dict(cache=True, nogil=True)


class PrecisionError(np.linalg.LinAlgError):
    """A full-conditional precision matrix was not positive definite."""


# -- small dense linear algebra ------------------------------------------------

@nb.njit(**_JIT)
def _chol(A):
    n = A.shape[0]
    Lc = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= Lc[j, k] * Lc[j, k]
        if not s > 0.0:
            return Lc, False
        d = math.sqrt(s)
        Lc[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= Lc[i, k] * Lc[j, k]
            Lc[i, j] = s / d
    return Lc, True


@nb.njit(**_JIT)
def _fwd(Lc, b):
    n = Lc.shape[0]
    x = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= Lc[i, k] * x[k]
        x[i] = s / Lc[i, i]
    return x


@nb.njit(**_JIT)
def _bwd(Lc, b):
    n = Lc.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= Lc[k, i] * x[k]
        x[i] = s / Lc[i, i]
    return x


# -- random variates ---------------------------------------------------------------

@nb.njit(**_JIT)
def _rinvgamma(shape, scale, rng):
    x = scale / rng.gamma(shape)
    return min(max(x, _VAR_FLOOR), _VAR_CEIL)


@nb.njit(**_JIT)
def _std_lower(alpha, rng):
    """Z ~ N(0, 1) conditioned on Z > alpha."""
    if alpha < 0.0:
        # acceptance >= 1/2
        while True:
            z = rng.standard_normal()
            if z > alpha:
                return z
    # exponential proposal with the optimal rate for this bound
    rate = 0.5 * (alpha + math.sqrt(alpha * alpha + 4.0))
    while True:
        z = alpha + rng.exponential(1.0 / rate)
        if rng.uniform() <= math.exp(-0.5 * (z - rate) ** 2):
            return z


@nb.njit(**_JIT)
def _rtruncnorm(mean, sd, sign, rng):
    if sign > 0:
        return mean + sd * _std_lower(-mean / sd, rng)
    return mean - sd * _std_lower(mean / sd, rng)


# -- marginal (theta and site effects integrated out) ---------------------------

@nb.njit(**_JIT)
def _site_cache(Li, Ci, xii, resid, sigma2):
    """G = L'M^-1 L, h = L'M^-1 xi, q = xi'M^-1 xi, log|M| for M = s C + L D L'."""
    r, P = Li.shape
    M = resid * Ci.copy()
    for a in range(r):
        for b in range(r):
            s = 0.0
            for t in range(P):
                s += Li[a, t] * sigma2[t] * Li[b, t]
            M[a, b] += s
    Lc, ok = _chol(M)
    G = np.zeros((P, P))
    h = np.zeros(P)
    if not ok:
        return G, h, 0.0, 0.0, False
    Z = np.empty((r, P))
    for t in range(P):
        Z[:, t] = _fwd(Lc, Li[:, t].copy())
    zx = _fwd(Lc, xii.copy())
    for s_ in range(P):
        for t in range(s_, P):
            acc = 0.0
            for a in range(r):
                acc += Z[a, s_] * Z[a, t]
            G[s_, t] = acc
            G[t, s_] = acc
        acc = 0.0
        for a in range(r):
            acc += Z[a, s_] * zx[a]
        h[s_] = acc
    q = 0.0
    ld = 0.0
    for a in range(r):
        q += zx[a] * zx[a]
        ld += 2.0 * math.log(Lc[a, a])
    return G, h, q, ld, True


@nb.njit(**_JIT)
def _all_caches(L, C, xi, resid, sigma2):
    K, r, P = L.shape
    Gi = np.zeros((K, P, P))
    hi = np.zeros((K, P))
    qi = np.zeros(K)
    ldi = np.zeros(K)
    for i in range(K):
        G, h, q, ld, ok = _site_cache(L[i], C[i], xi[i], resid[i], sigma2)
        if not ok:
            return Gi, hi, qi, ldi, False
        Gi[i] = G
        hi[i] = h
        qi[i] = q
        ldi[i] = ld
    return Gi, hi, qi, ldi, True


@nb.njit(**_JIT)
def _marginal(Gsum, hsum, qsum, ldsum, prec, proper):
    """log p(xi | variances) up to a constant; -inf if the posterior precision is singular."""
    P = Gsum.shape[0]
    Q = Gsum.copy()
    for t in range(P):
        Q[t, t] += prec[t]
    Lc, ok = _chol(Q)
    if not ok:
        return -np.inf
    z = _fwd(Lc, hsum)
    val = -0.5 * ldsum - 0.5 * qsum
    for t in range(P):
        val += 0.5 * z[t] * z[t] - math.log(Lc[t, t])
        if proper[t]:
            val += 0.5 * math.log(prec[t])
    return val


@nb.njit(**_JIT)
def _log_scale_prior(x, aux):
    """Density of x = log(scale) when scale^2 | aux ~ IG(1/2, 1/aux)."""
    return -x - math.exp(-2.0 * x) / aux


# -- conditional kernels ----------------------------------------------------------------

@nb.njit(**_JIT)
def _draw_common(Q, b, sign, theta, rng):
    """theta ~ N(Q^-1 b, Q^-1) with sign != 0 coordinates truncated; returns ok."""
    P = Q.shape[0]
    nfree = 0
    for t in range(P):
        if sign[t] == 0:
            nfree += 1
    free = np.empty(nfree, dtype=np.int64)
    k = 0
    for t in range(P):
        if sign[t] == 0:
            free[k] = t
            k += 1
    if nfree:
        Qf = np.empty((nfree, nfree))
        bf = np.empty(nfree)
        for a in range(nfree):
            s = b[free[a]]
            for t in range(P):
                if sign[t] != 0:
                    s -= Q[free[a], t] * theta[t]
            bf[a] = s
            for c in range(nfree):
                Qf[a, c] = Q[free[a], free[c]]
        Lc, ok = _chol(Qf)
        if not ok:
            return False
        mean = _bwd(Lc, _fwd(Lc, bf))
        z = np.empty(nfree)
        for a in range(nfree):
            z[a] = rng.standard_normal()
        dev = _bwd(Lc, z)
        for a in range(nfree):
            theta[free[a]] = mean[a] + dev[a]
    for t in range(P):
        if sign[t] == 0:
            continue
        qtt = Q[t, t]
        if not qtt > 0.0:
            return False
        s = b[t]
        for u in range(P):
            if u != t:
                s -= Q[t, u] * theta[u]
        theta[t] = _rtruncnorm(s / qtt, 1.0 / math.sqrt(qtt), sign[t], rng)
    return True


@nb.njit(**_JIT)
def _draw_site_effects(G_raw, h_raw, active, theta, sigma2, resid, rng, out):
    """All theta_i given theta and the variances; inactive entries become NaN."""
    K, P = active.shape
    for i in range(K):
        n = 0
        for t in range(P):
            if active[i, t] and sigma2[t] > 0.0:
                n += 1
        idx = np.empty(n, dtype=np.int64)
        k = 0
        for t in range(P):
            if active[i, t] and sigma2[t] > 0.0:
                idx[k] = t
                k += 1
        for t in range(P):
            out[i, t] = theta[t] if active[i, t] else np.nan
        if n == 0:
            continue
        s = resid[i]
        A = np.empty((n, n))
        bb = np.empty(n)
        for a in range(n):
            ta = idx[a]
            acc = h_raw[i, ta] / s + theta[ta] / sigma2[ta]
            for u in range(P):
                if active[i, u] and sigma2[u] == 0.0:
                    acc -= G_raw[i, ta, u] / s * theta[u]
            bb[a] = acc
            for c in range(n):
                A[a, c] = G_raw[i, ta, idx[c]] / s
            A[a, a] += 1.0 / sigma2[ta]
        Lc, ok = _chol(A)
        if not ok:
            return False
        mean = _bwd(Lc, _fwd(Lc, bb))
        z = np.empty(n)
        for a in range(n):
            z[a] = rng.standard_normal()
        dev = _bwd(Lc, z)
        for a in range(n):
            out[i, idx[a]] = mean[a] + dev[a]
    return True


# -- chain --------------------------------------------------------------------------

@nb.njit(**_JIT)
def _prior_prec(prior_kind, prior_var, lam2, tau2, out):
    for t in range(prior_kind.shape[0]):
        if prior_kind[t] == HORSESHOE:
            out[t] = 1.0 / (tau2 * lam2[t])
        elif np.isinf(prior_var[t]):
            out[t] = 0.0
        else:
            out[t] = 1.0 / prior_var[t]


@nb.njit(**_JIT)
def _sum_caches(Gi, hi, qi, ldi):
    return Gi.sum(axis=0), hi.sum(axis=0), qi.sum(), ldi.sum()


@nb.njit(**_JIT)
def _chain(xi, L, C, Cinv, G_raw, h_raw, active, prior_kind, prior_var, prior_sign,
           sigma_scale, free_sigma, sample_resid, n_obs, rss, resid_scale, collapsed,
           theta, sigma2, nu, resid, omega, lam2, lam_aux, scal,
           n_warmup, n_kept, rng,
           o_theta, o_site, o_sigma, o_resid, o_lambda, o_tau, o_cmean, o_cvar, o_accept):
    """Run the sampler; ``scal`` holds (tau2, tau_aux). Returns 0 or an error code."""
    K, r, P = L.shape
    site = np.full((K, P), np.nan)
    prec = np.empty(P)
    proper = np.empty(P, dtype=np.bool_)
    sign = np.zeros(P, dtype=np.int64)
    hs = np.zeros(P, dtype=np.bool_)
    any_trunc = False
    n_hs = 0
    for t in range(P):
        proper[t] = prior_kind[t] == HORSESHOE or not np.isinf(prior_var[t])
        if prior_kind[t] == TRUNCATED:
            sign[t] = prior_sign[t]
            any_trunc = True
        if prior_kind[t] == HORSESHOE:
            hs[t] = True
            n_hs += 1
    count = np.zeros(P)
    informed = np.zeros(P, dtype=np.bool_)
    for i in range(K):
        for t in range(P):
            if active[i, t]:
                count[t] += 1.0
                informed[t] = True
    do_mh = collapsed and not any_trunc
    log_step = np.zeros(2 * P + 1)
    n_acc = np.zeros(2 * P + 1)
    n_try = np.zeros(2 * P + 1)

    for it in range(n_warmup + n_kept):
        tau2 = scal[0]
        tau_aux = scal[1]
        _prior_prec(prior_kind, prior_var, lam2, tau2, prec)
        Gi, hi, qi, ldi, ok = _all_caches(L, C, xi, resid, sigma2)
        if not ok:
            return 1
        Gsum, hsum, qsum, ldsum = _sum_caches(Gi, hi, qi, ldi)

        if do_mh:
            ll = _marginal(Gsum, hsum, qsum, ldsum, prec, proper)
            gamma = 1.0 / (it + 1.0) ** 0.6
            # between-site scales: rank-one update of every informing site
            for t in range(P):
                if not (free_sigma[t] and informed[t]):
                    continue
                x = 0.5 * math.log(sigma2[t])
                xn = x + math.exp(log_step[t]) * rng.standard_normal()
                s2n = math.exp(2.0 * xn)
                if s2n < _VAR_FLOOR or s2n > _VAR_CEIL:
                    lln = -np.inf
                else:
                    delta = s2n - sigma2[t]
                    Gn = Gsum.copy()
                    hn = hsum.copy()
                    qn = qsum
                    ldn = ldsum
                    cs = np.ones(K)
                    for i in range(K):
                        if not active[i, t]:
                            continue
                        c = 1.0 + delta * Gi[i, t, t]
                        cs[i] = c
                        if not c > 0.0:
                            ldn = np.nan
                            break
                        for a in range(P):
                            hn[a] -= delta * Gi[i, a, t] * hi[i, t] / c
                            for b in range(P):
                                Gn[a, b] -= delta * Gi[i, a, t] * Gi[i, t, b] / c
                        qn -= delta * hi[i, t] * hi[i, t] / c
                        ldn += math.log(c)
                    lln = -np.inf if np.isnan(ldn) else _marginal(Gn, hn, qn, ldn, prec, proper)
                logr = lln - ll + _log_scale_prior(xn, nu[t]) - _log_scale_prior(x, nu[t])
                accept = math.log(rng.uniform()) < logr
                n_try[t] += 1.0
                if accept:
                    n_acc[t] += 1.0
                    delta = s2n - sigma2[t]
                    for i in range(K):
                        if not active[i, t]:
                            continue
                        c = cs[i]
                        col = Gi[i, :, t].copy()
                        ht = hi[i, t]
                        for a in range(P):
                            hi[i, a] -= delta * col[a] * ht / c
                            for b in range(P):
                                Gi[i, a, b] -= delta * col[a] * col[b] / c
                        qi[i] -= delta * ht * ht / c
                        ldi[i] += math.log(c)
                    sigma2[t] = s2n
                    Gsum, hsum, qsum, ldsum = Gn, hn, qn, ldn
                    ll = lln
                if it < n_warmup:
                    log_step[t] += gamma * ((1.0 if accept else 0.0) - _TARGET_ACCEPT)
            # horseshoe local scales: only the prior precision changes
            for t in range(P):
                if not hs[t]:
                    continue
                j = P + t
                x = 0.5 * math.log(lam2[t])
                xn = x + math.exp(log_step[j]) * rng.standard_normal()
                l2n = math.exp(2.0 * xn)
                old = prec[t]
                if l2n < _VAR_FLOOR or l2n > _VAR_CEIL:
                    lln = -np.inf
                else:
                    prec[t] = 1.0 / (tau2 * l2n)
                    lln = _marginal(Gsum, hsum, qsum, ldsum, prec, proper)
                logr = lln - ll + _log_scale_prior(xn, lam_aux[t]) - _log_scale_prior(x, lam_aux[t])
                accept = math.log(rng.uniform()) < logr
                n_try[j] += 1.0
                if accept:
                    n_acc[j] += 1.0
                    lam2[t] = l2n
                    ll = lln
                else:
                    prec[t] = old
                if it < n_warmup:
                    log_step[j] += gamma * ((1.0 if accept else 0.0) - _TARGET_ACCEPT)
            # horseshoe global scale
            if n_hs:
                j = 2 * P
                x = 0.5 * math.log(tau2)
                xn = x + math.exp(log_step[j]) * rng.standard_normal()
                t2n = math.exp(2.0 * xn)
                if t2n < _VAR_FLOOR or t2n > _VAR_CEIL:
                    lln = -np.inf
                else:
                    _prior_prec(prior_kind, prior_var, lam2, t2n, prec)
                    lln = _marginal(Gsum, hsum, qsum, ldsum, prec, proper)
                logr = lln - ll + _log_scale_prior(xn, tau_aux) - _log_scale_prior(x, tau_aux)
                accept = math.log(rng.uniform()) < logr
                n_try[j] += 1.0
                if accept:
                    n_acc[j] += 1.0
                    tau2 = t2n
                    ll = lln
                else:
                    _prior_prec(prior_kind, prior_var, lam2, tau2, prec)
                if it < n_warmup:
                    log_step[j] += gamma * ((1.0 if accept else 0.0) - _TARGET_ACCEPT)

        # theta given the variances, site effects integrated out
        Q = Gsum.copy()
        for t in range(P):
            Q[t, t] += prec[t]
        if not _draw_common(Q, hsum, sign, theta, rng):
            return 2
        if not _draw_site_effects(G_raw, h_raw, active, theta, sigma2, resid, rng, site):
            return 3

        # between-site variances and their auxiliaries
        for t in range(P):
            if not free_sigma[t]:
                continue
            ss = 0.0
            for i in range(K):
                if active[i, t]:
                    d = site[i, t] - theta[t]
                    ss += d * d
            sigma2[t] = _rinvgamma(0.5 * (count[t] + 1.0), 1.0 / nu[t] + 0.5 * ss, rng)
            nu[t] = _rinvgamma(1.0, 1.0 / (sigma_scale[t] * sigma_scale[t]) + 1.0 / sigma2[t], rng)

        if sample_resid:
            for i in range(K):
                sse = rss[i]
                e = np.empty(r)
                for a in range(r):
                    acc = -xi[i, a]
                    for t in range(P):
                        if active[i, t]:
                            acc += L[i, a, t] * site[i, t]
                    e[a] = acc
                for a in range(r):
                    for b in range(r):
                        sse += e[a] * Cinv[i, a, b] * e[b]
                resid[i] = _rinvgamma(0.5 * (n_obs[i] + 1.0), 1.0 / omega[i] + 0.5 * sse, rng)
                omega[i] = _rinvgamma(1.0, 1.0 / (resid_scale * resid_scale) + 1.0 / resid[i], rng)

        if n_hs:
            tot = 0.0
            for t in range(P):
                if hs[t]:
                    th2 = theta[t] * theta[t]
                    lam2[t] = _rinvgamma(1.0, 1.0 / lam_aux[t] + th2 / (2.0 * tau2), rng)
                    lam_aux[t] = _rinvgamma(1.0, 1.0 + 1.0 / lam2[t], rng)
                    tot += th2 / (2.0 * lam2[t])
            tau2 = _rinvgamma(0.5 * (n_hs + 1.0), 1.0 / tau_aux + tot, rng)
            tau_aux = _rinvgamma(1.0, 1.0 + 1.0 / tau2, rng)
        scal[0] = tau2
        scal[1] = tau_aux

        k = it - n_warmup
        if k < 0:
            continue
        for t in range(P):
            o_theta[k, t] = theta[t]
            o_sigma[k, t] = math.sqrt(sigma2[t])
            if hs[t]:
                o_lambda[k, t] = math.sqrt(lam2[t])
            for i in range(K):
                o_site[k, i, t] = site[i, t]
        for i in range(K):
            o_resid[k, i] = resid[i]
        if n_hs:
            o_tau[k] = math.sqrt(tau2)
        if not any_trunc:
            Lc, ok = _chol(Q)
            if ok:
                mean = _bwd(Lc, _fwd(Lc, hsum))
                e = np.zeros(P)
                for t in range(P):
                    e[t] = 1.0
                    w = _fwd(Lc, e)
                    e[t] = 0.0
                    o_cmean[k, t] = mean[t]
                    o_cvar[k, t] = np.sum(w * w)
    for j in range(2 * P + 1):
        o_accept[j] = n_acc[j] / n_try[j] if n_try[j] > 0 else np.nan
    return 0


# -- Python-facing problem and driver --------------------------------------------------

@dataclass
class Problem:
    labels: tuple[str, ...]
    xi: np.ndarray            # (K, r)
    L: np.ndarray             # (K, r, P)
    C: np.ndarray             # (K, r, r)
    prior_kind: np.ndarray    # (P,)
    prior_var: np.ndarray     # (P,) inf means flat
    prior_sign: np.ndarray    # (P,)
    sigma_scale: np.ndarray   # (P,)
    fixed_sigma: np.ndarray   # (P,) nan means sampled
    n_obs: np.ndarray | None = None   # (K,) set when residual variances are sampled
    rss: np.ndarray | None = None     # (K,)
    resid_scale: float = 1.0
    init_resid: np.ndarray | None = None
    site_ids: tuple[str, ...] = ()
    collapsed_moves: bool = True
    Cinv: np.ndarray = field(init=False)
    G: np.ndarray = field(init=False)
    h: np.ndarray = field(init=False)
    active: np.ndarray = field(init=False)

    def __post_init__(self):
        self.xi = np.ascontiguousarray(self.xi, dtype=float)
        self.L = np.ascontiguousarray(self.L, dtype=float)
        self.C = np.ascontiguousarray(self.C, dtype=float)
        K, r, P = self.L.shape
        self.prior_kind = np.asarray(self.prior_kind, dtype=np.int64)
        self.prior_var = np.asarray(self.prior_var, dtype=float)
        self.prior_sign = np.asarray(self.prior_sign, dtype=np.int64)
        self.sigma_scale = np.asarray(self.sigma_scale, dtype=float)
        self.fixed_sigma = np.asarray(self.fixed_sigma, dtype=float)
        self.Cinv = np.linalg.inv(self.C) if K else np.zeros((0, r, r))
        CiL = self.Cinv @ self.L
        self.G = np.ascontiguousarray(np.einsum("krp,krq->kpq", self.L, CiL))
        self.h = np.ascontiguousarray(np.einsum("krp,kr->kp", CiL, self.xi))
        self.active = np.any(self.L != 0, axis=1)
        for arr in (self.xi, self.L, self.C, self.Cinv, self.G, self.h, self.active):
            arr.setflags(write=False)

    @property
    def P(self) -> int:
        return self.L.shape[2]

    @property
    def K(self) -> int:
        return self.L.shape[0]

    @property
    def sample_resid(self) -> bool:
        return self.n_obs is not None

    @property
    def horseshoe(self) -> np.ndarray:
        return self.prior_kind == HORSESHOE


def pad_sites(xi_list, L_list, C_list, P: int):
    """Stack ragged per-site blocks; padded rows have L = 0 and unit variance."""
    K = len(xi_list)
    r = max((len(x) for x in xi_list), default=1)
    xi = np.zeros((K, r))
    L = np.zeros((K, r, P))
    C = np.tile(np.eye(r), (K, 1, 1))
    for i, (x, Li, Ci) in enumerate(zip(xi_list, L_list, C_list)):
        m = len(x)
        xi[i, :m] = x
        L[i, :m] = Li
        C[i, :m, :m] = Ci
    return xi, L, C


@dataclass
class State:
    theta: np.ndarray
    sigma2: np.ndarray
    nu: np.ndarray
    resid: np.ndarray
    omega: np.ndarray
    lam2: np.ndarray
    lam_aux: np.ndarray
    scal: np.ndarray  # (tau2, tau_aux)


def initial_state(problem: Problem, rng: np.random.Generator) -> State:
    P, K = problem.P, problem.K
    sigma2 = np.square(problem.sigma_scale * rng.uniform(0.1, 1.0, P))
    sigma2 = np.where(np.isnan(problem.fixed_sigma), sigma2,
                      np.square(np.nan_to_num(problem.fixed_sigma)))
    theta = rng.standard_normal(P)
    trunc = problem.prior_kind == TRUNCATED
    theta = np.where(trunc, problem.prior_sign * np.abs(theta), theta)
    if problem.sample_resid:
        base = problem.init_resid if problem.init_resid is not None else np.ones(K)
        resid = base * rng.uniform(0.5, 2.0, K)
    else:
        resid = np.ones(K)
    return State(theta=theta, sigma2=sigma2, nu=np.ones(P), resid=np.asarray(resid, dtype=float),
                 omega=np.ones(K), lam2=rng.uniform(0.5, 2.0, P), lam_aux=np.ones(P),
                 scal=np.array([rng.uniform(0.5, 2.0), 1.0]))


_ERRORS = {1: "site marginal covariance", 2: "common-mean precision", 3: "site-effect precision"}


def run_chain(problem: Problem, n_warmup: int, n_kept: int, rng: np.random.Generator) -> dict:
    P, K = problem.P, problem.K
    out = {
        "theta": np.empty((n_kept, P)),
        "site": np.empty((n_kept, K, P)),
        "sigma": np.empty((n_kept, P)),
        "resid": np.empty((n_kept, K)),
        "lambda": np.full((n_kept, P), np.nan),
        "tau": np.full(n_kept, np.nan),
        "cond_mean": np.full((n_kept, P), np.nan),
        "cond_var": np.full((n_kept, P), np.nan),
    }
    accept = np.full(2 * P + 1, np.nan)
    st = initial_state(problem, rng)
    sample_resid = problem.sample_resid
    n_obs = problem.n_obs if sample_resid else np.zeros(K)
    rss = problem.rss if sample_resid else np.zeros(K)
    code = _chain(
        problem.xi, problem.L, problem.C, np.ascontiguousarray(problem.Cinv), problem.G, problem.h,
        problem.active, problem.prior_kind, problem.prior_var, problem.prior_sign,
        problem.sigma_scale, np.isnan(problem.fixed_sigma), sample_resid,
        np.asarray(n_obs, dtype=float), np.asarray(rss, dtype=float), float(problem.resid_scale),
        bool(problem.collapsed_moves),
        st.theta, st.sigma2, st.nu, st.resid, st.omega, st.lam2, st.lam_aux, st.scal,
        int(n_warmup), int(n_kept), rng,
        out["theta"], out["site"], out["sigma"], out["resid"], out["lambda"], out["tau"],
        out["cond_mean"], out["cond_var"], accept)
    if code:
        raise PrecisionError(f"{_ERRORS[code]} is not positive definite")
    out["accept"] = accept
    return out


# -- single-kernel wrappers (used by the conditional unit tests) ---------------------

def common_conditional(problem: Problem, sigma2, resid, prior_prec) -> tuple[np.ndarray, np.ndarray]:
    """Precision and linear term of theta given variances, site effects integrated out."""
    Gi, hi, _, _, ok = _all_caches(problem.L, problem.C, problem.xi,
                                   np.asarray(resid, dtype=float), np.asarray(sigma2, dtype=float))
    if not ok:
        raise PrecisionError("site marginal covariance is not positive definite")
    return Gi.sum(axis=0) + np.diag(prior_prec), hi.sum(axis=0)


def marginal_loglik(problem: Problem, sigma2, resid, prior_prec) -> float:
    """log p(xi | variances) with theta and site effects integrated out (up to a constant)."""
    prior_prec = np.asarray(prior_prec, dtype=float)
    Gi, hi, qi, ldi, ok = _all_caches(problem.L, problem.C, problem.xi,
                                      np.asarray(resid, dtype=float), np.asarray(sigma2, dtype=float))
    if not ok:
        raise PrecisionError("site marginal covariance is not positive definite")
    return float(_marginal(Gi.sum(axis=0), hi.sum(axis=0), qi.sum(), ldi.sum(), prior_prec,
                           prior_prec > 0))


def draw_common(Q, b, sign, current, rng) -> np.ndarray:
    theta = np.array(current, dtype=float)
    if not _draw_common(np.asarray(Q, dtype=float), np.asarray(b, dtype=float),
                        np.asarray(sign, dtype=np.int64), theta, rng):
        raise PrecisionError("common-mean precision is not positive definite")
    return theta


def draw_site_effects(problem: Problem, theta, sigma2, resid, rng) -> np.ndarray:
    out = np.empty((problem.K, problem.P))
    if not _draw_site_effects(problem.G, problem.h, problem.active, np.asarray(theta, dtype=float),
                              np.asarray(sigma2, dtype=float), np.asarray(resid, dtype=float),
                              rng, out):
        raise PrecisionError("site-effect precision is not positive definite")
    return out


def rinvgamma(shape: float, scale: float, rng) -> float:
    """Inverse-gamma draw with density proportional to x^(-shape-1) exp(-scale/x)."""
    return float(_rinvgamma(float(shape), float(scale), rng))


def draw_variance(sum_sq: float, count: float, aux: float, rng) -> float:
    """sigma2 | deviations, aux ~ IG((count + 1)/2, 1/aux + sum_sq/2)."""
    return rinvgamma(0.5 * (count + 1), 1.0 / aux + 0.5 * sum_sq, rng)


def draw_variance_aux(sigma2: float, scale: float, rng) -> float:
    """aux | sigma2 ~ IG(1, 1/scale^2 + 1/sigma2)."""
    return rinvgamma(1.0, 1.0 / scale**2 + 1.0 / sigma2, rng)


def draw_local_scale(theta_sq: float, aux: float, tau2: float, rng) -> float:
    """Horseshoe lambda^2 | theta, aux, tau2 ~ IG(1, 1/aux + theta^2/(2 tau2))."""
    return rinvgamma(1.0, 1.0 / aux + theta_sq / (2.0 * tau2), rng)


def draw_global_scale(theta_sq: np.ndarray, lam2: np.ndarray, aux: float, rng) -> float:
    """Horseshoe tau^2 | theta, lambda^2, aux ~ IG((H + 1)/2, 1/aux + sum theta^2/(2 lambda^2))."""
    theta_sq = np.asarray(theta_sq, dtype=float)
    return rinvgamma(0.5 * (len(theta_sq) + 1), 1.0 / aux + float(np.sum(theta_sq / (2.0 * lam2))), rng)
