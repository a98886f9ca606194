"""Hot numerical kernels with a numba and a numpy implementation.

Every public function here dispatches at call time on
:func:`contcrm._accel.use_numba`, so both backends can be exercised inside one
process (the test-suite compares them). The numpy versions are the reference
semantics; the numba versions are straight loops over rows that avoid the
temporaries numpy would allocate.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

if _accel.HAVE_NUMBA:
    from numba import njit
else:  # pragma: no cover

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# ---------------------------------------------------------------------------
# normal log-density with derivatives in (mu, log sigma)
# ---------------------------------------------------------------------------


def _normal_logpdf_grad_np(a, mu, sigma):
    z = (a - mu) / sigma
    logp = -LOG_SQRT_2PI - math.log(sigma) - 0.5 * z * z
    dmu = z / sigma
    dlogsig = z * z - 1.0
    return logp, dmu, dlogsig


@njit(cache=True)
def _normal_logpdf_grad_nb(a, mu, sigma):
    n = a.shape[0]
    logp = np.empty(n)
    dmu = np.empty(n)
    dlogsig = np.empty(n)
    lsig = math.log(sigma)
    for i in range(n):
        z = (a[i] - mu[i]) / sigma
        logp[i] = -LOG_SQRT_2PI - lsig - 0.5 * z * z
        dmu[i] = z / sigma
        dlogsig[i] = z * z - 1.0
    return logp, dmu, dlogsig


def normal_logpdf_grad(a, mu, sigma: float):
    """Log-density of N(mu, sigma^2) at ``a`` and its partials.

    Returns ``(logp, d logp / d mu, d logp / d log(sigma))``, all of shape ``a``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    mu = np.ascontiguousarray(np.broadcast_to(mu, a.shape), dtype=np.float64)
    if _accel.use_numba():
        return _normal_logpdf_grad_nb(a, mu, float(sigma))
    return _normal_logpdf_grad_np(a, mu, float(sigma))


# ---------------------------------------------------------------------------
# lognormal parametrized by its mean and standard deviation
# ---------------------------------------------------------------------------


def _lognormal_logpdf_grad_np(a, mu, sigma):
    r = (sigma / mu) ** 2
    s2 = np.log1p(r)
    m = np.log(mu) - 0.5 * s2
    # partials of s^2 through r = sigma^2 / mu^2
    ds2_dr = 1.0 / (1.0 + r)
    ds2_dmu = ds2_dr * (-2.0 * r / mu)
    ds2_dlogsig = ds2_dr * (2.0 * r)
    dm_dmu = 1.0 / mu - 0.5 * ds2_dmu
    dm_dlogsig = -0.5 * ds2_dlogsig
    pos = a > 0
    la = np.log(np.where(pos, a, 1.0))
    z = la - m
    logp = -la - LOG_SQRT_2PI - 0.5 * np.log(s2) - 0.5 * z * z / s2
    # d logp / d m and d logp / d (s^2)
    dl_dm = z / s2
    dl_ds2 = -0.5 / s2 + 0.5 * z * z / (s2 * s2)
    dmu = dl_dm * dm_dmu + dl_ds2 * ds2_dmu
    dlogsig = dl_dm * dm_dlogsig + dl_ds2 * ds2_dlogsig
    logp = np.where(pos, logp, -np.inf)
    dmu = np.where(pos, dmu, 0.0)
    dlogsig = np.where(pos, dlogsig, 0.0)
    return logp, dmu, dlogsig


@njit(cache=True)
def _lognormal_logpdf_grad_nb(a, mu, sigma):
    n = a.shape[0]
    logp = np.empty(n)
    dmu = np.empty(n)
    dlogsig = np.empty(n)
    for i in range(n):
        if a[i] <= 0.0:
            logp[i] = -np.inf
            dmu[i] = 0.0
            dlogsig[i] = 0.0
            continue
        r = (sigma / mu[i]) ** 2
        s2 = math.log1p(r)
        m = math.log(mu[i]) - 0.5 * s2
        ds2_dr = 1.0 / (1.0 + r)
        ds2_dmu = ds2_dr * (-2.0 * r / mu[i])
        ds2_dlogsig = ds2_dr * (2.0 * r)
        dm_dmu = 1.0 / mu[i] - 0.5 * ds2_dmu
        dm_dlogsig = -0.5 * ds2_dlogsig
        la = math.log(a[i])
        z = la - m
        logp[i] = -la - LOG_SQRT_2PI - 0.5 * math.log(s2) - 0.5 * z * z / s2
        dl_dm = z / s2
        dl_ds2 = -0.5 / s2 + 0.5 * z * z / (s2 * s2)
        dmu[i] = dl_dm * dm_dmu + dl_ds2 * ds2_dmu
        dlogsig[i] = dl_dm * dm_dlogsig + dl_ds2 * ds2_dlogsig
    return logp, dmu, dlogsig


def lognormal_logpdf_grad(a, mu, sigma: float):
    """Log-density of the lognormal with mean ``mu`` and std ``sigma``.

    The underlying normal parameters come from the moment map
    ``s^2 = log(sigma^2 / mu^2 + 1)``, ``m = log(mu) - s^2 / 2``. Returns
    ``(logp, d logp / d mu, d logp / d log(sigma))``; rows with ``a <= 0``
    get ``-inf`` and zero partials.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    mu = np.ascontiguousarray(np.broadcast_to(mu, a.shape), dtype=np.float64)
    if _accel.use_numba():
        return _lognormal_logpdf_grad_nb(a, mu, float(sigma))
    with np.errstate(divide="ignore", invalid="ignore"):
        return _lognormal_logpdf_grad_np(a, mu, float(sigma))


# ---------------------------------------------------------------------------
# soft clipping
# ---------------------------------------------------------------------------


def _soft_clip_np(w, M, alpha):
    over = w > M
    arg = np.where(over, w + alpha - M, 1.0)
    value = np.where(over, alpha * np.log(arg), w)
    deriv = np.where(over, alpha / arg, 1.0)
    return value, deriv


@njit(cache=True)
def _soft_clip_nb(w, M, alpha):
    n = w.shape[0]
    value = np.empty(n)
    deriv = np.empty(n)
    for i in range(n):
        if w[i] > M:
            arg = w[i] + alpha - M
            value[i] = alpha * math.log(arg)
            deriv[i] = alpha / arg
        else:
            value[i] = w[i]
            deriv[i] = 1.0
    return value, deriv


def soft_clip(w, M: float, alpha: float):
    """Vectorized soft clip; returns ``(value, derivative)`` arrays."""
    w = np.ascontiguousarray(np.atleast_1d(w), dtype=np.float64)
    if _accel.use_numba():
        return _soft_clip_nb(w, float(M), float(alpha))
    return _soft_clip_np(w, float(M), float(alpha))


# ---------------------------------------------------------------------------
# CCP soft-argmin over anchors
# ---------------------------------------------------------------------------


def _ccp_forward_np(eta, anchors, gamma):
    logits = -gamma * eta
    logits = logits - logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    return P @ anchors, P


@njit(cache=True)
def _ccp_forward_nb(eta, anchors, gamma):
    n, m = eta.shape
    P = np.empty((n, m))
    mu = np.empty(n)
    for i in range(n):
        best = -np.inf
        for j in range(m):
            v = -gamma * eta[i, j]
            P[i, j] = v
            if v > best:
                best = v
        total = 0.0
        for j in range(m):
            e = math.exp(P[i, j] - best)
            P[i, j] = e
            total += e
        acc = 0.0
        for j in range(m):
            P[i, j] /= total
            acc += P[i, j] * anchors[j]
        mu[i] = acc
    return mu, P


def ccp_forward(eta, anchors, gamma: float):
    """Soft-argmin mean ``mu_i = sum_j a_j softmax(-gamma * eta_i)_j``.

    Returns ``(mu, P)`` where ``P`` holds the softmax weights row by row. The
    max-subtraction trick keeps large ``gamma`` finite.
    """
    eta = np.ascontiguousarray(eta, dtype=np.float64)
    anchors = np.ascontiguousarray(anchors, dtype=np.float64)
    if _accel.use_numba():
        return _ccp_forward_nb(eta, anchors, float(gamma))
    return _ccp_forward_np(eta, anchors, float(gamma))


def _ccp_backward_np(P, anchors, mu, gamma, upstream):
    return (-gamma * upstream)[:, None] * P * (anchors[None, :] - mu[:, None])


@njit(cache=True)
def _ccp_backward_nb(P, anchors, mu, gamma, upstream):
    n, m = P.shape
    out = np.empty((n, m))
    for i in range(n):
        c = -gamma * upstream[i]
        for j in range(m):
            out[i, j] = c * P[i, j] * (anchors[j] - mu[i])
    return out


def ccp_backward(P, anchors, mu, gamma: float, upstream):
    """Pull ``upstream = dL/dmu`` back to ``dL/deta`` through the soft-argmin.

    Uses ``d mu_i / d eta_ij = -gamma * P_ij * (a_j - mu_i)``.
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    anchors = np.ascontiguousarray(anchors, dtype=np.float64)
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if _accel.use_numba():
        return _ccp_backward_nb(P, anchors, mu, float(gamma), upstream)
    return _ccp_backward_np(P, anchors, mu, float(gamma), upstream)


# ---------------------------------------------------------------------------
# bootstrap sums
# ---------------------------------------------------------------------------


def _bootstrap_sums_np(num, den, idx):
    return num[idx].sum(axis=1), den[idx].sum(axis=1)


@njit(cache=True)
def _bootstrap_sums_nb(num, den, idx):
    B, n = idx.shape
    snum = np.zeros(B)
    sden = np.zeros(B)
    for b in range(B):
        acc_n = 0.0
        acc_d = 0.0
        for k in range(n):
            j = idx[b, k]
            acc_n += num[j]
            acc_d += den[j]
        snum[b] = acc_n
        sden[b] = acc_d
    return snum, sden


def bootstrap_sums(num, den, idx):
    """Per-resample sums of two row quantities.

    ``idx`` is a ``(n_boot, n)`` integer array of resampled row indices. The
    ratio of the two outputs is the self-normalized estimate of each resample.
    """
    num = np.ascontiguousarray(num, dtype=np.float64)
    den = np.ascontiguousarray(den, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if _accel.use_numba():
        return _bootstrap_sums_nb(num, den, idx)
    return _bootstrap_sums_np(num, den, idx)


# ---------------------------------------------------------------------------
# weight moments
# ---------------------------------------------------------------------------


def _weight_moments_np(w, y):
    return float(w.sum()), float((w * w).sum()), float((w * y).sum())


@njit(cache=True)
def _weight_moments_nb(w, y):
    s1 = 0.0
    s2 = 0.0
    sy = 0.0
    for i in range(w.shape[0]):
        s1 += w[i]
        s2 += w[i] * w[i]
        sy += w[i] * y[i]
    return s1, s2, sy


def weight_moments(w, y):
    """Return ``(sum w, sum w^2, sum y w)``."""
    w = np.ascontiguousarray(w, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if _accel.use_numba():
        return _weight_moments_nb(w, y)
    return _weight_moments_np(w, y)
