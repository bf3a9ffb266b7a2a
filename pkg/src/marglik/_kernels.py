"""Hot inner loops: per-subject, per-particle sums of trial log densities.

Every kernel has a numba implementation and a pure-numpy twin with the same
signature.  Set ``MARGLIK_DISABLE_NUMBA=1`` to force the numpy path (also used
automatically when numba is not importable).  Both paths agree to rounding.

Ragged trial data is passed flat with ``offsets`` (length ``S + 1``); ``subj``
maps each of the ``G`` rows of the parameter arrays to a subject index.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import ndtr

_DISABLED = os.environ.get("MARGLIK_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in CI
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# single LBA accumulator, scalar versions (compiled when numba is present)


def _acc_pdf(t, b, A, v, s):
    ts = t * s
    z1 = (b - A - t * v) / ts
    z2 = (b - t * v) / ts
    p1 = 0.5 * math.erfc(-z1 * _INV_SQRT2)
    p2 = 0.5 * math.erfc(-z2 * _INV_SQRT2)
    d1 = _INV_SQRT2PI * math.exp(-0.5 * z1 * z1)
    d2 = _INV_SQRT2PI * math.exp(-0.5 * z2 * z2)
    return (-v * p1 + s * d1 + v * p2 - s * d2) / A


def _acc_sf(t, b, A, v, s):
    ts = t * s
    z1 = (b - A - t * v) / ts
    z2 = (b - t * v) / ts
    p1 = 0.5 * math.erfc(-z1 * _INV_SQRT2)
    p2 = 0.5 * math.erfc(-z2 * _INV_SQRT2)
    d1 = _INV_SQRT2PI * math.exp(-0.5 * z1 * z1)
    d2 = _INV_SQRT2PI * math.exp(-0.5 * z2 * z2)
    return ((b - t * v) * p2 - (b - A - t * v) * p1 + ts * (d2 - d1)) / A


def _lba_loglik_loop(rt, resp, cond, offsets, subj, b, A, v, tau, s):
    G, N = A.shape
    nacc = v.shape[2]
    out = np.zeros((G, N))
    for g in range(G):
        j = subj[g]
        lo = offsets[j]
        hi = offsets[j + 1]
        for n in range(N):
            acc = 0.0
            aa = A[g, n]
            for t in range(lo, hi):
                c = cond[t]
                dt = rt[t] - tau[g, n, c]
                if dt <= 0.0:
                    acc = -np.inf
                    break
                bb = b[g, n, c]
                r = resp[t]
                # one log per trial: winner density times loser survivals
                dens = max(_acc_pdf(dt, bb, aa, v[g, n, r], s), 0.0)
                for k in range(nacc):
                    if k != r:
                        dens *= max(_acc_sf(dt, bb, aa, v[g, n, k], s), 0.0)
                if not dens > 0.0:
                    acc = -np.inf
                    break
                acc += math.log(dens)
            out[g, n] = acc
    return out


def _logit_loglik_loop(X, y, offsets, subj, coef):
    G, N, P = coef.shape
    K = P - 1
    out = np.zeros((G, N))
    for g in range(G):
        j = subj[g]
        lo = offsets[j]
        hi = offsets[j + 1]
        for n in range(N):
            acc = 0.0
            for t in range(lo, hi):
                u = coef[g, n, 0]
                for k in range(K):
                    u += coef[g, n, k + 1] * X[t, k]
                if u > 0.0:
                    sp = u + math.log1p(math.exp(-u))
                else:
                    sp = math.log1p(math.exp(u))
                acc += y[t] * u - sp
            out[g, n] = acc
    return out


if HAVE_NUMBA:
    _acc_pdf_nb = njit(nogil=True, cache=True)(_acc_pdf)
    _acc_sf_nb = njit(nogil=True, cache=True)(_acc_sf)

    @njit(nogil=True, cache=True)
    def _lba_loglik_nb(rt, resp, cond, offsets, subj, b, A, v, tau, s):
        G, N = A.shape
        nacc = v.shape[2]
        out = np.zeros((G, N))
        for g in range(G):
            j = subj[g]
            lo = offsets[j]
            hi = offsets[j + 1]
            for n in range(N):
                acc = 0.0
                aa = A[g, n]
                for t in range(lo, hi):
                    c = cond[t]
                    dt = rt[t] - tau[g, n, c]
                    if dt <= 0.0:
                        acc = -np.inf
                        break
                    bb = b[g, n, c]
                    r = resp[t]
                    # one log per trial: winner density times loser survivals
                    dens = max(_acc_pdf_nb(dt, bb, aa, v[g, n, r], s), 0.0)
                    for k in range(nacc):
                        if k != r:
                            dens *= max(_acc_sf_nb(dt, bb, aa, v[g, n, k], s), 0.0)
                    if not dens > 0.0:
                        acc = -np.inf
                        break
                    acc += math.log(dens)
                out[g, n] = acc
        return out

    _logit_loglik_nb = njit(nogil=True, cache=True)(_logit_loglik_loop)


# ---------------------------------------------------------------------------
# numpy twins


def acc_pdf_np(t, b, A, v, s):
    """Finishing-time density of one accumulator (vectorized numpy)."""
    t = np.asarray(t, dtype=float)
    ts = t * s
    z1 = (b - A - t * v) / ts
    z2 = (b - t * v) / ts
    phi1 = np.exp(-0.5 * z1 * z1) * _INV_SQRT2PI
    phi2 = np.exp(-0.5 * z2 * z2) * _INV_SQRT2PI
    return (-v * ndtr(z1) + s * phi1 + v * ndtr(z2) - s * phi2) / A


def acc_sf_np(t, b, A, v, s):
    """Probability an accumulator has not finished by ``t`` (vectorized numpy)."""
    t = np.asarray(t, dtype=float)
    ts = t * s
    z1 = (b - A - t * v) / ts
    z2 = (b - t * v) / ts
    phi1 = np.exp(-0.5 * z1 * z1) * _INV_SQRT2PI
    phi2 = np.exp(-0.5 * z2 * z2) * _INV_SQRT2PI
    return ((b - t * v) * ndtr(z2) - (b - A - t * v) * ndtr(z1) + ts * (phi2 - phi1)) / A


def _lba_loglik_np(rt, resp, cond, offsets, subj, b, A, v, tau, s):
    G, N = A.shape
    nacc = v.shape[2]
    out = np.empty((G, N))
    for g in range(G):
        j = subj[g]
        sl = slice(offsets[j], offsets[j + 1])
        r = resp[sl]
        c = cond[sl]
        dt = rt[sl][None, :] - tau[g][:, c]  # (N, T)
        bb = b[g][:, c]
        aa = A[g][:, None]
        ok = dt > 0.0
        dts = np.where(ok, dt, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            total = np.zeros_like(dts)
            for k in range(nacc):
                vk = v[g, :, k][:, None]
                winner = r[None, :] == k
                dens = np.where(winner, acc_pdf_np(dts, bb, aa, vk, s), acc_sf_np(dts, bb, aa, vk, s))
                total += np.where(dens > 0.0, np.log(np.where(dens > 0.0, dens, 1.0)), -np.inf)
        total = np.where(ok, total, -np.inf)
        out[g] = total.sum(axis=1)
    return out


def _logit_loglik_np(X, y, offsets, subj, coef):
    G, N, _ = coef.shape
    out = np.empty((G, N))
    for g in range(G):
        j = subj[g]
        sl = slice(offsets[j], offsets[j + 1])
        u = coef[g, :, :1] + coef[g, :, 1:] @ X[sl].T  # (N, T)
        out[g] = np.sum(y[sl] * u - np.logaddexp(0.0, u), axis=1)
    return out


# ---------------------------------------------------------------------------
# dispatch


def _prep_lba(rt, resp, cond, offsets, subj, b, A, v, tau):
    return (
        np.ascontiguousarray(rt, dtype=np.float64),
        np.ascontiguousarray(resp, dtype=np.int64),
        np.ascontiguousarray(cond, dtype=np.int64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(subj, dtype=np.int64),
        np.ascontiguousarray(b, dtype=np.float64),
        np.ascontiguousarray(A, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        np.ascontiguousarray(tau, dtype=np.float64),
    )


def lba_loglik(rt, resp, cond, offsets, subj, b, A, v, tau, s, use_numba=None):
    """Summed LBA trial log densities, shape ``(G, N)``.

    Parameters
    ----------
    rt, resp, cond : ndarray
        Flat trial arrays (response time in seconds, 0-based accumulator index
        of the response, 0-based condition index).
    offsets, subj : ndarray
        Ragged layout: subject ``j`` owns trials ``offsets[j]:offsets[j+1]``;
        row ``g`` of the parameters belongs to subject ``subj[g]``.
    b, tau : ndarray, shape (G, N, n_conditions)
        Threshold and non-decision time per condition.
    A : ndarray, shape (G, N)
        Start-point range.
    v : ndarray, shape (G, N, n_accumulators)
        Drift-rate means.
    s : float
        Drift-rate standard deviation.
    """
    args = _prep_lba(rt, resp, cond, offsets, subj, b, A, v, tau)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and HAVE_NUMBA:
        return _lba_loglik_nb(*args, float(s))
    return _lba_loglik_np(*args, float(s))


def logit_loglik(X, y, offsets, subj, coef, use_numba=None):
    """Summed binary-logit log probabilities, shape ``(G, N)``.

    ``coef[g, n]`` holds the intercept followed by one slope per column of ``X``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    subj = np.ascontiguousarray(subj, dtype=np.int64)
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and HAVE_NUMBA:
        return _logit_loglik_nb(X, y, offsets, subj, coef)
    return _logit_loglik_np(X, y, offsets, subj, coef)


def acc_pdf(t, b, A, v, s):
    return acc_pdf_np(t, b, A, v, s)


def acc_sf(t, b, A, v, s):
    return acc_sf_np(t, b, A, v, s)


def acc_cdf(t, b, A, v, s):
    """Finishing-time CDF of one accumulator.

    The lower tail is summed directly so early times do not lose everything
    to the cancellation in ``1 - sf``.
    """
    t = np.asarray(t, dtype=float)
    ts = t * s
    z1 = (b - A - t * v) / ts
    z2 = (b - t * v) / ts
    phi1 = np.exp(-0.5 * z1 * z1) * _INV_SQRT2PI
    phi2 = np.exp(-0.5 * z2 * z2) * _INV_SQRT2PI
    lower = np.maximum(((b - t * v) * ndtr(-z2) - (b - A - t * v) * ndtr(-z1) + ts * (phi1 - phi2)) / A, 0.0)
    out = np.where(lower < 0.5, lower, 1.0 - acc_sf_np(t, b, A, v, s))
    return float(out) if out.ndim == 0 else out
