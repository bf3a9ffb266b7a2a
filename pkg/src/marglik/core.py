"""Log-domain primitives, random streams and small linear-algebra helpers."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
RIDGE_EPS = 1e-8


class NumericalError(ArithmeticError):
    """Raised when a computation cannot produce a valid value."""


def _as_logvalues(xs) -> np.ndarray:
    arr = np.asarray(xs, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("empty log-sum")
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise NumericalError("log values must not be NaN or +inf")
    return arr


def log_sum_exp(xs) -> float:
    """Return ``log(sum(exp(xs)))`` without overflow.

    ``-inf`` entries stand for zero and are allowed; if every entry is
    ``-inf`` the result is ``-inf``.
    """
    arr = _as_logvalues(xs)
    top = arr.max()
    if top == -np.inf:
        return -np.inf
    return float(top + np.log(np.sum(np.exp(arr - top))))


def log_mean_exp(xs) -> float:
    """Log of the arithmetic mean of ``exp(xs)``."""
    arr = _as_logvalues(xs)
    return log_sum_exp(arr) - float(np.log(arr.size))


def normalized_weight_moments(log_ws) -> tuple[float, float]:
    """Return ``(sum of squared normalized weights, effective sample size)``.

    Parameters
    ----------
    log_ws : array_like
        Unnormalized log importance weights.

    Returns
    -------
    sum_sq : float
        ``sum(w_i**2) / sum(w_i)**2``, which lies in ``[1/n, 1]``.
    ess : float
        ``1 / sum_sq``.
    """
    arr = _as_logvalues(log_ws)
    top = arr.max()
    if top == -np.inf:
        raise NumericalError("zero total weight")
    w = np.exp(arr - top)
    total = w.sum()
    sum_sq = float(np.sum(w * w) / (total * total))
    return sum_sq, 1.0 / sum_sq


def log_mean_exp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise log-mean-exp of a 2-D array (rows of all ``-inf`` give ``-inf``)."""
    a = np.asarray(a, dtype=float)
    top = a.max(axis=-1, keepdims=True)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.mean(np.exp(a - safe), axis=-1)) + safe[..., 0]
    return out


# ---------------------------------------------------------------------------
# random streams


def _encode(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream path indices must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by ``(seed, path)``.

    The same ``(seed, path)`` always yields the same Philox generator, so a
    draw never depends on the order in which other streams were consumed.
    Paths are extended with :meth:`child`, e.g. ``stream.child("like", i)``.
    """

    seed: int
    path: tuple = field(default=())

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=tuple(_encode(k) for k in self.path)
        )
        return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# Gaussian helpers


def symmetrize(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    return 0.5 * (cov + cov.T)


def cholesky_ridge(cov: np.ndarray, eps: float = RIDGE_EPS) -> np.ndarray:
    """Lower Cholesky factor, retrying once with a trace-scaled ridge."""
    cov = symmetrize(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    ridge = eps * max(np.trace(cov) / d, 1e-300)
    try:
        return np.linalg.cholesky(cov + ridge * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite after ridge") from exc


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Multivariate normal log density for rows of ``x`` given a lower Cholesky factor."""
    x = np.atleast_2d(x)
    d = chol.shape[0]
    u = np.linalg.solve(chol, (x - mean).T).T if d > 1 else (x - mean) / chol[0, 0]
    half_logdet = np.sum(np.log(np.diag(chol)))
    return -0.5 * np.sum(u * u, axis=1) - half_logdet - 0.5 * d * LOG_2PI


def mvt_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray, df: float) -> np.ndarray:
    """Multivariate Student-t log density with scale ``chol @ chol.T``."""
    from scipy.special import gammaln

    x = np.atleast_2d(x)
    d = chol.shape[0]
    u = np.linalg.solve(chol, (x - mean).T).T
    maha = np.sum(u * u, axis=1)
    half_logdet = np.sum(np.log(np.diag(chol)))
    return (
        gammaln(0.5 * (df + d))
        - gammaln(0.5 * df)
        - 0.5 * d * np.log(df * np.pi)
        - half_logdet
        - 0.5 * (df + d) * np.log1p(maha / df)
    )


def batched_mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol_inv: np.ndarray,
                       half_logdet: np.ndarray) -> np.ndarray:
    """Gaussian log density for ``x`` of shape ``(G, N, d)``.

    ``mean`` is ``(G, d)`` or ``(d,)``, ``chol_inv`` the inverse lower factor
    ``(G, d, d)`` or ``(d, d)`` and ``half_logdet`` matching ``(G,)`` or scalar.
    """
    d = x.shape[-1]
    diff = x - (mean[:, None, :] if np.ndim(mean) == 2 else mean)
    if np.ndim(chol_inv) == 3:
        u = np.einsum("gij,gnj->gni", chol_inv, diff)
        hl = np.asarray(half_logdet)[:, None]
    else:
        u = diff @ chol_inv.T
        hl = half_logdet
    return -0.5 * np.sum(u * u, axis=-1) - hl - 0.5 * d * LOG_2PI


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=float)
    raw = w / w.sum() * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts
