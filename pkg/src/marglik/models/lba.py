"""Hierarchical linear ballistic accumulator (LBA) for choice and response time.

Two accumulators race: index 0 carries the error drift ``v_e`` and index 1
the correct drift ``v_c``.  In data files ``response`` is 1-based, so
``response = 1`` is the error response and ``response = 2`` the correct one.

Random effects are the log of ``(b, A, v_e, v_c, tau)``, with thresholds and
non-decision times split by condition according to the variant:

====  ===========================================================
I     one threshold, one non-decision time
II    thresholds for accuracy+neutral and for speed
III   one threshold per condition
IV    one threshold and one non-decision time per condition
====  ===========================================================

``alpha_j ~ N(mu, Sigma)``, ``mu ~ N(0, I)`` and ``Sigma`` follows the
Huang-Wand prior with its auxiliary scales integrated out analytically.
``theta`` stacks ``mu`` and the lower Cholesky factor of ``Sigma`` with a
log-transformed diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, multigammaln
from scipy.stats import invgamma, invwishart

from .. import _kernels
from ..core import LOG_2PI, as_generator
from .base import Dataset, HierarchicalModel, SubjectData, concat_column, ragged_offsets

CONDITIONS = ("a", "n", "s")

# per variant: alpha names, column of b per condition, column of tau per condition
_VARIANTS = {
    "I": (("log_b", "log_A", "log_ve", "log_vc", "log_tau"), (0, 0, 0), (4, 4, 4)),
    "II": (("log_b_an", "log_b_s", "log_A", "log_ve", "log_vc", "log_tau"), (0, 0, 1), (5, 5, 5)),
    "III": (("log_b_a", "log_b_n", "log_b_s", "log_A", "log_ve", "log_vc", "log_tau"),
            (0, 1, 2), (6, 6, 6)),
    "IV": (("log_b_a", "log_b_n", "log_b_s", "log_A", "log_ve", "log_vc",
            "log_tau_a", "log_tau_n", "log_tau_s"), (0, 1, 2), (6, 7, 8)),
}


def lba_density(c: int, t: float, b: float, A: float, v, s: float = 1.0, tau: float = 0.0) -> float:
    """Log joint density of response ``c`` (0-based) at time ``t``.

    ``f_c(t - tau) * prod_{k != c} (1 - F_k(t - tau))``; drift rates are not
    truncated, so the density integrates to ``1 - prod_k Phi(-v_k / s)``.
    """
    vals = [t, b, A, s, tau, *np.atleast_1d(v)]
    if not np.all(np.isfinite(vals)):
        raise ValueError("LBA parameters must be finite")
    if b <= 0 or A <= 0 or s <= 0:
        raise ValueError("b, A and s must be positive")
    v = np.atleast_1d(np.asarray(v, dtype=float))
    dt = t - tau
    if dt <= 0:
        return -np.inf
    f = float(_kernels.acc_pdf(dt, b, A, v[c], s))
    if not f > 0:
        return -np.inf
    out = np.log(f)
    for k in range(v.size):
        if k != c:
            sf = float(_kernels.acc_sf(dt, b, A, v[k], s))
            if not sf > 0:
                return -np.inf
            out += np.log(sf)
    return float(out)


def huang_wand_logpdf(cov: np.ndarray, nu: float = 2.0, scale: float | np.ndarray = 1.0) -> float:
    """Marginal log density of the Huang-Wand covariance prior.

    ``Sigma | a ~ IW(nu + d - 1, 2 nu diag(1/a))`` with
    ``a_k ~ InvGamma(shape=1/2, scale=1/A_k^2)``; each ``a_k`` integrates out
    in closed form.
    """
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[0]
    A = np.broadcast_to(np.asarray(scale, dtype=float), (d,))
    beta = 1.0 / A ** 2
    m = nu + d - 1.0
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return -np.inf
    prec_diag = np.diag(np.linalg.inv(cov))
    lp = -0.5 * (m + d + 1.0) * logdet - 0.5 * m * d * np.log(2.0) - multigammaln(0.5 * m, d)
    lp += np.sum(
        0.5 * m * np.log(2.0 * nu) + 0.5 * np.log(beta) - 0.5 * np.log(np.pi)
        + gammaln(0.5 * (m + 1.0)) - 0.5 * (m + 1.0) * np.log(nu * prec_diag + beta)
    )
    return float(lp)


def chol_from_vector(vec: np.ndarray, d: int) -> np.ndarray:
    """Lower Cholesky factor from its row-wise lower triangle, diagonal on log scale."""
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = vec
    di = np.diag_indices(d)
    L[di] = np.exp(L[di])
    return L


def chol_to_vector(L: np.ndarray) -> np.ndarray:
    L = np.array(L, dtype=float)
    d = L.shape[0]
    L[np.diag_indices(d)] = np.log(np.diag(L))
    return L[np.tril_indices(d)]


def chol_log_jacobian(vec: np.ndarray, d: int) -> float:
    """Log |d Sigma / d vec| for ``Sigma = L L^T`` with log-diagonal ``L``."""
    log_diag = np.asarray(vec)[_diag_positions(d)]
    return float(d * np.log(2.0) + np.sum((d - np.arange(d) + 1.0) * log_diag))


def _diag_positions(d: int) -> np.ndarray:
    rows, cols = np.tril_indices(d)
    return np.flatnonzero(rows == cols)


@dataclass(frozen=True)
class _LBAData:
    rt: np.ndarray
    resp: np.ndarray
    cond: np.ndarray
    offsets: np.ndarray


class LBAModel(HierarchicalModel):
    payload_columns = ("condition", "response", "rt")
    obs_depends_on_theta = False

    def __init__(self, variant: str = "I", s: float = 1.0, nu: float = 2.0, scale: float = 1.0,
                 conditions: tuple[str, ...] = CONDITIONS):
        if variant not in _VARIANTS:
            raise ValueError(f"unknown LBA variant {variant!r}")
        if len(conditions) != 3:
            raise ValueError("LBA variants are defined for three conditions")
        self.variant = variant
        self.s = float(s)
        self.nu = float(nu)
        self.scale = float(scale)
        self.conditions = tuple(conditions)
        names, b_cols, tau_cols = _VARIANTS[variant]
        self.alpha_names = names
        self.b_cols = np.array(b_cols)
        self.tau_cols = np.array(tau_cols)
        self.A_col = names.index("log_A")
        self.v_cols = np.array([names.index("log_ve"), names.index("log_vc")])
        d = len(names)
        chol_names = [
            (f"log_L{i}{j}" if i == j else f"L{i}{j}") for i, j in zip(*np.tril_indices(d))
        ]
        self.theta_names = tuple(f"mu_{n}" for n in names) + tuple(chol_names)
        self.name = f"lba_{variant}"

    @property
    def data_key(self) -> str:
        return "lba:" + ",".join(self.conditions)

    def describe(self):
        return {"model": self.name, "s": self.s, "nu": self.nu, "scale": self.scale}

    # -- parameters ---------------------------------------------------------

    def split_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        d = self.d_alpha
        return theta[:d], chol_from_vector(theta[d:], d)

    def theta_from(self, mu, cov) -> np.ndarray:
        return np.concatenate([np.asarray(mu, float), chol_to_vector(np.linalg.cholesky(cov))])

    def unpack(self, theta):
        mu, L = self.split_theta(theta)
        return {"mu": mu, "cov": L @ L.T}

    def log_theta_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        d = self.d_alpha
        mu, L = self.split_theta(theta)
        if not np.all(np.isfinite(L)) or np.any(np.diag(L) <= 0):
            return -np.inf
        lp = float(np.sum(-0.5 * LOG_2PI - 0.5 * mu ** 2))
        lp += huang_wand_logpdf(L @ L.T, self.nu, self.scale)
        lp += chol_log_jacobian(theta[d:], d)
        return lp

    def sample_theta_prior(self, n, rng):
        gen = as_generator(rng)
        d = self.d_alpha
        out = np.empty((n, self.d_theta))
        for i in range(n):
            a = invgamma.rvs(0.5, scale=1.0 / self.scale ** 2, size=d, random_state=gen)
            cov = invwishart.rvs(df=self.nu + d - 1, scale=2 * self.nu * np.diag(1.0 / a),
                                 random_state=gen)
            cov = np.atleast_2d(cov)
            out[i] = self.theta_from(gen.standard_normal(d), cov)
        return out

    def re_prior_gaussian(self, theta):
        return self.split_theta(theta)

    def gibbs_theta(self, alpha: np.ndarray, theta: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        """Draw ``theta | alpha`` exactly, augmenting with the Huang-Wand scales ``a_k``.

        ``a_k | Sigma``, ``Sigma | a, mu, alpha`` (inverse Wishart) and
        ``mu | Sigma, alpha`` (normal) are all conjugate.
        """
        S, d = alpha.shape
        mu, L = self.split_theta(theta)
        cov = L @ L.T
        m = self.nu + d - 1.0
        prec_diag = np.diag(np.linalg.inv(cov))
        a = invgamma.rvs(0.5 * (m + 1.0), scale=self.nu * prec_diag + 1.0 / self.scale ** 2,
                         random_state=gen)
        dev = alpha - mu
        psi = 2.0 * self.nu * np.diag(1.0 / np.atleast_1d(a)) + dev.T @ dev
        cov = np.atleast_2d(invwishart.rvs(df=m + S, scale=psi, random_state=gen))
        cov_inv = np.linalg.inv(cov)
        P = np.eye(d) + S * cov_inv
        Lp = np.linalg.cholesky(P)
        mean = np.linalg.solve(P, cov_inv @ alpha.sum(axis=0))
        mu = mean + np.linalg.solve(Lp.T, gen.standard_normal(d))
        return self.theta_from(mu, cov)

    # -- observations -------------------------------------------------------

    def prepare(self, dataset: Dataset) -> _LBAData:
        labels = np.concatenate([np.asarray(s.trials["condition"]).astype(str) for s in dataset.subjects])
        lookup = {c: i for i, c in enumerate(self.conditions)}
        bad = set(labels) - set(lookup)
        if bad:
            raise ValueError(f"unknown condition labels {sorted(bad)}")
        cond = np.array([lookup[c] for c in labels], dtype=np.int64)
        rt = concat_column(dataset, "rt")
        if not np.all(rt > 0):
            raise ValueError("invalid response time")
        resp = concat_column(dataset, "response", dtype=np.int64) - 1
        if np.any((resp < 0) | (resp > 1)):
            raise ValueError("response must be 1 (error) or 2 (correct)")
        return _LBAData(rt=rt, resp=resp, cond=cond, offsets=ragged_offsets(dataset))

    def initial_alpha(self, subject: SubjectData) -> np.ndarray:
        """Feasible log-scale starting point: non-decision time below the fastest response."""
        tau = 0.5 * float(np.min(np.asarray(subject.trials["rt"], dtype=float)))
        start = {"b": 1.0, "A": 0.5, "ve": 1.0, "vc": 2.0, "tau": tau}
        return np.log([start[n[4:].split("_")[0]] for n in self.alpha_names])

    def natural(self, alpha: np.ndarray):
        """Map log-scale random effects to ``(b, A, v, tau)`` arrays per condition."""
        e = np.exp(alpha)
        b = e[..., self.b_cols]
        A = e[..., self.A_col]
        v = e[..., self.v_cols]
        tau = e[..., self.tau_cols]
        return b, A, v, tau

    def log_obs_batch(self, data, subj, alpha, theta):
        alpha = np.asarray(alpha, dtype=float)
        with np.errstate(over="ignore"):
            b, A, v, tau = self.natural(alpha)
        out = np.full(alpha.shape[:2], -np.inf)
        ok = np.all(np.isfinite(b), -1) & np.isfinite(A) & np.all(np.isfinite(v), -1) & (A > 0)
        ok &= np.all(b > 0, -1)
        if ok.all():
            return _kernels.lba_loglik(data.rt, data.resp, data.cond, data.offsets, subj,
                                       b, A, v, tau, self.s)
        # evaluate the finite rows only; overflowed parameters have zero density
        safe = lambda x, fill: np.where(ok.reshape(ok.shape + (1,) * (x.ndim - 2)), x, fill)
        res = _kernels.lba_loglik(data.rt, data.resp, data.cond, data.offsets, subj,
                                  safe(b, 1.0), safe(A, 1.0), safe(v, 1.0), safe(tau, 0.1), self.s)
        out[ok] = res[ok]
        return out

    def simulate_subject(self, subject_id, alpha, theta, T, gen):
        b, A, v, tau = self.natural(np.asarray(alpha, dtype=float))
        cond = np.arange(T) % len(self.conditions)
        start = gen.uniform(0.0, A, size=(T, 2))
        drift = gen.normal(v, self.s, size=(T, 2))
        bad = ~np.any(drift > 0, axis=1)
        while bad.any():
            drift[bad] = gen.normal(v, self.s, size=(int(bad.sum()), 2))
            bad = ~np.any(drift > 0, axis=1)
        thr = b[cond][:, None]
        with np.errstate(divide="ignore"):
            times = np.where(drift > 0, np.maximum(thr - start, 0.0) / drift, np.inf)
        resp = np.argmin(times, axis=1)
        rt = tau[cond] + times[np.arange(T), resp]
        labels = np.array(self.conditions, dtype=object)[cond]
        return SubjectData(subject_id, {"condition": labels, "response": resp + 1, "rt": rt})


def lba_mass(b, A, v, s=1.0) -> float:
    """Total probability a response occurs: ``1 - prod_k Phi(-v_k / s)``."""
    from scipy.special import ndtr

    v = np.asarray(v, dtype=float)
    return float(1.0 - np.prod(ndtr(-v / s)))

