"""Binary panel-choice models: mixed logit (MIXL) and generalized multinomial logit (GMNL).

Choice probability of "take" (``choice = 1``) on a trial with attributes
``x_1..x_K`` is ``logistic(b_0j + sum_k b_jk x_k)``; the "not take" option is
the zero-utility reference.  The last attribute (cost) carries no taste
heterogeneity.

GMNL individual coefficients::

    b_0j = beta_0 + eta_0j
    b_jk = lam_j beta_k + (gamma + (1 - gamma) lam_j) eta_jk   (k < K)
    b_jK = lam_j beta_K
    lam_j = exp(-delta^2 / 2 + delta zeta_j)

With ``delta = 0`` every ``lam_j`` is 1 and the model is the mixed logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from ..core import as_generator
from .base import Dataset, HierarchicalModel, SubjectData, concat_column, ragged_offsets

BETA_PRIOR_VAR = 100.0
DELTA_SCALE = 0.2
COST_LEVELS = (0.0, 10.0, 20.0, 30.0)


def half_cauchy_logpdf(x, scale: float = 1.0):
    """Log density of the half-Cauchy distribution on ``x >= 0``."""
    x = np.asarray(x, dtype=float)
    return np.log(2.0 / (np.pi * scale)) - np.log1p((x / scale) ** 2)


def _softplus(u):
    return np.logaddexp(0.0, u)


@dataclass(frozen=True)
class _LogitData:
    X: np.ndarray
    y: np.ndarray
    offsets: np.ndarray


class MixedLogitModel(HierarchicalModel):
    """Mixed logit with normal taste heterogeneity on the intercept and ``K - 1`` attributes."""

    name = "mixl"

    def __init__(self, n_attributes: int = 5):
        if n_attributes < 1:
            raise ValueError("need at least one attribute")
        self.K = int(n_attributes)
        self.payload_columns = tuple(f"x{k + 1}" for k in range(self.K)) + ("choice",)
        self.theta_names = self._theta_names()
        self.alpha_names = self._alpha_names()

    @property
    def data_key(self) -> str:
        return f"logit{self.K}"

    @property
    def n_random(self) -> int:
        return self.K  # intercept plus K - 1 attributes

    def _theta_names(self):
        return (tuple(f"beta{k}" for k in range(self.K + 1))
                + tuple(f"log_sigma{k}" for k in range(self.n_random)))

    def _alpha_names(self):
        return tuple(f"eta{k}" for k in range(self.n_random))

    def describe(self):
        return {"model": self.name, "n_attributes": self.K}

    # -- parameters ---------------------------------------------------------

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        K = self.K
        return {
            "beta": theta[: K + 1],
            "sigma": np.exp(theta[K + 1: K + 1 + self.n_random]),
            "delta": 0.0,
            "gamma": 0.0,
        }

    def _beta_sigma_logprior(self, theta):
        K = self.K
        beta = theta[: K + 1]
        log_sigma = theta[K + 1: K + 1 + self.n_random]
        lp = np.sum(-0.5 * np.log(2 * np.pi * BETA_PRIOR_VAR) - 0.5 * beta ** 2 / BETA_PRIOR_VAR)
        lp += np.sum(half_cauchy_logpdf(np.exp(log_sigma)) + log_sigma)
        return float(lp)

    def log_theta_prior(self, theta):
        return self._beta_sigma_logprior(np.asarray(theta, dtype=float))

    def _sample_beta_sigma(self, n, gen):
        beta = gen.normal(0.0, np.sqrt(BETA_PRIOR_VAR), size=(n, self.K + 1))
        sigma = np.abs(gen.standard_cauchy(size=(n, self.n_random)))
        return np.hstack([beta, np.log(sigma)])

    def sample_theta_prior(self, n, rng):
        return self._sample_beta_sigma(n, as_generator(rng))

    def re_prior_gaussian(self, theta):
        p = self.unpack(theta)
        sd = np.asarray(p["sigma"], dtype=float)
        return np.zeros(sd.size), np.diag(sd)

    # -- observations -------------------------------------------------------

    def prepare(self, dataset: Dataset) -> _LogitData:
        X = np.column_stack([concat_column(dataset, f"x{k + 1}") for k in range(self.K)])
        y = concat_column(dataset, "choice")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("choice must be 0 or 1")
        return _LogitData(X=X, y=y, offsets=ragged_offsets(dataset))

    def coefficients(self, alpha: np.ndarray, params: dict) -> np.ndarray:
        """Per-particle coefficient vectors ``(..., K + 1)``: intercept then slopes."""
        beta = np.asarray(params["beta"], dtype=float)
        eta = alpha[..., : self.n_random]
        coef = np.broadcast_to(beta, alpha.shape[:-1] + (self.K + 1,)).copy()
        coef[..., : self.n_random] += eta
        return coef

    def log_obs_params(self, data, subj, alpha, params):
        coef = self.coefficients(np.asarray(alpha, dtype=float), params)
        return _kernels.logit_loglik(data.X, data.y, data.offsets, subj, coef)

    def log_obs_batch(self, data, subj, alpha, theta):
        return self.log_obs_params(data, subj, alpha, self.unpack(theta))

    def choice_probability(self, X, alpha, theta) -> np.ndarray:
        coef = self.coefficients(np.atleast_2d(alpha), self.unpack(theta))[0]
        u = coef[0] + np.asarray(X, dtype=float) @ coef[1:]
        return 1.0 / (1.0 + np.exp(-u))

    def simulate_attributes(self, T, gen):
        X = gen.integers(0, 2, size=(T, self.K)).astype(float)
        X[:, -1] = gen.choice(COST_LEVELS, size=T)
        return X

    def simulate_subject(self, subject_id, alpha, theta, T, gen):
        X = self.simulate_attributes(T, gen)
        p = self.choice_probability(X, alpha, theta)
        choice = (gen.random(T) < p).astype(float)
        trials = {f"x{k + 1}": X[:, k] for k in range(self.K)}
        trials["choice"] = choice
        return SubjectData(subject_id, trials)


class GMNLModel(MixedLogitModel):
    """Generalized multinomial logit: taste plus scale heterogeneity.

    Parameters
    ----------
    n_attributes : int
        Number of trial attributes ``K``.
    fixed_delta : float, optional
        Hold the scale-heterogeneity parameter fixed instead of estimating it.
        ``fixed_delta=0`` removes ``zeta_j`` and ``gamma`` altogether, giving
        the mixed-logit parameterization evaluated through the GMNL formula.
    """

    name = "gmnl"

    def __init__(self, n_attributes: int = 5, fixed_delta: float | None = None):
        if fixed_delta is not None and fixed_delta < 0:
            raise ValueError("delta must be non-negative")
        self.fixed_delta = fixed_delta
        super().__init__(n_attributes)

    @property
    def _reduced(self) -> bool:
        return self.fixed_delta is not None and self.fixed_delta == 0.0

    def _theta_names(self):
        names = super()._theta_names()
        if self.fixed_delta is None:
            names += ("log_delta",)
        if not self._reduced:
            names += ("logit_gamma",)
        return names

    def _alpha_names(self):
        names = super()._alpha_names()
        return names if self._reduced else names + ("zeta",)

    def describe(self):
        out = {"model": self.name, "n_attributes": self.K}
        if self.fixed_delta is not None:
            out["fixed_delta"] = self.fixed_delta
        return out

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        p = super().unpack(theta)
        i = self.K + 1 + self.n_random
        if self.fixed_delta is None:
            p["delta"] = float(np.exp(theta[i]))
            i += 1
        else:
            p["delta"] = float(self.fixed_delta)
        p["gamma"] = 0.0 if self._reduced else float(1.0 / (1.0 + np.exp(-theta[i])))
        return p

    def log_theta_prior(self, theta):
        theta = np.asarray(theta, dtype=float)
        lp = self._beta_sigma_logprior(theta)
        i = self.K + 1 + self.n_random
        if self.fixed_delta is None:
            ld = theta[i]
            lp += float(half_cauchy_logpdf(np.exp(ld), DELTA_SCALE)) + ld
            i += 1
        if not self._reduced:
            u = theta[i]
            lp += float(-_softplus(-u) - _softplus(u))
        return float(lp)

    def sample_theta_prior(self, n, rng):
        gen = as_generator(rng)
        cols = [self._sample_beta_sigma(n, gen)]
        if self.fixed_delta is None:
            cols.append(np.log(DELTA_SCALE * np.abs(gen.standard_cauchy(size=(n, 1)))))
        if not self._reduced:
            g = gen.random((n, 1))
            cols.append(np.log(g) - np.log1p(-g))
        return np.hstack(cols)

    def re_prior_gaussian(self, theta):
        p = self.unpack(theta)
        sd = np.asarray(p["sigma"], dtype=float)
        if not self._reduced:
            sd = np.append(sd, 1.0)
        return np.zeros(sd.size), np.diag(sd)

    def coefficients(self, alpha, params):
        beta = np.asarray(params["beta"], dtype=float)
        delta = float(params["delta"])
        gamma = float(params["gamma"])
        R = self.n_random
        eta = alpha[..., :R]
        if alpha.shape[-1] > R:
            lam = np.exp(-0.5 * delta * delta + delta * alpha[..., R])
        else:
            lam = np.exp(np.full(alpha.shape[:-1], -0.5 * delta * delta))
        lam = lam[..., None]
        mix = gamma + (1.0 - gamma) * lam
        coef = np.empty(alpha.shape[:-1] + (self.K + 1,))
        coef[..., 0] = beta[0] + eta[..., 0]
        coef[..., 1:R] = lam * beta[1:R] + mix * eta[..., 1:R]
        coef[..., R:] = lam * beta[R:]
        return coef

