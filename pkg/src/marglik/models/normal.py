"""Normal-normal random-intercept model with closed-form marginals.

``y_ij ~ N(alpha_j, sigma_y^2)``, ``alpha_j ~ N(mu, sigma_alpha^2)``,
``mu ~ N(0, tau^2)``. Only ``mu`` is unknown, which makes every quantity the
estimators target available analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import LOG_2PI, as_generator
from .base import Dataset, HierarchicalModel, SubjectData, ragged_offsets


@dataclass(frozen=True)
class _NormalData:
    n: np.ndarray
    total: np.ndarray
    sumsq: np.ndarray


class NormalNormalModel(HierarchicalModel):
    name = "normal_normal"
    theta_names = ("mu",)
    alpha_names = ("alpha",)
    payload_columns = ("y",)
    obs_depends_on_theta = False

    def __init__(self, sigma_y: float = 1.0, sigma_alpha: float = 1.0, tau: float = 1.0):
        for k, v in (("sigma_y", sigma_y), ("sigma_alpha", sigma_alpha), ("tau", tau)):
            if not v > 0:
                raise ValueError(f"{k} must be positive")
        self.sigma_y = float(sigma_y)
        self.sigma_alpha = float(sigma_alpha)
        self.tau = float(tau)

    def describe(self) -> dict:
        return {"model": self.name, "sigma_y": self.sigma_y,
                "sigma_alpha": self.sigma_alpha, "tau": self.tau}

    def log_theta_prior(self, theta) -> float:
        mu = np.asarray(theta, dtype=float).ravel()[0]
        with np.errstate(over="ignore"):
            z2 = (mu / self.tau) ** 2  # overflows to inf, i.e. zero prior density
        return float(-0.5 * LOG_2PI - np.log(self.tau) - 0.5 * z2)

    def sample_theta_prior(self, n, rng):
        return as_generator(rng).normal(0.0, self.tau, size=(n, 1))

    def re_prior_gaussian(self, theta):
        mu = float(np.asarray(theta, dtype=float).ravel()[0])
        return np.array([mu]), np.array([[self.sigma_alpha]])

    def gibbs_theta(self, alpha, theta, gen):
        """Draw ``mu | alpha`` from its normal full conditional."""
        S = alpha.shape[0]
        prec = 1.0 / self.tau ** 2 + S / self.sigma_alpha ** 2
        mean = np.sum(alpha) / self.sigma_alpha ** 2 / prec
        return np.array([mean + gen.standard_normal() / np.sqrt(prec)])

    def prepare(self, dataset: Dataset) -> _NormalData:
        ys = [np.asarray(s.trials["y"], dtype=float) for s in dataset.subjects]
        return _NormalData(
            n=np.array([y.size for y in ys], dtype=float),
            total=np.array([y.sum() for y in ys]),
            sumsq=np.array([np.dot(y, y) for y in ys]),
        )

    def log_obs_batch(self, data, subj, alpha, theta):
        a = alpha[..., 0]
        n = data.n[subj][:, None]
        tot = data.total[subj][:, None]
        ss = data.sumsq[subj][:, None]
        s2 = self.sigma_y ** 2
        resid = ss - 2.0 * a * tot + n * a * a
        return -0.5 * n * (LOG_2PI + np.log(s2)) - 0.5 * resid / s2

    def simulate_subject(self, subject_id, alpha, theta, T, gen):
        y = gen.normal(alpha[0], self.sigma_y, size=T)
        return SubjectData(subject_id, {"y": y})

    # -- closed forms -------------------------------------------------------

    def exact_subject_loglik(self, dataset: Dataset, theta) -> np.ndarray:
        """``log p(y_j | mu)`` for every subject."""
        mu = float(np.asarray(theta, dtype=float).ravel()[0])
        d = self.prepared(dataset)
        s2, sa2 = self.sigma_y ** 2, self.sigma_alpha ** 2
        n = d.n
        dev_sum = d.total - n * mu
        dev_sq = d.sumsq - 2.0 * mu * d.total + n * mu * mu
        denom = s2 + n * sa2
        quad = (dev_sq - sa2 * dev_sum ** 2 / denom) / s2
        logdet = (n - 1.0) * np.log(s2) + np.log(denom)
        return -0.5 * (n * LOG_2PI + logdet + quad)

    def exact_log_likelihood(self, dataset: Dataset, theta) -> float:
        return float(np.sum(self.exact_subject_loglik(dataset, theta)))

    def conditional_re_posterior(self, dataset: Dataset, theta) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard deviation of ``alpha_j | mu, y_j`` for each subject."""
        mu = float(np.asarray(theta, dtype=float).ravel()[0])
        d = self.prepared(dataset)
        prec = 1.0 / self.sigma_alpha ** 2 + d.n / self.sigma_y ** 2
        mean = (mu / self.sigma_alpha ** 2 + d.total / self.sigma_y ** 2) / prec
        return mean, 1.0 / np.sqrt(prec)

    def posterior_mu(self, dataset: Dataset) -> tuple[float, float]:
        """Posterior mean and standard deviation of ``mu``."""
        d = self.prepared(dataset)
        v = self.sigma_alpha ** 2 + self.sigma_y ** 2 / d.n
        prec = 1.0 / self.tau ** 2 + np.sum(1.0 / v)
        mean = np.sum(d.total / d.n / v) / prec
        return float(mean), float(1.0 / np.sqrt(prec))

    def posterior_alpha_mean(self, dataset: Dataset) -> np.ndarray:
        """``E[alpha_j | y]`` for each subject."""
        m_mu, _ = self.posterior_mu(dataset)
        mean, _ = self.conditional_re_posterior(dataset, [m_mu])
        return mean

    def conjugate_log_marginal(self, dataset: Dataset) -> float:
        return conjugate_log_marginal(dataset, self.sigma_y, self.sigma_alpha, self.tau)


def conjugate_log_marginal(dataset: Dataset, sigma_y: float, sigma_alpha: float, tau: float) -> float:
    """Exact ``log p(y)`` of the normal-normal model.

    ``y`` is jointly Gaussian with covariance
    ``sigma_y^2 I + sigma_alpha^2 blockdiag(J) + tau^2 J``.
    """
    y = np.concatenate([np.asarray(s.trials["y"], dtype=float) for s in dataset.subjects])
    offsets = ragged_offsets(dataset)
    n = y.size
    cov = np.full((n, n), tau ** 2)
    for j in range(dataset.S):
        sl = slice(offsets[j], offsets[j + 1])
        cov[sl, sl] += sigma_alpha ** 2
    cov[np.diag_indices(n)] += sigma_y ** 2
    chol = np.linalg.cholesky(cov)
    u = np.linalg.solve(chol, y)
    return float(-0.5 * (n * LOG_2PI + u @ u) - np.sum(np.log(np.diag(chol))))
