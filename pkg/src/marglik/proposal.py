"""Importance proposals.

* :class:`GaussianMixtureProposal` is the group-level proposal ``g_IS(theta)``,
  fitted to posterior draws by EM with BIC choosing the number of components.
* Random-effects proposals ``m_j(alpha_j | theta, y_j)`` are two-component
  defensive mixtures of a Gaussian fitted for subject ``j`` and the population
  law ``p(alpha_j | theta)``.  Three ways of obtaining the Gaussian are
  provided: conditioning a joint normal fit of ``(alpha_j, theta)`` draws
  (:class:`ConditionalREProposals`), a Laplace approximation of the subject
  likelihood combined with the population law (:class:`LaplaceREProposals`),
  and the prior alone (:class:`PriorREProposals`).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (
    NumericalError,
    as_generator,
    batched_mvn_logpdf,
    cholesky_ridge,
    largest_remainder,
    mvn_logpdf,
    mvt_logpdf,
    symmetrize,
)

log = logging.getLogger(__name__)


@dataclass
class PosteriorDraws:
    """Posterior draws used to build proposals.

    ``alpha_draws`` has shape ``(n_draws, S, d_alpha)`` when present.
    """

    theta_draws: np.ndarray
    alpha_draws: np.ndarray | None = None
    theta_names: tuple = ()
    alpha_names: tuple = ()
    subject_ids: tuple = ()
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_draws = np.atleast_2d(np.asarray(self.theta_draws, dtype=float))
        if not np.all(np.isfinite(self.theta_draws)):
            raise ValueError("posterior draws must be finite")
        if self.alpha_draws is not None:
            self.alpha_draws = np.asarray(self.alpha_draws, dtype=float)
            if self.alpha_draws.ndim != 3 or self.alpha_draws.shape[0] != self.n:
                raise ValueError("alpha_draws must have shape (n_draws, S, d_alpha)")
            if not np.all(np.isfinite(self.alpha_draws)):
                raise ValueError("posterior draws must be finite")

    @property
    def n(self) -> int:
        return self.theta_draws.shape[0]

    def pooled(self, other: "PosteriorDraws") -> "PosteriorDraws":
        alpha = None
        if self.alpha_draws is not None and other.alpha_draws is not None:
            alpha = np.concatenate([self.alpha_draws, other.alpha_draws])
        return PosteriorDraws(np.vstack([self.theta_draws, other.theta_draws]), alpha,
                              self.theta_names, self.alpha_names, self.subject_ids, dict(self.info))


# ---------------------------------------------------------------------------
# group-level proposal


class GaussianMixtureProposal:
    """Mixture of Gaussian (or multivariate-t when ``tail_df`` is set) components."""

    def __init__(self, weights, means, covs, tail_df: float | None = None):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        self.covs = np.array([symmetrize(c) for c in covs])
        if tail_df is not None and not tail_df > 2:
            raise ValueError("tail_df must exceed 2")
        self.tail_df = tail_df
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            if np.any(self.weights <= 0):
                raise ValueError("mixture weights must be positive")
            self.weights = self.weights / self.weights.sum()
        self.chols = np.array([cholesky_ridge(c) for c in self.covs])
        self.bic = {}

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        if self.tail_df is None:
            comps = [mvn_logpdf(theta, m, L) for m, L in zip(self.means, self.chols)]
        else:
            comps = [mvt_logpdf(theta, m, L, self.tail_df) for m, L in zip(self.means, self.chols)]
        return np.stack(comps, axis=-1)

    def log_density(self, theta, weights=None) -> np.ndarray:
        """``log sum_k w_k q_k(theta)``; ``weights`` overrides the mixture weights."""
        w = self.weights if weights is None else np.asarray(weights, dtype=float)
        comps = self.component_logpdf(theta)
        with np.errstate(divide="ignore"):
            lw = np.log(w)
        out = np.logaddexp.reduce(comps + lw, axis=-1)
        return out if np.ndim(theta) > 1 else out[0]

    def sample(self, M: int, rng, antithetic: bool = False, stratified: bool = True):
        """Draw ``M`` points.

        Returns
        -------
        theta : ndarray, shape (M, d)
        log_q : ndarray, shape (M,)
            Log density to divide by in importance weights.  Under stratified
            sampling it is the mixture with the realized component fractions,
            which keeps the weights unbiased whatever the rounding.
        pair : ndarray, shape (M,)
            Index of the antithetic pair each draw belongs to (its own index
            without antithetics).
        """
        if M < 1:
            raise ValueError("M must be positive")
        if antithetic and (M < 2 or M % 2):
            raise ValueError("antithetic sampling needs an even M >= 2")
        gen = as_generator(rng)
        if stratified:
            counts = largest_remainder(self.weights, M)
            labels = np.repeat(np.arange(self.K), counts)
        elif antithetic:
            labels = np.repeat(gen.choice(self.K, size=M // 2, p=self.weights), 2)
        else:
            labels = gen.choice(self.K, size=M, p=self.weights)
        theta = np.empty((M, self.d))
        pair = np.arange(M)
        for k in range(self.K):
            idx = np.flatnonzero(labels == k)
            n = idx.size
            if n == 0:
                continue
            if antithetic:
                half = (n + 1) // 2
                z0 = gen.standard_normal((half, self.d))
                z = np.empty((2 * half, self.d))
                z[0::2], z[1::2] = z0, -z0
                z = z[:n]
                pair[idx] = idx[(np.arange(n) // 2) * 2]
            else:
                z = gen.standard_normal((n, self.d))
            step = z @ self.chols[k].T
            if self.tail_df is not None:
                u = gen.chisquare(self.tail_df, size=(n + 1) // 2 if antithetic else n)
                scale = np.sqrt(self.tail_df / u)
                step *= (np.repeat(scale, 2)[:n] if antithetic else scale)[:, None]
            theta[idx] = self.means[k] + step
        if stratified:
            log_q = self.log_density(theta, weights=np.bincount(labels, minlength=self.K) / M)
        else:
            log_q = self.log_density(theta)
        return theta, log_q, pair

    def to_dict(self) -> dict:
        d = self.d
        rows, cols = np.tril_indices(d)
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "cov_lower": [c[rows, cols].tolist() for c in self.covs],
            "tail_df": self.tail_df,
            "dim": d,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianMixtureProposal":
        d = int(doc["dim"])
        rows, cols = np.tril_indices(d)
        covs = []
        for low in doc["cov_lower"]:
            c = np.zeros((d, d))
            c[rows, cols] = low
            c[cols, rows] = low
            covs.append(c)
        return cls(doc["weights"], doc["means"], covs, doc.get("tail_df"))

    def perturbed(self, shift_sd: float = 0.5, cov_scale: float = 2.0) -> "GaussianMixtureProposal":
        """Copy with means shifted by ``shift_sd`` marginal SDs and covariances scaled."""
        sd = np.sqrt(np.array([np.diag(c) for c in self.covs]))
        return GaussianMixtureProposal(self.weights, self.means + shift_sd * sd,
                                       self.covs * cov_scale, self.tail_df)


def log_g_is(prop: GaussianMixtureProposal, theta) -> np.ndarray:
    return prop.log_density(theta)


def sample_g_is(prop: GaussianMixtureProposal, M: int, rng, antithetic=False, stratified=True):
    theta, _, _ = prop.sample(M, rng, antithetic=antithetic, stratified=stratified)
    return theta


def _n_params(K: int, d: int) -> int:
    return K - 1 + K * d + K * d * (d + 1) // 2


def moment_matched(draws: np.ndarray, tail_df=None) -> GaussianMixtureProposal:
    mean = draws.mean(axis=0)
    cov = np.atleast_2d(np.cov(draws, rowvar=False)) if draws.shape[0] > 1 else np.zeros((draws.shape[1],) * 2)
    d = cov.shape[0]
    tr = np.trace(cov)
    cov = cov + (1e-8 * tr / d if tr > 0 else 1e-8) * np.eye(d)
    return GaussianMixtureProposal([1.0], [mean], [cov], tail_df)


def fit_theta_mixture(draws, K_max: int = 5, rng=0, n_init: int = 10, tol: float = 1e-7,
                      max_iter: int = 500, tail_df: float | None = None,
                      inflate: float = 1.0, dedupe: bool = True) -> GaussianMixtureProposal:
    """Fit Gaussian mixtures with ``K = 1..K_max`` components and keep the BIC minimizer.

    EM uses k-means++ starts and ``n_init`` restarts per ``K``.  A fit in which
    a component's weight drops below ``1/n`` is discarded; if no ``K`` yields a
    usable fit a single moment-matched Gaussian is returned.

    With ``dedupe`` repeated rows (rejected Metropolis moves) are collapsed
    first; otherwise EM happily fits near-point-mass components to them.
    """
    from sklearn.mixture import GaussianMixture

    X = draws.theta_draws if isinstance(draws, PosteriorDraws) else np.atleast_2d(np.asarray(draws, float))
    if dedupe:
        _, first = np.unique(X, axis=0, return_index=True)
        X = X[np.sort(first)]
    n, d = X.shape
    seed = int(as_generator(rng).integers(2 ** 31 - 1))
    var_scale = float(np.mean(np.var(X, axis=0))) if n > 1 else 0.0
    best, best_bic, bics = None, np.inf, {}
    for K in range(1, K_max + 1):
        if K * (d + 1) >= n:
            break
        gm = GaussianMixture(
            n_components=K, covariance_type="full", tol=tol, max_iter=max_iter, n_init=n_init,
            init_params="k-means++", reg_covar=max(1e-10 * var_scale, 1e-300), random_state=seed,
        )
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                gm.fit(X)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.debug("EM failed for K=%d: %s", K, exc)
            continue
        if np.any(gm.weights_ < 1.0 / n) or not np.all(np.isfinite(gm.covariances_)):
            log.debug("degenerate component for K=%d; dropped", K)
            continue
        loglik = float(gm.score(X) * n)
        bic = -2.0 * loglik + _n_params(K, d) * np.log(n)
        bics[K] = bic
        if bic < best_bic:
            best, best_bic = gm, bic
    if best is None or var_scale == 0.0:
        prop = moment_matched(X, tail_df)
    else:
        try:
            prop = GaussianMixtureProposal(best.weights_, best.means_, best.covariances_ * inflate, tail_df)
        except NumericalError:
            prop = moment_matched(X, tail_df)
    prop.bic = bics
    return prop


class DefensiveThetaProposal:
    """``(1 - w) g(theta) + w p(theta)``: optional prior safeguard on the group level."""

    def __init__(self, base: GaussianMixtureProposal, model, prior_weight: float = 0.05):
        if not 0 < prior_weight < 1:
            raise ValueError("prior_weight must lie in (0, 1)")
        self.base = base
        self.model = model
        self.prior_weight = prior_weight

    @property
    def d(self):
        return self.base.d

    def _log_mix(self, theta, c_prior):
        lg = self.base.log_density(theta)
        lp = np.array([self.model.log_theta_prior(t) for t in np.atleast_2d(theta)])
        with np.errstate(divide="ignore"):
            return np.logaddexp(np.log1p(-c_prior) + lg, np.log(c_prior) + lp)

    def log_density(self, theta):
        return self._log_mix(theta, self.prior_weight)

    def sample(self, M, rng, antithetic=False, stratified=True):
        gen = as_generator(rng)
        n_prior = int(largest_remainder([1 - self.prior_weight, self.prior_weight], M)[1]) if stratified \
            else int(gen.binomial(M, self.prior_weight))
        n_base = M - n_prior
        if antithetic and n_base % 2:
            n_base -= 1
            n_prior += 1
        theta_b, _, pair_b = self.base.sample(n_base, gen, antithetic=antithetic, stratified=stratified) \
            if n_base else (np.empty((0, self.d)), None, np.empty(0, int))
        theta_p = self.model.sample_theta_prior(n_prior, gen)
        theta = np.vstack([theta_b, theta_p])
        pair = np.concatenate([pair_b, n_base + np.arange(n_prior)])
        c = n_prior / M if stratified else self.prior_weight
        return theta, self._log_mix(theta, c), pair

    def to_dict(self):
        return {**self.base.to_dict(), "prior_weight": self.prior_weight}


# ---------------------------------------------------------------------------
# random-effects proposals


class REProposalSet:
    """Per-subject random-effects proposals, evaluated in batches.

    Subclasses provide :meth:`primary` returning the fitted Gaussian for a set
    of subjects at ``theta``.  ``w_def`` is the weight on that Gaussian; the
    remainder goes to the population law ``p(alpha | theta)``.
    """

    w_def: float = 0.95
    stratified: bool = True
    antithetic: bool = False
    kind = "base"

    def primary(self, theta, subj):
        """Return ``(mean (G, d), chol (G, d, d))`` or ``None`` for prior-only."""
        raise NotImplementedError

    def __len__(self):
        return self.S

    def __getitem__(self, j) -> "SubjectProposal":
        if not 0 <= j < self.S:
            raise IndexError(j)
        return SubjectProposal(self, j)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "w_def": self.w_def, "stratified": self.stratified,
                "antithetic": self.antithetic}


@dataclass(frozen=True)
class SubjectProposal:
    """View of one subject's proposal inside an :class:`REProposalSet`."""

    owner: REProposalSet
    index: int

    def gaussian(self, theta):
        out = self.owner.primary(np.asarray(theta, float), np.array([self.index]))
        if out is None:
            return None
        return out[0][0], out[1][0]

    def log_density(self, model, alpha, theta):
        return log_m_j(self, model, alpha, theta)

    def sample(self, model, theta, n, rng):
        return sample_m_j(self, model, theta, n, rng)


class PriorREProposals(REProposalSet):
    """``m_j = p(alpha_j | theta)``: the natural sampler."""

    kind = "prior"
    w_def = 0.0

    def __init__(self, S: int, antithetic: bool = False):
        self.S = S
        self.antithetic = antithetic

    def primary(self, theta, subj):
        return None

    def subset(self, idx):
        return PriorREProposals(len(idx), self.antithetic)

    def to_dict(self):
        return {**super().to_dict(), "S": self.S}


def _check_w(w_def):
    if not 0.0 < w_def < 1.0:
        raise ValueError("defensive weight must lie strictly between 0 and 1")
    return float(w_def)


class ConditionalREProposals(REProposalSet):
    """Gaussian ``alpha_j | theta`` from a joint normal fit to ``(alpha_j, theta)`` draws."""

    kind = "conditional"

    def __init__(self, mean_alpha, mean_theta, slope, cond_cov, w_def=0.95,
                 stratified=True, antithetic=False, joint_cov=None):
        self.mean_alpha = np.asarray(mean_alpha, float)      # (S, da)
        self.mean_theta = np.asarray(mean_theta, float)      # (S, dt)
        self.slope = np.asarray(slope, float)                # (S, da, dt)
        self.cond_cov = np.asarray(cond_cov, float)          # (S, da, da)
        self.cond_chol = np.array([cholesky_ridge(c) for c in self.cond_cov])
        self.joint_cov = joint_cov
        self.w_def = _check_w(w_def)
        self.stratified = stratified
        self.antithetic = antithetic
        self.S = self.mean_alpha.shape[0]

    def primary(self, theta, subj):
        dev = theta - self.mean_theta[subj]
        mean = self.mean_alpha[subj] + np.einsum("gij,gj->gi", self.slope[subj], dev)
        return mean, self.cond_chol[subj]

    def subset(self, idx):
        idx = np.asarray(idx)
        return ConditionalREProposals(self.mean_alpha[idx], self.mean_theta[idx], self.slope[idx],
                                      self.cond_cov[idx], self.w_def, self.stratified, self.antithetic)

    def to_dict(self):
        rows, cols = np.tril_indices(self.cond_cov.shape[1])
        return {
            **super().to_dict(),
            "mean_alpha": self.mean_alpha.tolist(),
            "mean_theta": self.mean_theta.tolist(),
            "slope": self.slope.tolist(),
            "cond_cov_lower": [c[rows, cols].tolist() for c in self.cond_cov],
        }

    @classmethod
    def from_dict(cls, doc):
        ma = np.asarray(doc["mean_alpha"], float)
        da = ma.shape[1]
        rows, cols = np.tril_indices(da)
        covs = []
        for low in doc["cond_cov_lower"]:
            c = np.zeros((da, da))
            c[rows, cols] = low
            c[cols, rows] = low
            covs.append(c)
        return cls(ma, doc["mean_theta"], doc["slope"], covs, doc["w_def"],
                   doc.get("stratified", True), doc.get("antithetic", False))


def fit_re_proposals(draws: PosteriorDraws, w_def: float = 0.95, stratified=True,
                     antithetic=False) -> ConditionalREProposals:
    """Condition a per-subject joint normal fit of ``(alpha_j, theta)`` on ``theta``.

    ``alpha_j | theta ~ N(mu_a + S_at S_tt^{-1} (theta - mu_t), S_aa - S_at S_tt^{-1} S_ta)``.
    """
    if draws.alpha_draws is None:
        raise ValueError("random-effect draws are required")
    n, S, da = draws.alpha_draws.shape
    dt = draws.theta_draws.shape[1]
    if n < da + dt + 2:
        raise ValueError("insufficient draws")
    means_a, means_t, slopes, conds, joints = [], [], [], [], []
    for j in range(S):
        Z = np.hstack([draws.alpha_draws[:, j, :], draws.theta_draws])
        mean = Z.mean(axis=0)
        cov = np.cov(Z, rowvar=False)
        cov = cov + 1e-8 * np.trace(cov) / cov.shape[0] * np.eye(cov.shape[0])
        Saa, Sat, Stt = cov[:da, :da], cov[:da, da:], cov[da:, da:]
        Lt = cholesky_ridge(Stt)
        slope = np.linalg.solve(Lt.T, np.linalg.solve(Lt, Sat.T)).T
        cond = symmetrize(Saa - slope @ Sat.T)
        means_a.append(mean[:da])
        means_t.append(mean[da:])
        slopes.append(slope)
        conds.append(cond)
        joints.append(cov)
    return ConditionalREProposals(means_a, means_t, slopes, conds, w_def, stratified, antithetic,
                                  joint_cov=np.array(joints))


class LaplaceREProposals(REProposalSet):
    """Gaussian approximation of each subject's likelihood combined with ``p(alpha | theta)``.

    The subject log-likelihood is expanded to second order around a mode
    (``grad``, ``hess`` are its gradient and negative Hessian there); multiplying
    by the Gaussian population law gives a Gaussian in ``alpha`` for any
    ``theta``.  Exact for the normal-normal model.
    """

    kind = "laplace"

    def __init__(self, modes, grads, hessians, w_def=0.95, stratified=True, antithetic=False,
                 inflate: float = 1.0, model=None):
        self.modes = np.asarray(modes, float)
        self.grads = np.asarray(grads, float)
        self.hessians = np.asarray(hessians, float)
        self.w_def = _check_w(w_def)
        self.stratified = stratified
        self.antithetic = antithetic
        self.inflate = float(inflate)
        self.model = model
        self.S = self.modes.shape[0]
        self._h = np.einsum("gij,gj->gi", self.hessians, self.modes) + self.grads

    def primary(self, theta, subj):
        mean0, L0 = self.model.re_prior_gaussian(theta)
        L0inv = np.linalg.inv(L0)
        P0 = L0inv.T @ L0inv
        P = self.hessians[subj] + P0
        h = self._h[subj] + P0 @ mean0
        Lp = np.linalg.cholesky(P)
        mean = np.linalg.solve(P, h[..., None])[..., 0]
        # covariance chol from precision chol: cov = (Lp Lp^T)^{-1}
        Lp_inv = np.linalg.inv(Lp)
        cov = np.einsum("gki,gkj->gij", Lp_inv, Lp_inv) * self.inflate
        return mean, np.linalg.cholesky(cov)

    def subset(self, idx):
        idx = np.asarray(idx)
        return LaplaceREProposals(self.modes[idx], self.grads[idx], self.hessians[idx], self.w_def,
                                  self.stratified, self.antithetic, self.inflate, self.model)

    def to_dict(self):
        return {**super().to_dict(), "modes": self.modes.tolist(), "grads": self.grads.tolist(),
                "hessians": self.hessians.tolist(), "inflate": self.inflate}

    @classmethod
    def from_dict(cls, doc, model):
        return cls(doc["modes"], doc["grads"], doc["hessians"], doc["w_def"],
                   doc.get("stratified", True), doc.get("antithetic", False),
                   doc.get("inflate", 1.0), model)


def _numerical_hessian(fun_batch, x, h):
    """Central-difference Hessian of a function evaluated on batches of points."""
    d = x.size
    E = np.eye(d) * h
    pts = [x]
    for i in range(d):
        pts += [x + E[i], x - E[i]]
    for i in range(d):
        for j in range(i + 1, d):
            pts += [x + E[i] + E[j], x + E[i] - E[j], x - E[i] + E[j], x - E[i] - E[j]]
    vals = fun_batch(np.array(pts))
    # infinite stencil values are detected by the caller; keep numpy quiet
    with np.errstate(invalid="ignore", over="ignore"):
        return _stencil(vals, d, h)


def _stencil(vals, d, h):
    f0 = vals[0]
    H = np.zeros((d, d))
    grad = np.zeros(d)
    k = 1
    for i in range(d):
        fp, fm = vals[k], vals[k + 1]
        H[i, i] = (fp - 2 * f0 + fm) / h ** 2
        grad[i] = (fp - fm) / (2 * h)
        k += 2
    for i in range(d):
        for j in range(i + 1, d):
            fpp, fpm, fmp, fmm = vals[k:k + 4]
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
            k += 4
    return grad, H


def fit_laplace_re_proposals(model, dataset, w_def=0.95, prior_sd: float = 3.0,
                             stratified=True, antithetic=False, inflate: float = 1.0,
                             step: float = 1e-3, rng=0, check_draws: int = 200,
                             min_inside: float = 0.9, mcmc_iter: int = 4000,
                             refine: bool = False) -> LaplaceREProposals:
    """Per-subject Gaussian fits of ``log p(y_j | alpha)`` under a weak ``N(0, prior_sd^2)`` penalty.

    The default is a Laplace expansion at the penalized mode.  When the mode
    sits on a support boundary (e.g. LBA non-decision time at the fastest
    response) the expansion is useless; this is detected by drawing
    ``check_draws`` points from the fitted Gaussian and requiring a fraction
    ``min_inside`` of them to have positive likelihood.  Failing subjects get
    their Gaussian from the moments of a short random-walk chain on the
    penalized likelihood instead.

    With ``refine`` the likelihood factor is re-estimated where it matters:
    a rough population law ``N(m, C)`` is formed from the first-stage fits,
    each subject's posterior moments under it are obtained by a short chain,
    and ``N(m, C)`` is divided back out.  This corrects subjects whose
    likelihood is far from quadratic between its mode and the bulk of
    ``p(alpha | theta)``.
    """
    from scipy.optimize import minimize

    data = model.prepared(dataset)
    gen = as_generator(rng)
    theta0 = np.zeros(model.d_theta)
    da = model.d_alpha
    P0 = np.eye(da) / prior_sd ** 2
    modes, grads, hessians, bad = [], [], [], []
    for j in range(dataset.S):
        subj = np.array([j])

        def loglik(A):
            A = np.atleast_2d(A)
            return model.log_obs_batch(data, subj, A[None], theta0)[0]

        def objective(a):
            v = loglik(a)[0] - 0.5 * np.sum(a * a) / prior_sd ** 2
            return -v if np.isfinite(v) else 1e12

        start = initial_alpha(model, dataset.subjects[j])
        res = minimize(objective, start, method="Nelder-Mead",
                       options={"maxiter": 4000 * da, "xatol": 1e-6, "fatol": 1e-9})
        res = minimize(objective, res.x, method="BFGS", options={"gtol": 1e-7})
        a_hat = res.x
        h = step
        for _ in range(4):
            g, H = _numerical_hessian(loglik, a_hat, h)
            if np.all(np.isfinite(H)) and np.all(np.isfinite(g)):
                break
            h /= 10.0  # stencil crossed a support boundary
        ok = bool(np.all(np.isfinite(H)) and np.all(np.isfinite(g)))
        negH = np.zeros((da, da))
        if ok:
            w, V = np.linalg.eigh(-symmetrize(H))
            negH = (V * np.clip(w, 0.0, None)) @ V.T
            cov = np.linalg.inv(negH + P0)
            z = gen.standard_normal((check_draws, da)) @ cholesky_ridge(cov).T
            ok = np.mean(np.isfinite(loglik(a_hat + z))) >= min_inside
        if not ok:
            log.debug("subject %d: likelihood not locally quadratic; using chain moments", j)
            bad.append(j)
            g = np.zeros(da)
        modes.append(a_hat)
        grads.append(g)
        hessians.append(negH)
    modes, grads, hessians = np.array(modes), np.array(grads), np.array(hessians)
    if bad:
        bad = np.array(bad, dtype=np.int64)
        mean, cov = _penalized_chain_moments(model, data, bad, modes[bad], prior_sd, gen, mcmc_iter)
        for k, j in enumerate(bad):
            P = np.linalg.inv(cov[k])
            w, V = np.linalg.eigh(symmetrize(P - P0))
            hessians[j] = (V * np.clip(w, 0.0, None)) @ V.T
            modes[j] = mean[k]
            # natural parameter of the likelihood factor: P mean - P0 * 0
            grads[j] = P @ mean[k] - hessians[j] @ mean[k]
    if refine:
        centers = np.array([np.linalg.solve(hessians[j] + P0, hessians[j] @ modes[j] + grads[j])
                            for j in range(dataset.S)])
        m = centers.mean(axis=0)
        C = np.atleast_2d(np.cov(centers, rowvar=False)) if dataset.S > 1 else np.eye(da)
        C = C + np.diag(np.maximum(np.diag(C), 0.01) * 0.1 + 1e-4)
        subj = np.arange(dataset.S, dtype=np.int64)
        mean, cov = _penalized_chain_moments(model, data, subj, centers, (m, C), gen, mcmc_iter)
        Cinv = np.linalg.inv(C)
        for j in range(dataset.S):
            P = np.linalg.inv(cov[j])
            w, V = np.linalg.eigh(symmetrize(P - Cinv))
            hessians[j] = (V * np.clip(w, 0.0, None)) @ V.T
            modes[j] = mean[j]
            grads[j] = P @ mean[j] - Cinv @ m - hessians[j] @ mean[j]
    return LaplaceREProposals(modes, grads, hessians, w_def, stratified, antithetic, inflate, model)


def _penalized_chain_moments(model, data, subj, starts, prior, gen, n_iter):
    """Mean and covariance of ``p(y_j | alpha) N(alpha; m, C)`` by adaptive random walks.

    ``prior`` is either a standard deviation (``m = 0``, ``C = prior^2 I``)
    or a pair ``(m, C)``.  All subjects' chains advance together so each
    iteration is one batched likelihood call.
    """
    G, d = starts.shape
    theta0 = np.zeros(model.d_theta)
    if not isinstance(prior, tuple):
        m, Cinv = np.zeros(d), np.eye(d) / float(prior) ** 2
    else:
        m, Cinv = np.asarray(prior[0], float), np.linalg.inv(prior[1])

    def target(A):
        ll = model.log_obs_batch(data, subj, A[:, None, :], theta0)[:, 0]
        dev = A - m
        return ll - 0.5 * np.einsum("gi,ij,gj->g", dev, Cinv, dev)

    x = starts.copy()
    fx = target(x)
    chol = np.broadcast_to(0.01 * np.eye(d), (G, d, d)).copy()
    scale = 2.38 / np.sqrt(d)
    burn = n_iter // 2
    keep = []
    for t in range(n_iter):
        prop = x + scale * np.einsum("gij,gj->gi", chol, gen.standard_normal((G, d)))
        fp = target(prop)
        acc = np.log(gen.random(G)) < fp - fx
        x = np.where(acc[:, None], prop, x)
        fx = np.where(acc, fp, fx)
        if t >= 200 and t < burn and t % 200 == 0:
            H = np.array(keep[-200:]) if keep else None
            if H is not None:
                for g in range(G):
                    c = np.cov(H[:, g, :], rowvar=False) + 1e-10 * np.eye(d)
                    chol[g] = cholesky_ridge(c)
        keep.append(x.copy())
        if t == burn:
            keep = keep[-1:]
    K = np.array(keep)
    mean = K.mean(axis=0)
    cov = np.array([np.cov(K[:, g, :], rowvar=False) + 1e-10 * np.eye(d) for g in range(G)])
    return mean, cov


def initial_alpha(model, subject) -> np.ndarray:
    """Feasible starting point for mode finding."""
    if hasattr(model, "initial_alpha"):
        return np.asarray(model.initial_alpha(subject), float)
    return np.zeros(model.d_alpha)


class ExactNormalREProposals(REProposalSet):
    """Exact ``alpha_j | theta, y_j`` of the normal-normal model, no defensive component.

    Every importance weight equals ``p(y_j | theta)``, so the inner estimator
    has zero variance; this plugs the exact likelihood into the same code path.
    """

    kind = "exact_normal"

    def __init__(self, model, dataset):
        self.model = model
        self.dataset = dataset
        self.S = dataset.S
        self.w_def = 1.0
        self.stratified = True
        self.antithetic = False

    def primary(self, theta, subj):
        mean, sd = self.model.conditional_re_posterior(self.dataset, theta)
        return mean[subj][:, None], sd[subj][:, None, None]

    def subset(self, idx):
        return ExactNormalREProposals(self.model, self.dataset.subset(idx))


# ---------------------------------------------------------------------------
# sampling and density of the defensive mixture


def draw_particles(model, props: REProposalSet, theta, subj, n: int, gen: np.random.Generator):
    """Draw ``n`` particles for each subject in ``subj`` and their log importance corrections.

    Returns ``alpha`` with shape ``(G, n, d)`` and ``log_ratio = log p(alpha|theta) - log m(alpha)``
    (``None`` when sampling from the prior, where the ratio is identically zero).
    """
    subj = np.asarray(subj, dtype=np.int64)
    G = subj.size
    d = model.d_alpha
    mean0, L0 = model._checked_re_prior(theta)
    prim = props.primary(theta, subj)
    antithetic = props.antithetic and n >= 2
    if prim is None or props.w_def <= 0.0:
        z = _normals(gen, (G, n, d), antithetic)
        return mean0 + z @ L0.T, None
    mean1, L1 = prim
    w = props.w_def
    if w >= 1.0:
        z = _normals(gen, (G, n, d), antithetic)
        alpha = mean1[:, None, :] + np.einsum("gij,gnj->gni", L1, z)
        c1 = 1.0
        labels = np.ones((G, n), dtype=bool)
    elif props.stratified:
        n1 = int(largest_remainder([w, 1.0 - w], n)[0])
        z1 = _normals(gen, (G, n1, d), antithetic)
        z0 = _normals(gen, (G, n - n1, d), antithetic)
        alpha = np.concatenate([
            mean1[:, None, :] + np.einsum("gij,gnj->gni", L1, z1),
            mean0 + z0 @ L0.T,
        ], axis=1)
        c1 = n1 / n
        labels = None
    else:
        if antithetic:
            lab = gen.random((G, (n + 1) // 2)) < w
            labels = np.repeat(lab, 2, axis=1)[:, :n]
        else:
            labels = gen.random((G, n)) < w
        z = _normals(gen, (G, n, d), antithetic)
        a1 = mean1[:, None, :] + np.einsum("gij,gnj->gni", L1, z)
        a0 = mean0 + z @ L0.T
        alpha = np.where(labels[..., None], a1, a0)
        c1 = w
    L0inv = np.linalg.inv(L0)
    hl0 = np.sum(np.log(np.diag(L0)))
    log_p = batched_mvn_logpdf(alpha, mean0, L0inv, hl0)
    L1inv = np.linalg.inv(L1)
    hl1 = np.sum(np.log(np.diagonal(L1, axis1=1, axis2=2)), axis=1)
    log_q = batched_mvn_logpdf(alpha, mean1, L1inv, hl1)
    if c1 >= 1.0:
        log_m = log_q
    elif c1 <= 0.0:
        log_m = log_p
    else:
        log_m = np.logaddexp(np.log(c1) + log_q, np.log1p(-c1) + log_p)
    return alpha, log_p - log_m


def _normals(gen, shape, antithetic):
    G, n, d = shape
    if not antithetic or n < 2:
        return gen.standard_normal(shape)
    half = (n + 1) // 2
    z0 = gen.standard_normal((G, half, d))
    z = np.empty((G, 2 * half, d))
    z[:, 0::2], z[:, 1::2] = z0, -z0
    return z[:, :n]


def log_m_j(prop_j: SubjectProposal, model, alpha, theta) -> np.ndarray:
    """Log density of subject ``j``'s defensive mixture at ``alpha``."""
    theta = np.asarray(theta, float)
    alpha = np.atleast_2d(np.asarray(alpha, float))
    log_p = model.log_re_prior(alpha, theta)
    g = prop_j.gaussian(theta)
    w = prop_j.owner.w_def
    if g is None or w <= 0:
        return log_p
    log_q = mvn_logpdf(alpha, g[0], g[1])
    if w >= 1:
        return log_q
    return np.logaddexp(np.log(w) + log_q, np.log1p(-w) + log_p)


def sample_m_j(prop_j: SubjectProposal, model, theta, n, rng):
    """Draw from subject ``j``'s mixture: Bernoulli component choice, then its Gaussian."""
    gen = as_generator(rng)
    theta = np.asarray(theta, float)
    mean0, L0 = model._checked_re_prior(theta)
    g = prop_j.gaussian(theta)
    w = prop_j.owner.w_def
    z = gen.standard_normal((n, model.d_alpha))
    if g is None or w <= 0:
        return mean0 + z @ L0.T
    pick = gen.random(n) < w
    return np.where(pick[:, None], g[0] + z @ g[1].T, mean0 + z @ L0.T)


def re_proposals_from_dict(doc, model, dataset=None) -> REProposalSet:
    kind = doc["kind"]
    if kind == "conditional":
        return ConditionalREProposals.from_dict(doc)
    if kind == "laplace":
        return LaplaceREProposals.from_dict(doc, model)
    if kind == "prior":
        return PriorREProposals(int(doc["S"]), doc.get("antithetic", False))
    if kind == "exact_normal":
        return ExactNormalREProposals(model, dataset)
    raise ValueError(f"unknown random-effects proposal kind {kind!r}")
