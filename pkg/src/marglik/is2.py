"""Outer importance sampler over group-level parameters.

``theta_i ~ g_IS`` and ``w_i = p_hat(y | theta_i) p(theta_i) / g_IS(theta_i)``;
``mean(w_i)`` is unbiased for ``p(y)`` whatever the inner particle count, and
self-normalized averages of ``phi(theta_i)`` estimate posterior expectations.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError, RngStream, as_generator, log_mean_exp, log_mean_exp_rows
from .likeest import ParticlePolicy, estimate_loglik

log = logging.getLogger(__name__)


@dataclass
class Is2Result:
    log_ml: float
    se_log_analytic: float
    se_log_bootstrap: float
    ess: float
    M: int
    mean_var_loglik: float
    max_weight: float
    sum_sq_normalized: float
    n_target_missed: int = 0
    n_zero_likelihood: int = 0
    per_subject_N_mean: list = field(default_factory=list)
    N_min: int = 0
    N_max: int = 0
    N_mean: float = 0.0

    @property
    def se(self) -> float:
        return self.se_log_bootstrap

    def summary(self) -> str:
        return (f"log p(y) = {self.log_ml:.4f} (se {self.se_log_bootstrap:.4f}, "
                f"ESS {self.ess:.1f}, M {self.M})")

    def per_subject_N_stats(self) -> dict:
        return {"mean_per_subject": self.per_subject_N_mean, "min": self.N_min,
                "max": self.N_max, "mean": self.N_mean}


@dataclass
class WeightedDraws:
    """Outer draws with their weights and inner-estimator summaries.

    ``pair`` maps each draw to its antithetic pair (its own index without
    antithetics); the bootstrap resamples whole pairs.
    """

    theta: np.ndarray
    log_w: np.ndarray
    log_phat: np.ndarray
    var_log: np.ndarray
    log_prior: np.ndarray
    log_g: np.ndarray
    N: np.ndarray
    pair: np.ndarray | None = None
    theta_names: tuple = ()

    @property
    def M(self) -> int:
        return self.log_w.size

    def normalized_weights(self) -> np.ndarray:
        if not np.isfinite(self.log_w).any():
            raise NumericalError("proposal does not cover posterior")
        w = np.exp(self.log_w - self.log_w.max())
        return w / w.sum()

    # -- persistence ---------------------------------------------------------

    def to_csv(self, path) -> None:
        names = list(self.theta_names) or [f"theta{k}" for k in range(self.theta.shape[1])]
        cols = names + ["log_w", "log_phat", "var_log", "log_prior", "log_g", "N_total", "pair"]
        pair = self.pair if self.pair is not None else np.arange(self.M)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(self.M):
                row = [repr(float(x)) for x in self.theta[i]]
                row += [repr(float(x)) for x in (self.log_w[i], self.log_phat[i], self.var_log[i],
                                                 self.log_prior[i], self.log_g[i])]
                row += [str(int(self.N[i].sum())), str(int(pair[i]))]
                fh.write(",".join(row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "WeightedDraws":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        d = len(header) - 7
        return cls(theta=arr[:, :d], log_w=arr[:, d], log_phat=arr[:, d + 1], var_log=arr[:, d + 2],
                   log_prior=arr[:, d + 3], log_g=arr[:, d + 4], N=arr[:, d + 5:d + 6].astype(np.int64),
                   pair=arr[:, d + 6].astype(np.int64), theta_names=tuple(header[:d]))


@dataclass
class ExpectationResult:
    estimate: float
    se: float
    descriptor: str = "phi"


def _analytic_se(log_w: np.ndarray) -> float:
    """Delta-method SE of ``log mean(w)``: ``sqrt((M sum w_hat^2 - 1) / M)``."""
    M = log_w.size
    top = log_w.max()
    w = np.exp(log_w - top)
    sum_sq = np.sum(w * w) / w.sum() ** 2
    return math.sqrt(max(M * sum_sq - 1.0, 0.0) / M)


def bootstrap_se(draws: WeightedDraws | np.ndarray, B: int = 1000, rng=0, pair=None) -> float:
    """Standard deviation of ``log mean(w)`` over ``B`` resamples of the draws.

    With antithetic pairs the pairs are resampled as units.
    """
    if B < 2:
        raise ValueError("need at least 2 bootstrap resamples")
    if isinstance(draws, WeightedDraws):
        log_w, pair = draws.log_w, draws.pair
    else:
        log_w = np.asarray(draws, dtype=float)
    gen = as_generator(rng)
    if pair is not None and np.any(pair != np.arange(log_w.size)):
        _, inv = np.unique(pair, return_inverse=True)
        n_units = inv.max() + 1
        size = np.bincount(inv)
        if np.all(size == size[0]):
            units = np.full((n_units, size[0]), -np.inf)
            for k in range(size[0]):
                units[:, k] = log_w[np.argsort(inv, kind="stable")[k::size[0]]]
            log_w = log_mean_exp_rows(units)
        else:
            log_w = np.array([log_mean_exp(log_w[inv == u]) for u in range(n_units)])
    n = log_w.size
    stats = np.empty(B)
    chunk = max(1, 2_000_000 // n)
    for s in range(0, B, chunk):
        b = min(chunk, B - s)
        idx = gen.integers(0, n, size=(b, n))
        stats[s:s + b] = log_mean_exp_rows(log_w[idx])
    finite = stats[np.isfinite(stats)]
    if finite.size < 2:
        return float("inf")
    return float(np.std(finite, ddof=1))


def _draw_one(model, dataset, re_props, policy, theta, log_g, stream):
    lp = float(model.log_theta_prior(theta))
    if not np.isfinite(lp):
        return lp, -np.inf, np.inf, np.zeros(dataset.S, dtype=np.int64), True, False
    est = estimate_loglik(model, dataset, theta, re_props, policy, stream, allow_zero=True)
    zero = not np.isfinite(est.log_phat)
    return lp, est.log_phat, est.var_log, est.N_j, est.target_reached, zero


def run_is2(model, dataset, g_prop, re_props, policy: ParticlePolicy | None = None, M: int = 10_000,
            rng=0, *, B: int = 1000, antithetic: bool = False, stratified: bool = True,
            threads: int = 1, exact_likelihood: bool = False) -> tuple[Is2Result, WeightedDraws]:
    """Estimate ``log p(y)`` by importance sampling over ``theta``.

    Parameters
    ----------
    g_prop : proposal with ``sample(M, rng, antithetic, stratified)``
        Typically a :class:`~marglik.proposal.GaussianMixtureProposal`.
    re_props : REProposalSet
        Random-effects proposals for the inner estimator.
    rng : int or RngStream
        Root stream; draw ``i`` uses the substream ``("like", i)``.
    threads : int
        Worker threads for the inner estimates; results do not depend on it.
    exact_likelihood : bool
        Use ``model.exact_log_likelihood`` instead of the inner estimator.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    policy = policy or ParticlePolicy()
    root = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    theta, log_g, pair = g_prop.sample(M, root.child("theta").generator(), antithetic=antithetic,
                                       stratified=stratified)
    if not np.all(np.isfinite(log_g)):
        raise NumericalError("proposal density is not finite at its own draws")
    S = dataset.S
    model.prepared(dataset)  # populate the cache before threads share it

    if exact_likelihood:
        results = []
        for i in range(M):
            lp = float(model.log_theta_prior(theta[i]))
            ll = model.exact_log_likelihood(dataset, theta[i]) if np.isfinite(lp) else -np.inf
            results.append((lp, ll, 0.0, np.zeros(S, dtype=np.int64), True, False))
    else:
        def work(i):
            return _draw_one(model, dataset, re_props, policy, theta[i], log_g[i], root.child("like", i))

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, range(M), chunksize=1))
        else:
            results = [work(i) for i in range(M)]

    log_prior = np.array([r[0] for r in results])
    log_phat = np.array([r[1] for r in results])
    var_log = np.array([r[2] for r in results])
    N = np.stack([r[3] for r in results])
    missed = sum(not r[4] for r in results)
    zeros = sum(r[5] for r in results)
    with np.errstate(invalid="ignore"):
        log_w = np.where(np.isfinite(log_prior) & np.isfinite(log_phat), log_phat + log_prior - log_g, -np.inf)
    draws = WeightedDraws(theta, log_w, log_phat, var_log, log_prior, log_g, N, pair,
                          tuple(getattr(model, "theta_names", ())))
    if not np.isfinite(log_w).any():
        raise NumericalError("proposal does not cover posterior")
    w_hat = draws.normalized_weights()
    sum_sq = float(np.sum(w_hat ** 2))
    finite_var = var_log[np.isfinite(var_log)]
    if missed:
        log.warning("inner variance target missed at %d of %d draws", missed, M)
    result = Is2Result(
        log_ml=log_mean_exp(log_w),
        se_log_analytic=_analytic_se(log_w),
        se_log_bootstrap=bootstrap_se(draws, B, root.child("bootstrap").generator()),
        ess=1.0 / sum_sq,
        M=M,
        mean_var_loglik=float(finite_var.mean()) if finite_var.size else float("nan"),
        max_weight=float(w_hat.max()),
        sum_sq_normalized=sum_sq,
        n_target_missed=int(missed),
        n_zero_likelihood=int(zeros),
        per_subject_N_mean=N.mean(axis=0).tolist(),
        N_min=int(N.min()),
        N_max=int(N.max()),
        N_mean=float(N.mean()),
    )
    return result, draws


def posterior_expectation(draws: WeightedDraws, phi, descriptor: str = "phi") -> ExpectationResult:
    """Self-normalized estimate of ``E[phi(theta) | y]`` and its standard error.

    ``phi`` maps the ``(M, d)`` array of draws to ``M`` values (a per-row
    callable is also accepted).
    """
    w_hat = draws.normalized_weights()
    keep = w_hat > 0
    th = draws.theta
    try:
        vals = np.asarray(phi(th), dtype=float)
        if vals.shape != (draws.M,):
            raise ValueError
    except (ValueError, TypeError, IndexError):
        vals = np.array([float(phi(t)) for t in th])
    if not np.all(np.isfinite(vals[keep])):
        raise ValueError("phi must be finite on all weighted draws")
    v, w = vals[keep], w_hat[keep]
    est = float(np.sum(v * w) / np.sum(w))
    se = float(math.sqrt(np.sum((v - est) ** 2 * w * w)))
    return ExpectationResult(est, se, descriptor)


def compare_models(result_a: Is2Result, result_b: Is2Result) -> tuple[float, float]:
    """Log Bayes factor of A over B and its standard error from the bootstrap SEs."""
    log_bf = result_a.log_ml - result_b.log_ml
    return float(log_bf), float(math.hypot(result_a.se_log_bootstrap, result_b.se_log_bootstrap))
