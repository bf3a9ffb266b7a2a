"""Unbiased importance-sampling estimator of ``p(y | theta)``.

For subject ``j`` with particles ``alpha_i ~ m_j``::

    p_hat(y_j | theta) = mean_i  p(y_j | alpha_i, theta) p(alpha_i | theta) / m_j(alpha_i)

The product over subjects is unbiased for ``p(y | theta)``; its log has
delta-method variance ``sum_j (sum w^2 / (sum w)^2 - 1/N_j)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError, RngStream, as_generator
from .models.base import Dataset, SubjectData
from .proposal import REProposalSet, SubjectProposal, draw_particles

log = logging.getLogger(__name__)

MODES = ("fixed", "adaptive_global", "adaptive_per_subject")


@dataclass(frozen=True)
class ParticlePolicy:
    """How many particles each subject gets.

    Attributes
    ----------
    mode : {"fixed", "adaptive_global", "adaptive_per_subject"}
    N0 : int
        Starting (or, in ``fixed`` mode, the only) particle count.
    sigma2_target : float
        Target for the variance of ``log p_hat``.
    max_doublings : int
        Rounds of doubling allowed in ``adaptive_global`` mode.
    pilot_N : int
        Pilot particle count for the jackknife in ``adaptive_per_subject`` mode.
    N_min, N_max : int
        Bounds on per-subject counts chosen by the jackknife rule.
    """

    mode: str = "adaptive_global"
    N0: int = 250
    sigma2_target: float = 1.0
    max_doublings: int = 6
    pilot_N: int = 100
    N_min: int = 20
    N_max: int = 100_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        # a single particle is legal in fixed mode; the estimator stays unbiased
        if self.N0 < (1 if self.mode == "fixed" else 2):
            raise ValueError("N0 too small")
        if not self.sigma2_target > 0:
            raise ValueError("sigma2_target must be positive")
        if self.max_doublings < 0 or self.pilot_N < 3 or not 1 <= self.N_min <= self.N_max:
            raise ValueError("invalid particle policy bounds")


@dataclass
class LikelihoodEstimate:
    log_phat: float
    var_log: float
    log_phat_j: np.ndarray
    var_j: np.ndarray
    N_j: np.ndarray
    target_reached: bool = True
    particles: list | None = field(default=None, repr=False)

    @property
    def per_subject(self) -> list[tuple[float, float, int]]:
        return list(zip(self.log_phat_j.tolist(), self.var_j.tolist(), self.N_j.tolist()))


def _stream(rng, *keys) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.child(*keys).generator()
    return as_generator(rng)


def _row_stats(lw: np.ndarray):
    """Row-wise ``log mean exp`` and delta-method variance of a ``(G, N)`` array."""
    if np.isnan(lw).any():
        raise NumericalError("NaN importance weight")
    n = lw.shape[1]
    top = lw.max(axis=1)
    zero = top == -np.inf
    safe = np.where(zero, 0.0, top)
    w = np.exp(lw - safe[:, None])
    total = w.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_mean = np.log(total) - np.log(n) + safe
        sum_sq = np.sum(w * w, axis=1) / (total * total)
    var = np.maximum(sum_sq - 1.0 / n, 0.0)
    log_mean[zero] = -np.inf
    var[zero] = np.inf
    return log_mean, var, zero


def jackknife_gamma2(log_ws) -> float:
    """Jackknife estimate of the per-particle asymptotic variance of ``log p_hat``.

    With leave-one-out values ``l_(i) = log mean_{k != i} w_k``, returns
    ``(n - 1) * sum_i (l_(i) - mean(l))^2`` so that ``V(log p_hat_n) ~ gamma2 / n``.
    """
    arr = np.asarray(log_ws, dtype=float).ravel()
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise NumericalError("log weights must not be NaN or +inf")
    finite = np.isfinite(arr)
    if finite.sum() < 3:
        raise ValueError("jackknife needs at least 3 finite weights")
    n = arr.size
    top = arr.max()
    w = np.exp(arr - top)
    total = w.sum()
    with np.errstate(divide="ignore"):
        loo = np.log(total - w) + top
    # a dominant weight cancels catastrophically; sum the others directly
    for i in np.flatnonzero(w > 0.5 * total):
        rest = np.delete(arr, i)
        m = rest.max()
        loo[i] = m + np.log(np.sum(np.exp(rest - m)))
    loo -= np.log(n - 1)
    return float((n - 1) * np.sum((loo - loo.mean()) ** 2))


class _Accumulator:
    """Per-subject particle weights, extended block by block."""

    def __init__(self, S, keep):
        self.lw = [[] for _ in range(S)]
        self.alpha = [[] for _ in range(S)] if keep else None
        self.log_mean = np.zeros(S)
        self.var = np.zeros(S)
        self.N = np.zeros(S, dtype=np.int64)
        self.zero = np.zeros(S, dtype=bool)

    def add(self, subj, lw, alpha):
        for g, j in enumerate(subj):
            self.lw[j].append(lw[g])
            if self.alpha is not None:
                self.alpha[j].append(alpha[g])
        # subjects in one call share the same total count, so stack them
        stacked = np.stack([np.concatenate(self.lw[j]) for j in subj])
        lm, var, zero = _row_stats(stacked)
        self.log_mean[subj] = lm
        self.var[subj] = var
        self.zero[subj] = zero
        self.N[subj] = stacked.shape[1]

    def particles(self):
        if self.alpha is None:
            return None
        return [(np.concatenate(a), np.concatenate(w)) for a, w in zip(self.alpha, self.lw)]


def _draw_block(model, data, props, theta, subj, n, gen):
    alpha, log_ratio = draw_particles(model, props, theta, subj, n, gen)
    lw = model.log_obs_batch(data, subj, alpha, theta)
    if log_ratio is not None:
        lw = lw + log_ratio
    if np.isnan(lw).any():
        raise NumericalError("NaN importance weight")
    return alpha, lw


def _groups(subj, N):
    """Split subjects into groups of equal particle count (sorted for determinism)."""
    out = {}
    for j in subj:
        out.setdefault(int(N[j]), []).append(int(j))
    return sorted((n, np.array(js, dtype=np.int64)) for n, js in out.items())


def estimate_loglik(model, dataset: Dataset, theta, props: REProposalSet,
                    policy: ParticlePolicy | None = None, rng=0, *, keep_particles: bool = False,
                    allow_zero: bool = False) -> LikelihoodEstimate:
    """Estimate ``log p(y | theta)`` under a particle policy.

    Parameters
    ----------
    rng : RngStream, Generator or seed
        With an :class:`RngStream`, every particle block has its own substream
        so later blocks extend earlier ones without changing them.
    keep_particles : bool
        Retain ``(alpha, log_w)`` per subject, e.g. for recording random effects.
    allow_zero : bool
        Return ``-inf`` instead of raising when every weight of a subject is zero.
    """
    policy = policy or ParticlePolicy()
    theta = np.asarray(theta, dtype=float)
    S = dataset.S
    if len(props) != S:
        raise ValueError("need one random-effects proposal per subject")
    data = model.prepared(dataset)
    acc = _Accumulator(S, keep_particles)
    everyone = np.arange(S, dtype=np.int64)

    def run(subj, n, *keys):
        alpha, lw = _draw_block(model, data, props, theta, subj, n, _stream(rng, *keys))
        acc.add(subj, lw, alpha)

    def zero_check():
        if acc.zero.any():
            if not allow_zero:
                raise NumericalError("proposal/prior support mismatch")
            return True
        return False

    reached = True
    if policy.mode == "fixed":
        run(everyone, policy.N0, "base")
        zero_check()
    elif policy.mode == "adaptive_global":
        run(everyone, policy.N0, "base")
        for r in range(policy.max_doublings + 1):
            if zero_check() or acc.var.sum() <= policy.sigma2_target:
                break
            if r == policy.max_doublings:
                reached = False
                break
            for n, subj in _groups(_doubling_set(acc.var, policy.sigma2_target), acc.N):
                run(subj, n, "double", r, n)
    else:
        pilot = _Accumulator(S, False)
        alpha, lw = _draw_block(model, data, props, theta, everyone, policy.pilot_N,
                                _stream(rng, "pilot"))
        pilot.add(everyone, lw, None)
        if pilot.zero.any() and not allow_zero:
            raise NumericalError("proposal/prior support mismatch")
        N = np.full(S, policy.N_min, dtype=np.int64)
        for j in range(S):
            if not pilot.zero[j]:
                g2 = jackknife_gamma2(lw[j]) if np.isfinite(lw[j]).sum() >= 3 else np.inf
                want = np.ceil(g2 * S / policy.sigma2_target) if np.isfinite(g2) else policy.N_max
                N[j] = int(np.clip(want, policy.N_min, policy.N_max))
        for n, subj in _groups(everyone, N):
            run(subj, n, "final", n)
        zero_check()
        reached = bool(acc.var.sum() <= policy.sigma2_target)

    if acc.zero.any():
        return LikelihoodEstimate(-np.inf, np.inf, acc.log_mean.copy(), acc.var.copy(), acc.N.copy(),
                                  False, acc.particles())
    if not reached:
        log.debug("variance target %.3g not reached (%.3g)", policy.sigma2_target, acc.var.sum())
    return LikelihoodEstimate(float(np.sum(acc.log_mean)), float(np.sum(acc.var)), acc.log_mean.copy(),
                              acc.var.copy(), acc.N.copy(), reached, acc.particles())


def _doubling_set(var: np.ndarray, target: float) -> np.ndarray:
    """Smallest set of worst subjects whose doubling is predicted to meet ``target``.

    Doubling halves a subject's variance.  If even doubling everyone falls
    short, everyone is doubled.
    """
    order = np.argsort(-var, kind="stable")
    predicted = var.sum()
    chosen = []
    for j in order:
        chosen.append(j)
        predicted -= 0.5 * var[j]
        if predicted <= target:
            break
    return np.sort(np.array(chosen, dtype=np.int64))


def estimate_subject_loglik(model, y_j: SubjectData, theta, prop_j: SubjectProposal, N: int,
                            rng) -> tuple[float, float]:
    """``(log p_hat_j, var_j)`` for one subject with ``N`` particles."""
    if N < 1:
        raise ValueError("N must be positive")
    ds = Dataset([y_j])
    props = prop_j.owner.subset([prop_j.index])
    est = estimate_loglik(model, ds, theta, props, ParticlePolicy("fixed", N0=N), rng)
    return float(est.log_phat_j[0]), float(est.var_j[0])
