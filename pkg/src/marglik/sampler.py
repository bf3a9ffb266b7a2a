"""Pseudo-marginal adaptive random-walk Metropolis over ``theta``.

The intractable likelihood in the acceptance ratio is replaced by the inner
importance-sampling estimate, stored with the current state and reused until
a proposal is accepted.  The random-walk covariance and step size adapt
during burn-in only.  For each retained iteration one ``alpha_j`` per subject
is drawn from the current state's inner particles in proportion to their
weights, which is enough to fit random-effects proposals afterwards.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .core import NumericalError, RngStream, cholesky_ridge
from .likeest import ParticlePolicy, estimate_loglik
from .proposal import LaplaceREProposals, PosteriorDraws, PriorREProposals, initial_alpha

log = logging.getLogger(__name__)


@dataclass
class McmcConfig:
    n_iter: int = 5000
    burn_in: int = 1000
    init: list | None = None
    step_scale: float | None = None
    init_cov_scale: float = 0.01
    adapt_window: int = 200
    inner_N: int = 100
    target_accept: float = 0.234
    n_chains: int = 1
    thin: int = 1
    record_alpha: bool = True
    method: str = "pm_mh"
    theta_steps: int = 10

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must be smaller than n_iter")
        if self.inner_N < 1 or self.adapt_window < 1 or self.n_chains < 1 or self.thin < 1:
            raise ValueError("inner_N, adapt_window, n_chains and thin must be positive")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.method not in ("pm_mh", "mwg"):
            raise ValueError("method must be 'pm_mh' or 'mwg'")


@dataclass
class ChainLog:
    accepted: int
    n_iter: int
    log_scale: np.ndarray
    cov_trace: np.ndarray
    final_cov: np.ndarray

    @property
    def acceptance_rate_after_burn_in(self) -> float:
        return self.accepted / max(self.n_iter, 1)


def _initial_state(model, dataset, props, config, stream, policy):
    gen = stream.child("init").generator()
    if config.init is not None:
        candidates = [np.asarray(config.init, dtype=float)]
    else:
        candidates = list(model.sample_theta_prior(100, gen))
    for k, theta in enumerate(candidates):
        lp = model.log_theta_prior(theta)
        if not np.isfinite(lp):
            continue
        est = estimate_loglik(model, dataset, theta, props, policy, stream.child("like", "init", k),
                              keep_particles=config.record_alpha, allow_zero=True)
        if np.isfinite(est.log_phat):
            return theta, lp, est
    raise NumericalError("no starting value with positive estimated likelihood")


def _run_chain(model, dataset, config: McmcConfig, stream: RngStream, props):
    d = model.d_theta
    policy = ParticlePolicy("fixed", N0=config.inner_N)
    theta, lp, est = _initial_state(model, dataset, props, config, stream, policy)
    gen = stream.child("mh").generator()
    rec_gen = stream.child("record").generator()
    log_s = 0.5 * np.log(config.step_scale if config.step_scale else 2.38 ** 2 / d)
    cov = config.init_cov_scale * np.eye(d)
    chol = cholesky_ridge(cov)
    n_keep = (config.n_iter - config.burn_in + config.thin - 1) // config.thin
    thetas = np.empty((n_keep, d))
    alphas = np.empty((n_keep, dataset.S, model.d_alpha)) if config.record_alpha else None
    log_scale_trace = np.empty(config.n_iter)
    cov_trace = np.empty(config.n_iter)
    history = []
    accepted_after, since_accept, kept = 0, 0, 0
    stuck_limit = 10 * config.adapt_window
    for t in range(config.n_iter):
        prop = theta + np.exp(log_s) * (chol @ gen.standard_normal(d))
        lp_new = model.log_theta_prior(prop)
        log_ratio = -np.inf
        if np.isfinite(lp_new):
            est_new = estimate_loglik(model, dataset, prop, props, policy, stream.child("like", t),
                                      keep_particles=config.record_alpha, allow_zero=True)
            if np.isfinite(est_new.log_phat):
                log_ratio = est_new.log_phat + lp_new - est.log_phat - lp
        accept = np.log(gen.random()) < log_ratio
        if accept:
            theta, lp, est = prop, lp_new, est_new
            since_accept = 0
            if t >= config.burn_in:
                accepted_after += 1
        else:
            since_accept += 1
            if since_accept >= stuck_limit:
                raise NumericalError("chain stuck; reduce step_scale or increase inner_N")
        if t < config.burn_in:
            history.append(theta)
            # Robbins-Monro on the log step size toward the target acceptance
            a = min(1.0, float(np.exp(min(log_ratio, 0.0))))
            log_s += (a - config.target_accept) / (t + 1) ** 0.6
            if (t + 1) % config.adapt_window == 0 and len(history) > 2 * d:
                H = np.asarray(history[len(history) // 2:])
                emp = np.atleast_2d(np.cov(H, rowvar=False)) if H.shape[0] > 1 else cov
                if np.all(np.isfinite(emp)) and np.trace(emp) > 0:
                    cov = emp + 1e-6 * np.trace(emp) / d * np.eye(d)
                    chol = cholesky_ridge(cov)
        log_scale_trace[t] = log_s
        cov_trace[t] = np.trace(cov)
        if t >= config.burn_in and (t - config.burn_in) % config.thin == 0:
            thetas[kept] = theta
            if alphas is not None:
                for j, (a_j, lw_j) in enumerate(est.particles):
                    w = np.exp(lw_j - lw_j.max())
                    alphas[kept, j] = a_j[rec_gen.choice(w.size, p=w / w.sum())]
            kept += 1
    info = ChainLog(accepted_after, config.n_iter - config.burn_in, log_scale_trace, cov_trace, cov)
    return thetas, alphas, info


def _run_mwg_chain(model, dataset, config: McmcConfig, stream: RngStream, props):
    """Metropolis within Gibbs on ``(alpha_1..alpha_S, theta)``.

    Each sweep moves every ``alpha_j`` by a random walk (all subjects in one
    batched likelihood call) and then updates ``theta`` given the random
    effects: by the model's exact ``gibbs_theta`` draw when it has one, else
    by ``theta_steps`` random-walk steps.
    """
    data = model.prepared(dataset)
    S, da, d = dataset.S, model.d_alpha, model.d_theta
    subj = np.arange(S, dtype=np.int64)
    gen = stream.child("mwg").generator()
    theta = np.zeros(d) if config.init is None else np.asarray(config.init, dtype=float)
    theta_in_obs = getattr(model, "obs_depends_on_theta", True)
    exact_theta = hasattr(model, "gibbs_theta") and not theta_in_obs

    def loglik(A, th):
        return model.log_obs_batch(data, subj, A[:, None, :], th)[:, 0]

    alpha = np.array([initial_alpha(model, s) for s in dataset.subjects])
    if isinstance(props, LaplaceREProposals):
        fitted = np.where(np.isfinite(loglik(props.modes, theta))[:, None], props.modes, alpha)
        alpha = fitted

    def re_lp(A, th):
        return model.log_re_prior(A, th)

    ll = loglik(alpha, theta)
    if not np.all(np.isfinite(ll)):
        raise NumericalError("starting random effects have zero likelihood")

    def theta_target(th):
        lp = model.log_theta_prior(th)
        if not np.isfinite(lp):
            return -np.inf, None
        try:
            out = lp + float(np.sum(re_lp(alpha, th)))
        except NumericalError:
            return -np.inf, None
        if theta_in_obs:
            ll_th = loglik(alpha, th)
            out += float(np.sum(ll_th))
            return out, ll_th
        return out, None

    ft, _ = theta_target(theta)
    if not np.isfinite(ft):
        raise NumericalError("starting value has zero posterior density")
    a_log_s = np.full(S, 0.5 * np.log(2.38 ** 2 / da))
    a_chol = np.broadcast_to(0.1 * np.eye(da), (S, da, da)).copy()
    t_log_s = 0.5 * np.log(config.step_scale if config.step_scale else 2.38 ** 2 / d)
    t_cov = config.init_cov_scale * np.eye(d)
    t_chol = cholesky_ridge(t_cov)
    n_keep = (config.n_iter - config.burn_in + config.thin - 1) // config.thin
    thetas = np.empty((n_keep, d))
    alphas = np.empty((n_keep, S, da))
    log_scale_trace = np.empty(config.n_iter)
    cov_trace = np.empty(config.n_iter)
    a_hist, t_hist = [], []
    accepted_after, kept, since_accept = 0, 0, 0
    for t in range(config.n_iter):
        # random effects, all subjects at once
        prop = alpha + np.exp(a_log_s)[:, None] * np.einsum("gij,gj->gi", a_chol, gen.standard_normal((S, da)))
        ll_new = loglik(prop, theta)
        with np.errstate(invalid="ignore"):
            log_r = ll_new + re_lp(prop, theta) - ll - re_lp(alpha, theta)
        log_r = np.where(np.isnan(log_r), -np.inf, log_r)
        acc = np.log(gen.random(S)) < log_r
        alpha = np.where(acc[:, None], prop, alpha)
        ll = np.where(acc, ll_new, ll)
        ft, _ = theta_target(theta)  # the random effects just moved
        # group-level parameters given the random effects
        moved = False
        if exact_theta:
            theta, moved = model.gibbs_theta(alpha, theta, gen), True
        for _ in range(0 if exact_theta else config.theta_steps):
            th_new = theta + np.exp(t_log_s) * (t_chol @ gen.standard_normal(d))
            f_new, ll_th = theta_target(th_new)
            r = f_new - ft
            ok = np.log(gen.random()) < r
            if ok:
                theta, ft, moved = th_new, f_new, True
                if ll_th is not None:
                    ll = ll_th
            if t < config.burn_in:
                a = min(1.0, float(np.exp(min(r, 0.0)))) if np.isfinite(r) else 0.0
                t_log_s += (a - config.target_accept) / (t + 1) ** 0.6
        if t < config.burn_in:
            a_prob = np.exp(np.minimum(log_r, 0.0))
            a_log_s += (a_prob - 0.3) / (t + 1) ** 0.6
            a_hist.append(alpha)
            t_hist.append(theta)
            if (t + 1) % config.adapt_window == 0 and len(t_hist) > 2 * d:
                H = np.asarray(t_hist[len(t_hist) // 2:])
                emp = np.atleast_2d(np.cov(H, rowvar=False))
                if np.all(np.isfinite(emp)) and np.trace(emp) > 0:
                    t_cov = emp + 1e-6 * np.trace(emp) / d * np.eye(d)
                    t_chol = cholesky_ridge(t_cov)
                A = np.asarray(a_hist[len(a_hist) // 2:])
                for j in range(S):
                    c = np.atleast_2d(np.cov(A[:, j, :], rowvar=False))
                    if np.all(np.isfinite(c)) and np.trace(c) > 0:
                        a_chol[j] = cholesky_ridge(c + 1e-6 * np.trace(c) / da * np.eye(da))
        if moved:
            since_accept = 0
            if t >= config.burn_in:
                accepted_after += 1
        else:
            since_accept += 1
            if since_accept >= 10 * config.adapt_window:
                raise NumericalError("chain stuck; reduce step_scale or increase inner_N")
        log_scale_trace[t] = t_log_s
        cov_trace[t] = np.trace(t_cov)
        if t >= config.burn_in and (t - config.burn_in) % config.thin == 0:
            thetas[kept] = theta
            alphas[kept] = alpha
            kept += 1
    info = ChainLog(accepted_after, config.n_iter - config.burn_in, log_scale_trace, cov_trace, t_cov)
    return thetas, alphas if config.record_alpha else None, info


def run_pm_mh(model, dataset, config: McmcConfig, rng=0, re_props=None,
              threads: int = 1) -> PosteriorDraws:
    """Sample ``p(theta | y)`` and pool ``n_chains`` chains.

    ``config.method`` selects the pseudo-marginal random walk (``"pm_mh"``,
    the default) or Metropolis within Gibbs on ``(alpha, theta)``
    (``"mwg"``), which scales better with the dimension of ``theta``.
    ``re_props`` defaults to sampling random effects from ``p(alpha | theta)``.
    Chain ``c`` uses the substream ``("chain", c)``.
    """
    root = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    props = re_props if re_props is not None else PriorREProposals(dataset.S)
    model.prepared(dataset)
    chain = _run_chain if config.method == "pm_mh" else _run_mwg_chain

    def one(c):
        return chain(model, dataset, config, root.child("chain", c), props)

    if threads > 1 and config.n_chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(one, range(config.n_chains)))
    else:
        outs = [one(c) for c in range(config.n_chains)]
    thetas = np.vstack([o[0] for o in outs])
    alphas = np.concatenate([o[1] for o in outs]) if config.record_alpha else None
    logs = [o[2] for o in outs]
    rates = [lg.acceptance_rate_after_burn_in for lg in logs]
    info = {
        "acceptance_rate": float(np.mean(rates)),
        "acceptance_rate_per_chain": rates,
        "chain_logs": logs,
        "seed": root.seed,
        "config": asdict(config),
    }
    return PosteriorDraws(thetas, alphas, tuple(model.theta_names), tuple(model.alpha_names),
                          tuple(s.subject_id for s in dataset.subjects), info)


def write_draws(draws: PosteriorDraws, path) -> None:
    """CSV with ``theta`` columns then one block of ``alpha`` columns per subject, plus a JSON sidecar."""
    cols = list(draws.theta_names) or [f"theta{k}" for k in range(draws.theta_draws.shape[1])]
    blocks = [draws.theta_draws]
    if draws.alpha_draws is not None:
        S, da = draws.alpha_draws.shape[1:]
        names = list(draws.alpha_names) or [f"alpha{k}" for k in range(da)]
        ids = list(draws.subject_ids) or [f"s{j + 1}" for j in range(S)]
        cols += [f"{sid}:{n}" for sid in ids for n in names]
        blocks.append(draws.alpha_draws.reshape(draws.n, S * da))
    data = np.hstack(blocks)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    side = {k: v for k, v in draws.info.items() if k != "chain_logs"}
    side.update(theta_names=list(draws.theta_names), alpha_names=list(draws.alpha_names),
                subject_ids=list(draws.subject_ids), n_draws=draws.n)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def read_draws(path) -> PosteriorDraws:
    """Read draws written by :func:`write_draws` (the sidecar is optional)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    theta_cols = [i for i, c in enumerate(header) if ":" not in c]
    alpha_cols = [i for i, c in enumerate(header) if ":" in c]
    ids, names = [], []
    for i in alpha_cols:
        sid, name = header[i].split(":", 1)
        if sid not in ids:
            ids.append(sid)
        if name not in names:
            names.append(name)
    alpha = None
    if alpha_cols:
        alpha = arr[:, alpha_cols].reshape(arr.shape[0], len(ids), len(names))
    info = {}
    try:
        with open(str(path) + ".json", encoding="utf-8") as fh:
            info = json.load(fh)
    except FileNotFoundError:
        pass
    return PosteriorDraws(arr[:, theta_cols], alpha, tuple(header[i] for i in theta_cols),
                          tuple(names), tuple(ids), info)
