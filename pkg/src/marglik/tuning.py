"""Particle-count tuning: computing-time curves, inflation factor and calibration.

With ``sigma2 = V(log p_hat)`` held constant over ``theta``, the IS
asymptotic variance is inflated by ``exp(sigma2)`` and the cost grows like
``1 / sigma2``, so ``CT(sigma2) = exp(sigma2) / sigma2`` is minimized at 1.
For the marginal likelihood itself the relevant curve is
``CT_ML = (exp(sigma2) (v + 1) - 1) / sigma2`` with ``v`` the variance of
``pi / g_IS`` under ``g_IS``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .core import RngStream, log_mean_exp
from .likeest import jackknife_gamma2
from .proposal import draw_particles

TABLE_V = (1.0, 5.0, 10.0, 100.0)


def ct(sigma2):
    """Computing-time proxy ``exp(sigma2) / sigma2``."""
    s = np.asarray(sigma2, dtype=float)
    if np.any(s <= 0):
        raise ValueError("sigma2 must be positive")
    out = np.exp(s) / s
    return float(out) if out.ndim == 0 else out


def ct_ml(sigma2, v: float):
    """Computing time for the marginal-likelihood estimate, ``(e^s (v + 1) - 1) / s``."""
    s = np.asarray(sigma2, dtype=float)
    if np.any(s <= 0) or not v > 0:
        raise ValueError("sigma2 and v must be positive")
    out = (np.exp(s) * (v + 1.0) - 1.0) / s
    return float(out) if out.ndim == 0 else out


def sigma2_min(v: float, tol: float = 1e-6) -> float:
    """Minimizer of ``CT_ML(., v)`` by golden-section search on ``[1e-4, 2]``."""
    res = minimize_scalar(lambda s: ct_ml(s, v), bracket=(1e-4, 0.5, 2.0), method="golden",
                          options={"xtol": tol})
    return float(res.x)


def ct_ratio(v: float) -> float:
    """``CT_ML(sigma2_min(v)) / CT_ML(1)``: what tuning to ``sigma2 = 1`` forgoes."""
    return ct_ml(sigma2_min(v), v) / ct_ml(1.0, v)


def inflation_factor(sigma2):
    """``exp(sigma2)``: variance inflation from using an estimated likelihood."""
    s = np.asarray(sigma2, dtype=float)
    if np.any(s < 0):
        raise ValueError("sigma2 must be non-negative")
    out = np.exp(s)
    return float(out) if out.ndim == 0 else out


def _is_variance(phi, log_w):
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    est = np.sum(phi * w)
    return phi.size * np.sum((phi - est) ** 2 * w * w)


def measure_inflation(model, dataset, g_prop, sigma2: float, M: int = 100_000, rng=0,
                      component: int = 0) -> float:
    """Empirical inflation of the IS variance of a posterior mean.

    Exact-likelihood weights are perturbed by ``z ~ N(-sigma2/2, sigma2)``,
    the idealized log-error of an unbiased likelihood estimator, and the ratio
    of the asymptotic-variance estimates of ``E[theta_component | y]`` with and
    without the noise is returned.  It tends to ``exp(sigma2)``.
    """
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    probe = np.asarray(g_prop.sample(1, np.random.default_rng(0))[0])[0]
    try:
        model.exact_log_likelihood(dataset, probe)
    except NotImplementedError as exc:
        raise ValueError("inflation measurement needs a model with an exact likelihood") from exc
    root = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    theta, log_g, _ = g_prop.sample(M, root.child("theta").generator())
    ll = np.array([model.exact_log_likelihood(dataset, t) for t in theta])
    lp = np.array([model.log_theta_prior(t) for t in theta])
    log_w = ll + lp - log_g
    z = root.child("noise").generator().normal(-0.5 * sigma2, math.sqrt(sigma2), size=M)
    phi = theta[:, component]
    return float(_is_variance(phi, log_w + z) / _is_variance(phi, log_w))


@dataclass
class Calibration:
    N_bar: int
    gamma2_bar: float
    gamma2_j: np.ndarray
    N_j: np.ndarray
    v_hat: float
    sigma2_target: float


def calibrate_N(model, dataset, g_prop, re_props, theta_probe_count: int = 20, pilot_N: int = 100,
                sigma2_target: float = 1.0, rng=0, N_min: int = 20) -> Calibration:
    """Pilot the inner estimator at ``theta`` draws from ``g_IS`` and size ``N``.

    ``gamma2(theta) = sum_j gamma2_j(theta)`` is jackknife-estimated per probe
    and averaged to ``gamma2_bar``; the common count is
    ``max(N_min, ceil(gamma2_bar / sigma2_target))`` and the per-subject
    allocation ``max(N_min, ceil(mean_theta gamma2_j * S / sigma2_target))``.
    """
    if theta_probe_count < 10:
        raise ValueError("need at least 10 probe draws")
    if not sigma2_target > 0:
        raise ValueError("sigma2_target must be positive")
    root = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    theta, log_g, _ = g_prop.sample(theta_probe_count, root.child("probe").generator())
    data = model.prepared(dataset)
    S = dataset.S
    subj = np.arange(S, dtype=np.int64)
    g2 = np.zeros((theta_probe_count, S))
    log_w = np.full(theta_probe_count, -np.inf)
    for i, th in enumerate(theta):
        lp = model.log_theta_prior(th)
        if not np.isfinite(lp):
            continue
        alpha, ratio = draw_particles(model, re_props, th, subj, pilot_N,
                                      root.child("pilot", i).generator())
        lw = model.log_obs_batch(data, subj, alpha, th)
        if ratio is not None:
            lw = lw + ratio
        g2[i] = [jackknife_gamma2(row) if np.isfinite(row).sum() >= 3 else np.inf for row in lw]
        log_w[i] = sum(log_mean_exp(row) for row in lw) + lp - log_g[i]
    usable = np.all(np.isfinite(g2), axis=1)
    if not usable.any():
        raise ValueError("no probe draw gave usable pilot weights")
    g2 = g2[usable]
    gamma2_bar = float(np.mean(g2.sum(axis=1)))
    gamma2_j = g2.mean(axis=0)
    N_bar = max(N_min, math.ceil(gamma2_bar / sigma2_target))
    N_j = np.maximum(N_min, np.ceil(gamma2_j * S / sigma2_target)).astype(np.int64)
    lw = log_w[np.isfinite(log_w)]
    if lw.size:
        w = np.exp(lw - lw.max())
        w /= w.sum()
        v_hat = float(lw.size * np.sum(w * w) - 1.0)
    else:
        v_hat = float("nan")
    return Calibration(N_bar, gamma2_bar, gamma2_j, N_j, v_hat, sigma2_target)


@dataclass
class TuningReport:
    sigma2_grid: list
    ct_values: list
    ct_ml_values: dict
    sigma2_min_per_v: dict
    ct_ratio_per_v: dict
    inflation_empirical: float | None = None
    recommended_N: int | None = None
    calibration: dict = field(default_factory=dict)
    M_rule: str = ("M = sigma2_IS * exp(sigma2) / kappa, where kappa is the target variance of "
                   "the posterior-mean estimate and sigma2_IS the exact-likelihood IS variance")

    def to_dict(self) -> dict:
        return {
            "sigma2_grid": self.sigma2_grid,
            "ct_values": self.ct_values,
            "ct_ml_values": {str(k): v for k, v in self.ct_ml_values.items()},
            "sigma2_min_per_v": {str(k): v for k, v in self.sigma2_min_per_v.items()},
            "ct_ratio_per_v": {str(k): v for k, v in self.ct_ratio_per_v.items()},
            "inflation_empirical": self.inflation_empirical,
            "recommended_N": self.recommended_N,
            "calibration": self.calibration,
            "M_rule": self.M_rule,
        }

    def table(self) -> str:
        """Plain-text table of ``v``, ``sigma2_min`` and the computing-time ratio."""
        lines = [f"{'v':>8}  {'sigma2_min':>10}  {'CT ratio':>8}"]
        for v in self.sigma2_min_per_v:
            lines.append(f"{v:>8g}  {self.sigma2_min_per_v[v]:>10.2f}  {self.ct_ratio_per_v[v]:>8.2f}")
        return "\n".join(lines)


def tuning_report(vs=TABLE_V, grid=None, calibration: Calibration | None = None,
                  inflation_empirical: float | None = None) -> TuningReport:
    grid = np.round(np.arange(0.05, 3.0001, 0.05), 10) if grid is None else np.asarray(grid, float)
    smin = {float(v): sigma2_min(v) for v in vs}
    cal = {}
    if calibration is not None:
        cal = {"gamma2_bar": calibration.gamma2_bar, "N_j": calibration.N_j.tolist(),
               "gamma2_j": calibration.gamma2_j.tolist(), "v_hat_estimate": calibration.v_hat,
               "sigma2_target": calibration.sigma2_target}
        v_hat = calibration.v_hat
        if np.isfinite(v_hat) and v_hat > 0 and float(v_hat) not in smin:
            smin[float(v_hat)] = sigma2_min(v_hat)
    return TuningReport(
        sigma2_grid=grid.tolist(),
        ct_values=ct(grid).tolist(),
        ct_ml_values={v: ct_ml(grid, v).tolist() for v in smin},
        sigma2_min_per_v=smin,
        ct_ratio_per_v={v: ct_ml(s, v) / ct_ml(1.0, v) for v, s in smin.items()},
        inflation_empirical=inflation_empirical,
        recommended_N=None if calibration is None else calibration.N_bar,
        calibration=cal,
    )
